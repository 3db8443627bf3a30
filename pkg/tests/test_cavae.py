import math

import numpy as np
import pytest
import torch

from lagvae.cavae import (
    CoordAwareVAE,
    CoordPosterior,
    EncoderOutputError,
    TraditionalVAE,
    black_box_decode,
    black_box_encode,
    build_initial_state,
    decode,
    encode,
    estimate_velocity,
    initial_state_from_means,
    make_vae,
    sample_coords,
)
from lagvae.dataset import render
from lagvae.distributions import GaussianParam, VonMisesParam
from lagvae.geometry import dec_frame
from lagvae.systems import make_system


def model_for(name, kind="coordinate-aware", seed=0, H=32, W=32):
    torch.manual_seed(seed)
    return make_vae(make_system(name), kind, H, W)


def frames(name, q):
    return torch.as_tensor(render(make_system(name), np.asarray(q, dtype=float)))


def test_velocity_examples():
    spec = make_system("cartpole")
    z = torch.tensor([0.2, 1.0, 0.0], dtype=torch.float64)
    assert torch.equal(estimate_velocity(spec, z, z, 0.1), torch.zeros(2, dtype=torch.float64))
    z1 = torch.tensor([0.5, math.cos(0.1), math.sin(0.1)], dtype=torch.float64)
    v = estimate_velocity(spec, z, z1, 0.1)
    assert float(v[0]) == pytest.approx(3.0)
    assert float(v[1]) == pytest.approx(0.998334, abs=1e-6)
    with pytest.raises(ValueError):
        estimate_velocity(spec, z, z1, 0.0)


def test_velocity_identity_sweep():
    spec = make_system("pendulum")
    gen = torch.Generator().manual_seed(0)
    a = torch.rand(10_000, generator=gen, dtype=torch.float64) * 2 * math.pi - math.pi
    b = torch.rand(10_000, generator=gen, dtype=torch.float64) * 2 * math.pi - math.pi
    z0 = torch.stack([torch.cos(a), torch.sin(a)], -1)
    z1 = torch.stack([torch.cos(b), torch.sin(b)], -1)
    v = estimate_velocity(spec, z0, z1, 0.05)[:, 0]
    assert (v - torch.sin(b - a) / 0.05).abs().max() < 1e-12


@pytest.mark.parametrize("kind", ["coordinate-aware", "traditional"])
@pytest.mark.parametrize("name,n_gauss,n_vm", [("pendulum", 0, 1), ("cartpole", 1, 1), ("acrobot", 0, 2)])
def test_posterior_shapes(kind, name, n_gauss, n_vm):
    model = model_for(name, kind)
    x = frames(name, np.zeros((3, make_system(name).dof)))
    post = encode(model, x)
    if n_gauss:
        assert post.gauss.mean.shape == (3, n_gauss)
    else:
        assert post.gauss is None
    assert post.vm.kappa.shape == (3, n_vm) and post.dir_norm.shape == (3, n_vm)
    assert post.mean().shape == (3, n_gauss + 2 * n_vm)
    assert post.kl().shape == (3,)
    assert decode(model, post.mean()).shape == x.shape


def test_encoder_deterministic():
    model = model_for("cartpole")
    x = frames("cartpole", [0.3, 0.4])
    a, b = model.encode(x), model.encode(x.clone())
    assert torch.equal(a.mean(), b.mean()) and torch.equal(a.vm.kappa, b.vm.kappa)


def test_kl_sums_coordinates():
    spec = make_system("cartpole")
    post = CoordPosterior(
        spec,
        GaussianParam(torch.tensor([[1.0]]), torch.tensor([[0.0]])),
        VonMisesParam(torch.tensor([[[1.0, 0.0]]]), torch.tensor([[0.0]])),
        torch.tensor([[2.0]]),
    )
    assert float(post.kl()) == pytest.approx(0.5)
    assert float(post.norm_penalty()) == 2.0


def test_sample_limits_and_reproducibility():
    spec = make_system("cartpole")
    post = CoordPosterior(
        spec,
        GaussianParam(torch.tensor([[0.3]], dtype=torch.float64), torch.tensor([[-60.0]], dtype=torch.float64)),
        VonMisesParam(torch.tensor([[[0.0, 1.0]]], dtype=torch.float64), torch.tensor([[1e6]], dtype=torch.float64)),
        None,
    )
    z = sample_coords(post, torch.Generator().manual_seed(1))
    assert float(z[0, 0]) == pytest.approx(0.3, abs=1e-12)
    assert abs(math.atan2(float(z[0, 2]), float(z[0, 1])) - math.pi / 2) < 1e-2
    z2 = sample_coords(post, torch.Generator().manual_seed(1))
    assert torch.equal(z, z2)


def test_sampling_is_differentiable_into_encoder():
    model = model_for("cartpole")
    x = frames("cartpole", [[0.1, 0.2]])
    z = model.encode(x).sample(torch.Generator().manual_seed(0))
    z.sum().backward()
    assert all(h[0].weight.grad is not None and h[0].weight.grad.abs().sum() > 0 for h in model.heads)


def test_decode_at_canonical_pose_returns_canvases():
    model = model_for("cartpole")
    z = torch.tensor([0.0, 1.0, 0.0])
    out = model.decode(z)
    canv = model.canvas_images()
    assert torch.allclose(out, canv, atol=1e-6)
    assert canv.min() >= 0 and canv.max() <= 1


def test_decode_shift_moves_cart():
    model = model_for("cartpole")
    with torch.no_grad():
        base = model.decode(torch.tensor([0.0, 1.0, 0.0]))[0]
        pitch = 2.0 / 31
        shifted = model.decode(torch.tensor([3 * pitch, 1.0, 0.0]))[0]
    # the whole cart channel moves three columns to the right
    assert torch.allclose(shifted[:, 3:], base[:, :-3], atol=1e-5)


def test_acrobot_second_link_origin_on_circle():
    spec = make_system("acrobot")
    for phi1 in np.linspace(-3, 3, 9):
        tf = dec_frame(spec, 1, {0: float(phi1), 1: 0.2}, c=[0.4])
        assert math.hypot(float(tf.x), float(tf.y)) == pytest.approx(0.4)


def test_learned_lengths_start_at_half():
    assert model_for("acrobot").lengths.tolist() == [0.5]
    assert model_for("pendulum").lengths.numel() == 0


def test_build_initial_state():
    model = model_for("pendulum")
    x = frames("pendulum", [[0.7]])
    s0, p0, p1 = build_initial_state(model, x, x, 0.05, torch.Generator().manual_seed(0))
    assert s0.shape == (1, 3)
    assert float(s0[0, 2].detach()) == 0.0
    a, _, _ = build_initial_state(model, x, x, 0.05, torch.Generator().manual_seed(0))
    assert torch.equal(a, s0)
    m = initial_state_from_means(model, x, x, 0.05)
    assert torch.equal(m[:, :2], p0.mean())


def test_nonfinite_head_output_raises():
    model = model_for("pendulum")
    with torch.no_grad():
        model.heads[0][-1].bias.fill_(float("nan"))
    with pytest.raises(EncoderOutputError):
        model.encode(frames("pendulum", [[0.1]]))


def test_black_box_pair_matches_contract():
    model = model_for("acrobot", "traditional")
    assert isinstance(model, TraditionalVAE)
    x = frames("acrobot", [[0.1, 0.5]])
    post = black_box_encode(model, x)
    out = black_box_decode(model, post.mean())
    assert out.shape == x.shape and out.min() >= 0 and out.max() <= 1
    assert isinstance(model_for("acrobot"), CoordAwareVAE)
    with pytest.raises(ValueError):
        make_vae(make_system("acrobot"), "beta")
