import math

import pytest
import torch
from torch.func import jacfwd

from lagvae.integrators import rollout
from lagvae.latent import (
    DynamicsNets,
    MLPDynamics,
    SingularMassError,
    TanhMLP,
    angle_state,
    latent_rhs,
    learned_energy,
    learned_potential_grad_q,
    make_dynamics,
)
from lagvae.systems import gt_rhs, make_system, q_to_state

SYSTEMS = ["pendulum", "cartpole", "acrobot"]


def nets_for(name, seed=0, el_form="eq3", **kw):
    torch.manual_seed(seed)
    return DynamicsNets(make_system(name), el_form=el_form, **kw).double()


def random_state(spec, gen, n=None):
    shape = (n, spec.dof) if n else (spec.dof,)
    q = torch.rand(shape, generator=gen, dtype=torch.float64) * 6 - 3
    qd = torch.rand(shape, generator=gen, dtype=torch.float64) * 2 - 1
    return q_to_state(spec, q, qd)


class AnalyticNets(DynamicsNets):
    """Stand-in with ``M = [[1]]``, ``V = gc * s2`` and ``g = [[1]]``."""

    def __init__(self, gc=10.0):
        super().__init__(make_system("pendulum"))
        self.gc = gc

    def mass_and_rate(self, z, zdot):
        one = torch.ones(*z.shape[:-1], 1, 1, dtype=z.dtype)
        return one, 0 * one

    def potential_and_grad(self, z):
        V = self.gc * z[..., 0]
        return V, torch.stack([torch.full_like(V, self.gc), torch.zeros_like(V)], -1)

    def input_matrix(self, z):
        return torch.ones(*z.shape[:-1], 1, 1, dtype=z.dtype)


def test_tanh_mlp_jvp_and_grad_match_autograd():
    torch.manual_seed(0)
    net = TanhMLP(3, 1).double()
    x = torch.randn(4, 3, dtype=torch.float64)
    v = torch.randn(4, 3, dtype=torch.float64)
    _, jv = net.forward_jvp(x, v)
    J = torch.stack([jacfwd(net)(xi) for xi in x])
    assert torch.allclose(jv, (J @ v.unsqueeze(-1)).squeeze(-1), atol=1e-12)
    _, g = net.forward_grad(x)
    assert torch.allclose(g, J[:, 0, :], atol=1e-12)


def test_mass_rate_is_exact_derivative():
    nets = nets_for("acrobot")
    z = torch.randn(4, dtype=torch.float64)
    zd = torch.randn(4, dtype=torch.float64)
    _, dM = nets.mass_and_rate(z, zd)
    J = jacfwd(nets.mass)(z)
    assert torch.allclose(dM, J @ zd, atol=1e-12)


def test_zero_force_gives_zero_acceleration():
    nets = nets_for("cartpole")
    torch.nn.init.zeros_(nets.potential_net.layers[-1].weight)
    s = angle_state([0.3], [1.2], [0.0], [0.0])
    ds = latent_rhs(nets, s, torch.zeros(2, dtype=torch.float64))
    assert torch.equal(ds[-2:], torch.zeros(2, dtype=torch.float64))


def test_torque_identity_from_analytic_potential():
    nets = AnalyticNets(gc=3.0)
    for phi in torch.linspace(-3, 3, 13, dtype=torch.float64):
        z = torch.stack([torch.cos(phi), torch.sin(phi)])
        _, dV = nets.potential_and_grad(z)
        assert float(nets.generalized_force(z, dV)) == pytest.approx(3.0 * math.sin(phi))


def test_pendulum_shaped_nets_match_ground_truth():
    nets = AnalyticNets(gc=10.0)
    spec = make_system("pendulum")
    s = q_to_state(spec, [math.pi / 2], [0.0])
    ds = latent_rhs(nets, s, torch.zeros(1, dtype=torch.float64))
    assert float(ds[-1]) == pytest.approx(10.0)
    assert torch.allclose(ds, gt_rhs(spec, s, [0.0]), atol=1e-14)
    s = q_to_state(spec, [0.7], [1.3])
    u = torch.tensor([0.4], dtype=torch.float64)
    assert torch.allclose(latent_rhs(nets, s, u), gt_rhs(spec, s, u), atol=1e-13)


@pytest.mark.parametrize("name", SYSTEMS)
def test_learned_energy_examples(name):
    nets = nets_for(name)
    spec = nets.spec
    gen = torch.Generator().manual_seed(1)
    s = random_state(spec, gen)
    nt, nr = spec.n_trans, spec.n_rot
    z = s[: nt + 2 * nr]
    s0 = s.clone()
    s0[nt + 2 * nr :] = 0
    with torch.no_grad():
        assert float(learned_energy(nets, s0)) == float(nets.potential(z))
    s2 = s.clone()
    s2[nt + 2 * nr :] *= 2
    with torch.no_grad():
        T1 = learned_energy(nets, s) - nets.potential(z)
        T2 = learned_energy(nets, s2) - nets.potential(z)
    assert float(T2) == pytest.approx(4 * float(T1), rel=1e-12)


@pytest.mark.parametrize("name", SYSTEMS)
@pytest.mark.parametrize("form", ["eq3", "full"])
def test_conservation_directional_derivative(name, form):
    nets = nets_for(name, el_form=form)
    gen = torch.Generator().manual_seed(2)
    u0 = torch.zeros(nets.spec.u_dim, dtype=torch.float64)
    for _ in range(5):
        s = random_state(nets.spec, gen).requires_grad_(True)
        (dE,) = torch.autograd.grad(learned_energy(nets, s), s)
        rate = dE @ latent_rhs(nets, s.detach(), u0)
        assert abs(float(rate.detach())) < 1e-8


@pytest.mark.parametrize("name", SYSTEMS)
def test_energy_balance_with_control(name):
    nets = nets_for(name)
    gen = torch.Generator().manual_seed(3)
    s = random_state(nets.spec, gen).requires_grad_(True)
    u = torch.randn(nets.spec.u_dim, generator=gen, dtype=torch.float64)
    (dE,) = torch.autograd.grad(learned_energy(nets, s), s)
    rate = dE @ latent_rhs(nets, s.detach(), u)
    nt, nr = nets.spec.n_trans, nets.spec.n_rot
    z, qd = s.detach()[: nt + 2 * nr], s.detach()[nt + 2 * nr :]
    assert float(rate.detach()) == pytest.approx(float(qd @ nets.input_matrix(z) @ u), rel=1e-9)


@pytest.mark.parametrize("name", SYSTEMS)
def test_circle_consistency(name):
    nets = nets_for(name)
    gen = torch.Generator().manual_seed(4)
    spec = nets.spec
    s = random_state(spec, gen, 50)
    ds = latent_rhs(nets, s, torch.zeros(spec.u_dim, dtype=torch.float64))
    nt, nr = spec.n_trans, spec.n_rot
    c, sn = s[:, nt : nt + nr], s[:, nt + nr : nt + 2 * nr]
    dc, dsn = ds[:, nt : nt + nr], ds[:, nt + nr : nt + 2 * nr]
    assert (2 * c * dc + 2 * sn * dsn).abs().max() < 1e-10


@pytest.mark.parametrize("name", SYSTEMS)
def test_rollout_conserves_learned_energy(name):
    nets = nets_for(name, seed=7)
    gen = torch.Generator().manual_seed(5)
    s0 = random_state(nets.spec, gen)
    u0 = torch.zeros(nets.spec.u_dim, dtype=torch.float64)
    with torch.no_grad():
        roll = rollout(lambda s, u: latent_rhs(nets, s, u), s0, u0, 0.01, 100)
        E = learned_energy(nets, roll.states)
    assert float((E - E[0]).abs().max()) < 1e-3 * abs(float(E[0]))


def test_gradient_wrt_parameters_finite_difference():
    nets = nets_for("cartpole", seed=3)
    gen = torch.Generator().manual_seed(6)
    # the potential's output bias does not reach dV/dz
    params = [p for n, p in nets.named_parameters() if n != "potential_net.layers.3.bias"]
    s = random_state(nets.spec, gen)
    u = torch.tensor([0.7, -0.3], dtype=torch.float64)
    w = torch.randn(nets.spec.state_dim, generator=gen, dtype=torch.float64)
    f = lambda: latent_rhs(nets, s, u) @ w  # noqa: E731
    grads = torch.autograd.grad(f(), params)
    h = 1e-6
    for k in range(16):
        pi = k % len(params)
        p, g = params[pi], grads[pi]
        idx = int(torch.randint(p.numel(), (1,), generator=gen))
        with torch.no_grad():
            flat = p.view(-1)
            old = flat[idx].item()
            flat[idx] = old + h
            fp = float(f())
            flat[idx] = old - h
            fm = float(f())
            flat[idx] = old
        fd = (fp - fm) / (2 * h)
        an = float(g.view(-1)[idx])
        assert abs(fd - an) <= 1e-4 * max(abs(fd), abs(an)) + 1e-10


def test_mass_positive_definite_over_many_states():
    nets = nets_for("acrobot", seed=9)
    z = torch.randn(10_000, 4, dtype=torch.float64) * 3
    with torch.no_grad():
        torch.linalg.cholesky(nets.mass(z))


def test_singular_mass_detected():
    nets = nets_for("cartpole")
    with torch.no_grad():
        last = nets.mass_net.layers[-1]
        last.weight.zero_()
        # M = L L' + eps I with L = [[~0, 0], [1e5, ~0]] has condition number ~1e14
        last.bias.copy_(torch.tensor([-80.0, 1e5, -80.0], dtype=torch.float64))
    s = angle_state([0.0], [0.1], [0.0], [0.0])
    with pytest.raises(SingularMassError):
        latent_rhs(nets, s, torch.zeros(2, dtype=torch.float64))
    with pytest.raises(SingularMassError):
        nets.mass_net.layers[-1].bias.data[0] = float("nan")
        latent_rhs(nets, s, torch.zeros(2, dtype=torch.float64))


def test_potential_grad_q_sign():
    nets = AnalyticNets(gc=10.0)
    phi = 0.6
    z = torch.tensor([math.cos(phi), math.sin(phi)], dtype=torch.float64)
    # V = 10 cos(phi) -> dV/dphi = -10 sin(phi)
    assert float(learned_potential_grad_q(nets, z)) == pytest.approx(-10 * math.sin(phi))


@pytest.mark.parametrize("name", SYSTEMS)
def test_mlp_dynamics_shapes_and_zero_init(name):
    spec = make_system(name)
    m = MLPDynamics(spec, zero_last=True).double()
    s = random_state(spec, torch.Generator().manual_seed(0), 4)
    out = m(s, torch.zeros(spec.u_dim, dtype=torch.float64))
    assert out.shape == s.shape and torch.count_nonzero(out) == 0


def test_constant_input_matrix_option():
    nets = nets_for("acrobot", constant_g=True)
    z = torch.randn(3, 4, dtype=torch.float64)
    assert torch.equal(nets.input_matrix(z)[0], torch.eye(2, dtype=torch.float64))
    assert nets.input_net is None


def test_make_dynamics_rejects_unknown():
    spec = make_system("pendulum")
    assert isinstance(make_dynamics(spec, "mlp", el_form="eq3"), MLPDynamics)
    with pytest.raises(ValueError):
        make_dynamics(spec, "hnn")
    with pytest.raises(ValueError):
        DynamicsNets(spec, el_form="short")
