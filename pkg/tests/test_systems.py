import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from lagvae.systems import (
    NonFiniteStateError,
    PhysParams,
    SystemSpec,
    gt_accel,
    gt_rhs,
    make_system,
    mass_matrix_gt,
    potential_grad_gt,
    potential_gt,
    q_to_state,
    split_state,
    state_to_q,
    total_energy_gt,
    total_energy_q,
)

angles = st.floats(-2 * math.pi, 2 * math.pi)
rates = st.floats(-3.0, 3.0)


def link_points(spec, q):
    """World positions of body reference points, used for a kinetic-energy oracle."""
    if spec.name == "pendulum":
        (phi,) = q
        return [(spec.phys.lengths[0] * torch.sin(phi), spec.phys.lengths[0] * torch.cos(phi))]
    if spec.name == "cartpole":
        r, phi = q
        l = spec.phys.lengths[1]
        return [(r, 0 * r), (r + l * torch.sin(phi), l * torch.cos(phi))]
    p1, p2 = q
    l1 = spec.phys.lengths[0]
    lc1, lc2 = (f * l for f, l in zip(spec.phys.com_fractions, spec.phys.lengths))
    return [
        (lc1 * torch.sin(p1), lc1 * torch.cos(p1)),
        (l1 * torch.sin(p1) + lc2 * torch.sin(p2), l1 * torch.cos(p1) + lc2 * torch.cos(p2)),
    ]


def kinetic_oracle(spec, q, qdot):
    """T from point-mass velocities (finite differences) plus rotational inertia."""
    h = 1e-6
    pts_p = link_points(spec, q + h * qdot)
    pts_m = link_points(spec, q - h * qdot)
    masses = spec.phys.masses if spec.name != "pendulum" else spec.phys.masses
    T = 0.0
    for m, a, b in zip(masses, pts_p, pts_m):
        vx, vy = (a[0] - b[0]) / (2 * h), (a[1] - b[1]) / (2 * h)
        T = T + 0.5 * m * (vx**2 + vy**2)
    if spec.name == "acrobot":
        T = T + 0.5 * (spec.phys.inertias[0] * qdot[0] ** 2 + spec.phys.inertias[1] * qdot[1] ** 2)
    return T


def test_spec_examples_mass():
    assert mass_matrix_gt(make_system("pendulum"), [0.3]).tolist() == [[1.0]]
    M = mass_matrix_gt(make_system("cartpole"), [0.0, 0.0])
    assert torch.allclose(M, torch.tensor([[1.1, 0.05], [0.05, 0.025]], dtype=torch.float64), atol=1e-15)


def test_acrobot_offdiagonal_absolute_angles():
    # absolute link angles: M12 = m2 l1 lc2 cos(phi1 - phi2)
    spec = make_system("acrobot")
    M = mass_matrix_gt(spec, [0.0, math.pi / 2])
    assert abs(M[0, 1]) < 1e-15
    M = mass_matrix_gt(spec, [0.4, 0.4])
    assert M[0, 1] == pytest.approx(0.5)


@pytest.mark.parametrize("name", ["pendulum", "cartpole", "acrobot"])
def test_mass_matches_kinetic_energy_oracle(name):
    spec = make_system(name)
    rng = np.random.default_rng(0)
    for _ in range(20):
        q = torch.as_tensor(rng.uniform(-3, 3, spec.dof))
        qd = torch.as_tensor(rng.uniform(-2, 2, spec.dof))
        T = 0.5 * qd @ mass_matrix_gt(spec, q) @ qd
        assert float(T) == pytest.approx(float(kinetic_oracle(spec, q, qd)), rel=1e-7, abs=1e-9)


@pytest.mark.parametrize("name", ["pendulum", "cartpole", "acrobot"])
def test_mass_symmetric_positive_definite(name):
    spec = make_system(name)
    q = torch.rand(1000, spec.dof, dtype=torch.float64) * 12 - 6
    M = mass_matrix_gt(spec, q)
    assert torch.equal(M, M.transpose(-1, -2))
    assert torch.linalg.eigvalsh(M)[:, 0].min() > 0


def test_potential_examples():
    p = make_system("pendulum")
    assert float(potential_gt(p, [0.0])) == pytest.approx(10.0)
    assert float(potential_gt(p, [math.pi])) == pytest.approx(-10.0)
    c = make_system("cartpole")
    for r in (-1.0, 0.0, 2.5):
        d = potential_gt(c, [r, 0.0]) - potential_gt(c, [r, math.pi])
        assert float(d) == pytest.approx(2 * 0.1 * 9.8 * 0.5)


@pytest.mark.parametrize("name", ["pendulum", "cartpole", "acrobot"])
def test_potential_gradient_matches_autograd(name):
    spec = make_system(name)
    q = torch.randn(5, spec.dof, dtype=torch.float64, requires_grad=True)
    (g,) = torch.autograd.grad(potential_gt(spec, q).sum(), q)
    assert torch.allclose(g, potential_grad_gt(spec, q.detach()), atol=1e-13)


def test_mass_derivative_drives_accel_consistently():
    # full-form accelerations agree with a Lagrangian built by autograd
    spec = make_system("acrobot")
    q = torch.tensor([0.3, -1.1], dtype=torch.float64)
    qd = torch.tensor([0.7, 1.9], dtype=torch.float64)
    u = torch.tensor([0.2, -0.5], dtype=torch.float64)

    def lagrangian(q, qd):
        return 0.5 * qd @ mass_matrix_gt(spec, q) @ qd - potential_gt(spec, q)

    H = torch.autograd.functional.hessian(lagrangian, (q, qd))
    d2L_dqd2, d2L_dqd_dq = H[1][1], H[1][0]
    dL_dq = torch.autograd.functional.jacobian(lambda x: lagrangian(x, qd), q)
    qdd = torch.linalg.solve(d2L_dqd2, dL_dq - d2L_dqd_dq @ qd + u)
    assert torch.allclose(gt_accel(spec, q, qd, u), qdd, atol=1e-12)


def test_gt_rhs_examples():
    p = make_system("pendulum")
    s = q_to_state(p, [math.pi], [0.0])
    assert torch.allclose(gt_rhs(p, s, [0.0]), torch.zeros(3, dtype=torch.float64), atol=1e-14)
    s = q_to_state(p, [math.pi / 2], [0.0])
    assert float(gt_rhs(p, s, [0.0])[-1]) == pytest.approx(10.0)
    s = q_to_state(p, [0.0], [0.0])
    assert float(gt_rhs(p, s, [2.0])[-1]) == pytest.approx(2.0)


def test_energy_examples():
    p = make_system("pendulum")
    assert float(total_energy_gt(p, q_to_state(p, [math.pi], [0.0]))) == pytest.approx(-10.0)
    assert float(total_energy_gt(p, q_to_state(p, [math.pi], [1.0]))) == pytest.approx(-9.5)
    c = make_system("cartpole")
    q = torch.tensor([0.3, 1.2], dtype=torch.float64)
    assert float(total_energy_q(c, q, torch.zeros(2))) == float(potential_gt(c, q))


@pytest.mark.parametrize("name", ["pendulum", "cartpole", "acrobot"])
@pytest.mark.parametrize("form", ["full", "eq3"])
def test_energy_balance(name, form):
    spec = make_system(name, el_form=form)
    gen = torch.Generator().manual_seed(3)
    for _ in range(10):
        q = torch.rand(spec.dof, generator=gen, dtype=torch.float64) * 6 - 3
        qd = torch.rand(spec.dof, generator=gen, dtype=torch.float64) * 4 - 2
        u = torch.rand(spec.u_dim, generator=gen, dtype=torch.float64) * 4 - 2
        s = q_to_state(spec, q, qd).requires_grad_(True)
        (dE,) = torch.autograd.grad(total_energy_gt(spec, s), s)
        rate = dE @ gt_rhs(spec, s.detach(), u)
        expect = qd @ (spec.input_matrix() @ u)
        assert float(rate) == pytest.approx(float(expect), rel=1e-8, abs=1e-10)


@settings(max_examples=50, deadline=None)
@given(angles, rates)
def test_circle_constraint_rate_vanishes(phi, rate):
    spec = make_system("pendulum")
    s = q_to_state(spec, [phi], [rate])
    _, c, sn, _, _ = split_state(spec, s)
    ds = gt_rhs(spec, s, [0.0])
    _, dc, dsn, _, _ = split_state(spec, ds)
    assert abs(float(2 * c * dc + 2 * sn * dsn)) < 1e-14


def test_state_round_trip():
    spec = make_system("cartpole")
    q = torch.tensor([0.4, 2.0], dtype=torch.float64)
    qd = torch.tensor([0.1, -0.2], dtype=torch.float64)
    q2, qd2 = state_to_q(spec, q_to_state(spec, q, qd))
    assert torch.allclose(q2, q) and torch.allclose(qd2, qd)


def test_dof_counts_and_kinds():
    assert make_system("pendulum").dof == 1
    assert make_system("cartpole").coord_kinds == ("translational", "rotational")
    assert make_system("acrobot").coord_kinds == ("rotational", "rotational")


def test_spec_validation_and_json():
    spec = make_system("acrobot", el_form="eq3")
    assert SystemSpec.from_json(spec.to_json()) == spec
    with pytest.raises(ValueError):
        SystemSpec.from_dict({**spec.to_dict(), "bogus": 1})
    with pytest.raises(ValueError):
        PhysParams(masses=(1.0, -1.0), lengths=(1.0, 1.0), gravity=9.8)
    with pytest.raises(ValueError):
        make_system("pendulum", el_form="other")


def test_constants_are_overridable():
    spec = make_system("pendulum", phys=PhysParams(masses=(2.0,), lengths=(0.5,), gravity=9.0))
    assert float(potential_gt(spec, [0.0])) == pytest.approx(9.0)


def test_rejects_non_finite():
    spec = make_system("pendulum")
    with pytest.raises(NonFiniteStateError):
        gt_accel(spec, [float("nan")], [0.0], [0.0])
