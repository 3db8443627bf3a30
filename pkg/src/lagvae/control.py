"""Energy shaping with damping injection, on analytic or learned energies.

For a fully actuated system with input matrix ``g`` (m x u_dim, rank m)
the control law is

    u = g'(g g')^-1 (dV/dq - K_p wrap(q - q*) - K_d qdot)

which replaces the plant potential by ``V_d = 1/2 e' K_p e`` (``e`` the
wrapped error) and then dissipates ``E_d = 1/2 qdot' M qdot + V_d``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import integrators
from .cavae import estimate_velocity
from .dataset import render
from .latent import DynamicsNets, learned_potential_grad_q
from .systems import (
    ROTATIONAL,
    SystemSpec,
    gt_accel,
    mass_matrix_gt,
    potential_gt,
    potential_grad_gt,
)

MIN_SINGULAR_VALUE = 1e-8


class UnderactuatedError(ValueError):
    """The input matrix does not have full row rank."""


def _spd(K, name: str) -> torch.Tensor:
    K = torch.as_tensor(K, dtype=torch.float64)
    if K.dim() != 2 or K.shape[0] != K.shape[1]:
        raise ValueError(f"{name} must be a square matrix")
    if not torch.allclose(K, K.T, atol=1e-12):
        raise ValueError(f"{name} must be symmetric")
    if torch.linalg.eigvalsh(K)[0] <= 0:
        raise ValueError(f"{name} must be positive definite")
    return K


@dataclass
class ControllerGains:
    K_p: torch.Tensor
    K_d: torch.Tensor

    def __post_init__(self):
        self.K_p = _spd(self.K_p, "K_p")
        self.K_d = _spd(self.K_d, "K_d")
        if self.K_p.shape != self.K_d.shape:
            raise ValueError("K_p and K_d must have the same shape")

    @classmethod
    def scaled_identity(cls, m: int, kp: float = 10.0, kd: float = 3.0) -> "ControllerGains":
        eye = torch.eye(m, dtype=torch.float64)
        return cls(kp * eye, kd * eye)


def pseudo_actuation(g) -> torch.Tensor:
    """``g'(g g')^-1`` for ``g`` of shape (..., m, u_dim)."""
    g = torch.as_tensor(g, dtype=torch.float64)
    sv = torch.linalg.svdvals(g)
    if bool((sv[..., -1] < MIN_SINGULAR_VALUE).any()) or g.shape[-2] > g.shape[-1]:
        raise UnderactuatedError("input matrix is rank deficient; energy shaping needs full actuation")
    gt = g.transpose(-1, -2)
    return gt @ torch.linalg.inv(g @ gt)


def wrap_error(spec: SystemSpec, q, q_star) -> torch.Tensor:
    """``q - q*`` with rotational components wrapped to (-pi, pi]."""
    e = torch.as_tensor(q, dtype=torch.float64) - torch.as_tensor(q_star, dtype=torch.float64)
    rot = torch.tensor([k == ROTATIONAL for k in spec.coord_kinds])
    wrapped = math.pi - torch.remainder(math.pi - e, 2 * math.pi)
    return torch.where(rot, wrapped, e)


def _apply(P: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    return (P @ v.unsqueeze(-1)).squeeze(-1)


def potential_shaping(dVdq, q, q_star, K_p, g, spec: SystemSpec) -> torch.Tensor:
    """``beta(q) = g'(g g')^-1 (dV/dq - K_p wrap(q - q*))``."""
    e = wrap_error(spec, q, q_star)
    force = torch.as_tensor(dVdq, dtype=e.dtype) - _apply(torch.as_tensor(K_p, dtype=e.dtype), e)
    return _apply(pseudo_actuation(g), force)


def damping_injection(qdot, K_d, g) -> torch.Tensor:
    """``v(qdot) = -g'(g g')^-1 K_d qdot``."""
    qdot = torch.as_tensor(qdot, dtype=torch.float64)
    return -_apply(pseudo_actuation(g), _apply(torch.as_tensor(K_d, dtype=qdot.dtype), qdot))


def energy_shaping_control(dVdq, q, qdot, q_star, gains: ControllerGains, g, spec: SystemSpec) -> torch.Tensor:
    """Single-expression PD controller with energy compensation."""
    e = wrap_error(spec, q, q_star)
    qdot = torch.as_tensor(qdot, dtype=e.dtype)
    force = torch.as_tensor(dVdq, dtype=e.dtype) - _apply(gains.K_p, e) - _apply(gains.K_d, qdot)
    return _apply(pseudo_actuation(g), force)


def shaped_energy(M, qdot, q, q_star, K_p, spec: SystemSpec) -> torch.Tensor:
    e = wrap_error(spec, q, q_star)
    qdot = torch.as_tensor(qdot, dtype=e.dtype)
    T = 0.5 * torch.einsum("...i,...ij,...j->...", qdot, torch.as_tensor(M, dtype=e.dtype), qdot)
    return T + 0.5 * torch.einsum("...i,ij,...j->...", e, torch.as_tensor(K_p, dtype=e.dtype), e)


# ---------------------------------------------------------------------------
# closed loop


@dataclass
class ControlEpisode:
    spec: SystemSpec
    q: np.ndarray  # (T+1, m) true plant coordinates
    qdot: np.ndarray
    u: np.ndarray  # (T, u_dim), control applied during each step
    V: np.ndarray  # (T+1,) potential used by the controller
    E_shaped: np.ndarray  # (T+1,)
    goal_distance: np.ndarray  # (T+1,)
    dt: float
    saturated_steps: int = 0
    frames: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    def converged(self, tol: float = 0.05) -> bool:
        return bool(self.goal_distance[-1] < tol)

    def first_within(self, tol: float) -> int | None:
        hits = np.nonzero(self.goal_distance < tol)[0]
        return int(hits[0]) if hits.size else None

    def write_csv(self, path) -> Path:
        path = Path(path)
        m, ud = self.q.shape[1], self.u.shape[1]
        cols = ["step", *[f"q{j}" for j in range(m)], *[f"qdot{j}" for j in range(m)]]
        cols += [f"u{k}" for k in range(ud)] + ["V_learned", "E_shaped", "goal_distance"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for k in range(len(self.q)):
                u = self.u[k] if k < len(self.u) else np.full(ud, np.nan)
                row = [k, *self.q[k], *self.qdot[k], *u, self.V[k], self.E_shaped[k], self.goal_distance[k]]
                w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
        return path


def _saturate(u: torch.Tensor, limit: float | None) -> tuple[torch.Tensor, bool]:
    if limit is None:
        return u, False
    clipped = u.clamp(-limit, limit)
    return clipped, bool((clipped != u).any())


def oracle_controller(spec: SystemSpec, q_star, gains: ControllerGains):
    """Control law built from the analytic energies of ``spec``."""
    g = spec.input_matrix()
    q_star = torch.as_tensor(q_star, dtype=torch.float64)

    def u_of(y: torch.Tensor) -> torch.Tensor:
        m = spec.dof
        q, qdot = y[..., :m], y[..., m:]
        return energy_shaping_control(potential_grad_gt(spec, q), q, qdot, q_star, gains, g, spec)

    return u_of


def closed_loop_oracle(
    spec: SystemSpec,
    q0,
    qdot0,
    q_star,
    gains: ControllerGains | None = None,
    dt: float = 0.05,
    T: int = 500,
    saturation: float | None = None,
) -> ControlEpisode:
    """True plant under continuous analytic feedback, RK4 steps of ``dt``.

    The feedback is evaluated at every RK4 stage, so the closed loop is the
    autonomous system the Lyapunov argument applies to.
    """
    gains = gains or ControllerGains.scaled_identity(spec.dof)
    m = spec.dof
    q_star_t = torch.as_tensor(q_star, dtype=torch.float64)
    u_of = oracle_controller(spec, q_star_t, gains)
    sat_hits = 0

    def field_(y, _u):
        u, _ = _saturate(u_of(y), saturation)
        return torch.cat([y[..., m:], gt_accel(spec, y[..., :m], y[..., m:], u)], -1)

    y = torch.cat([torch.as_tensor(q0, dtype=torch.float64), torch.as_tensor(qdot0, dtype=torch.float64)])
    ys, us = [y], []
    for k in range(T):
        u, hit = _saturate(u_of(y), saturation)
        sat_hits += hit
        us.append(u)
        y = integrators.rk4_step(field_, y, u, dt, k)
        ys.append(y)
    Y = torch.stack(ys)
    q, qdot = Y[:, :m], Y[:, m:]
    E = shaped_energy(mass_matrix_gt(spec, q), qdot, q, q_star_t, gains.K_p, spec)
    dist = wrap_error(spec, q, q_star_t).norm(dim=-1)
    return ControlEpisode(
        spec,
        q.numpy(),
        qdot.numpy(),
        torch.stack(us).numpy(),
        potential_gt(spec, q).numpy(),
        E.numpy(),
        dist.numpy(),
        dt,
        sat_hits,
    )


@torch.no_grad()
def _encode_mean(model, x: np.ndarray) -> torch.Tensor:
    dtype = next(model.parameters()).dtype
    return model.encode(torch.as_tensor(x, dtype=dtype)[None]).mean()[0].double()


def _z_to_q(spec: SystemSpec, z: torch.Tensor) -> torch.Tensor:
    nt, nr = spec.n_trans, spec.n_rot
    return torch.cat([z[:nt], torch.atan2(z[nt + nr :], z[nt : nt + nr])])


def closed_loop_learned(
    spec: SystemSpec,
    model,
    goal_image: np.ndarray,
    q0,
    qdot0,
    gains: ControllerGains | None = None,
    dt: float = 0.05,
    T: int = 200,
    saturation: float | None = None,
    true_goal=None,
    H: int | None = None,
    W: int | None = None,
) -> ControlEpisode:
    """Control the true plant from rendered frames with a learned model.

    Every step the current frame is rendered and encoded (posterior means),
    the velocity is the finite difference of the last two encodings, and the
    control computed from the learned ``V`` and ``g`` is held for ``dt``.
    """
    nets = getattr(model.dyn, "nets", None)
    if not isinstance(nets, DynamicsNets):
        raise ValueError("learned-mode control needs Lagrangian dynamics (learned V and g)")
    H = H or model.H
    W = W or model.W
    gains = gains or ControllerGains.scaled_identity(spec.dof)
    m = spec.dof
    dtype = next(model.parameters()).dtype
    z_goal = _encode_mean(model, goal_image)
    q_goal = _z_to_q(spec, z_goal)

    def plant(y, u):
        return torch.cat([y[m:], gt_accel(spec, y[:m], y[m:], u)])

    y = torch.cat([torch.as_tensor(q0, dtype=torch.float64), torch.as_tensor(qdot0, dtype=torch.float64)])
    prev = render(spec, (y[:m] - dt * y[m:]).numpy(), H, W)
    z_prev = _encode_mean(model, prev)
    ys, us, Vs, Es, frames = [y], [], [], [], []
    sat_hits = 0
    for k in range(T + 1):
        frame = render(spec, y[:m].numpy(), H, W)
        frames.append(frame)
        z = _encode_mean(model, frame)
        qdot_l = estimate_velocity(spec, z_prev, z, dt)
        q_l = _z_to_q(spec, z)
        with torch.no_grad():
            zt = z.to(dtype)
            dVdq = learned_potential_grad_q(nets, zt[None])[0].double()
            g = nets.input_matrix(zt[None])[0].double()
            V = float(nets.potential(zt[None])[0])
            M = nets.mass(zt[None])[0].double()
        Vs.append(V)
        Es.append(float(shaped_energy(M, qdot_l, q_l, q_goal, gains.K_p, spec)))
        z_prev = z
        if k == T:
            break
        u, hit = _saturate(energy_shaping_control(dVdq, q_l, qdot_l, q_goal, gains, g, spec), saturation)
        sat_hits += hit
        us.append(u)
        y = integrators.rk4_step(plant, y, u, dt, k)
        ys.append(y)
    Y = torch.stack(ys)
    q = Y[:, :m]
    goal = q_goal if true_goal is None else torch.as_tensor(true_goal, dtype=torch.float64)
    dist = wrap_error(spec, q, goal).norm(dim=-1)
    return ControlEpisode(
        spec,
        q.numpy(),
        Y[:, m:].numpy(),
        torch.stack(us).numpy(),
        np.array(Vs),
        np.array(Es),
        dist.numpy(),
        dt,
        sat_hits,
        frames=np.stack(frames),
        extra={"learned_goal": q_goal.numpy().tolist()},
    )
