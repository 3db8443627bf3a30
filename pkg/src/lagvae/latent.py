"""Learned Lagrangian dynamics on the angle-aware state.

The state is ``s = (r, cos phi, sin phi, rdot, phidot)``.  Three networks
of ``z = (r, cos phi, sin phi)`` give the mass matrix, the potential and the
input matrix.  Forward-mode tangents and input gradients of the small tanh
MLPs are propagated by hand, which keeps the vector field an ordinary
differentiable torch graph (no nested autograd in the training loop).
"""
from __future__ import annotations

import torch
from torch import nn
import torch.nn.functional as F

from .systems import EL_FORMS, SystemSpec, split_state

MASS_EPS = 1e-4
MAX_CONDITION = 1e12


class SingularMassError(ArithmeticError):
    pass


class TanhMLP(nn.Module):
    """Fully connected tanh network that can also push tangents and pull gradients."""

    def __init__(self, n_in: int, n_out: int, hidden=(64, 64, 64), zero_last: bool = False):
        super().__init__()
        sizes = (n_in, *hidden, n_out)
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(sizes[:-1], sizes[1:]))
        if zero_last:
            nn.init.zeros_(self.layers[-1].weight)
            nn.init.zeros_(self.layers[-1].bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for layer in self.layers[:-1]:
            x = torch.tanh(layer(x))
        return self.layers[-1](x)

    def forward_jvp(self, x: torch.Tensor, v: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Output and its directional derivative along ``v``."""
        for layer in self.layers[:-1]:
            x = torch.tanh(layer(x))
            v = (1 - x * x) * F.linear(v, layer.weight)
        last = self.layers[-1]
        return last(x), F.linear(v, last.weight)

    def forward_grad(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Scalar output (n_out == 1) and its gradient with respect to ``x``."""
        acts = []
        for layer in self.layers[:-1]:
            x = torch.tanh(layer(x))
            acts.append(x)
        last = self.layers[-1]
        out = last(x)[..., 0]
        g = last.weight[0].expand(*out.shape, -1)
        for layer, h in zip(reversed(self.layers[:-1]), reversed(acts)):
            g = (g * (1 - h * h)) @ layer.weight
        return out, g


def _tril_indices(m: int) -> tuple[torch.Tensor, torch.Tensor]:
    return torch.tril_indices(m, m)


class DynamicsNets(nn.Module):
    """Mass, potential and input networks over ``z = (s1, s2, s3)``."""

    def __init__(
        self,
        spec: SystemSpec,
        hidden=(64, 64, 64),
        constant_g: bool = False,
        el_form: str = "eq3",
    ):
        super().__init__()
        if el_form not in EL_FORMS:
            raise ValueError(f"el_form must be one of {EL_FORMS}")
        self.spec = spec
        self.el_form = el_form
        m, nz = spec.dof, spec.n_trans + 2 * spec.n_rot
        self.m, self.nz, self.u_dim = m, nz, spec.u_dim
        self.mass_net = TanhMLP(nz, m * (m + 1) // 2, hidden)
        self.potential_net = TanhMLP(nz, 1, hidden)
        self.constant_g = constant_g
        if constant_g:
            self.g_const = nn.Parameter(torch.eye(m, spec.u_dim))
            self.input_net = None
        else:
            self.input_net = TanhMLP(nz, m * spec.u_dim, hidden)
        rows, cols = _tril_indices(m)
        self.register_buffer("_rows", rows, persistent=False)
        self.register_buffer("_cols", cols, persistent=False)
        self.register_buffer("_diag", (rows == cols).to(torch.get_default_dtype()), persistent=False)

    # -- mass matrix -----------------------------------------------------

    def _tril(self, flat: torch.Tensor) -> torch.Tensor:
        L = flat.new_zeros(*flat.shape[:-1], self.m, self.m)
        L[..., self._rows, self._cols] = flat
        return L

    def _factor(self, raw: torch.Tensor, draw: torch.Tensor | None = None):
        d = self._diag.to(raw.dtype)
        L = self._tril(d * F.softplus(raw) + (1 - d) * raw)
        if draw is None:
            return L, None
        return L, self._tril(d * torch.sigmoid(raw) * draw + (1 - d) * draw)

    def mass(self, z: torch.Tensor) -> torch.Tensor:
        L, _ = self._factor(self.mass_net(z))
        eye = torch.eye(self.m, dtype=z.dtype, device=z.device)
        return L @ L.transpose(-1, -2) + MASS_EPS * eye

    def mass_and_rate(self, z: torch.Tensor, zdot: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """``M(z)`` and ``dM/dt`` along ``zdot`` (exact JVP)."""
        raw, draw = self.mass_net.forward_jvp(z, zdot)
        L, dL = self._factor(raw, draw)
        eye = torch.eye(self.m, dtype=z.dtype, device=z.device)
        M = L @ L.transpose(-1, -2) + MASS_EPS * eye
        dLLt = dL @ L.transpose(-1, -2)
        return M, dLLt + dLLt.transpose(-1, -2)

    # -- potential and input matrix ------------------------------------

    def potential(self, z: torch.Tensor) -> torch.Tensor:
        return self.potential_net(z)[..., 0]

    def potential_and_grad(self, z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.potential_net.forward_grad(z)

    def input_matrix(self, z: torch.Tensor) -> torch.Tensor:
        if self.constant_g:
            return self.g_const.to(z.dtype).expand(*z.shape[:-1], self.m, self.u_dim)
        return self.input_net(z).reshape(*z.shape[:-1], self.m, self.u_dim)

    # -- coordinate helpers ----------------------------------------------

    def generalized_force(self, z: torch.Tensor, dVdz: torch.Tensor) -> torch.Tensor:
        """``-dV/dq`` expressed through the (cos, sin) chain rule, per angle."""
        nt, nr = self.spec.n_trans, self.spec.n_rot
        s2, s3 = z[..., nt : nt + nr], z[..., nt + nr :]
        d1, d2, d3 = dVdz[..., :nt], dVdz[..., nt : nt + nr], dVdz[..., nt + nr :]
        return torch.cat([-d1, d2 * s3 - d3 * s2], -1)


def _check_mass(M: torch.Tensor) -> None:
    with torch.no_grad():
        ev = torch.linalg.eigvalsh(M.detach().double())
        lo, hi = ev[..., 0], ev[..., -1]
        if not torch.isfinite(ev).all() or bool((lo <= 0).any()) or bool((hi / lo > MAX_CONDITION).any()):
            raise SingularMassError("learned mass matrix is singular (condition number > 1e12)")


def latent_rhs(nets: DynamicsNets, s: torch.Tensor, u: torch.Tensor, check: bool = True) -> torch.Tensor:
    """Angle-aware Lagrangian vector field ``ds/dt``.

    ``el_form="eq3"`` uses ``-1/2 (dM/dt) qdot`` as the velocity term;
    ``"full"`` uses the complete Euler-Lagrange form
    ``-(dM/dt) qdot + 1/2 d(qdot' M qdot)/dq``.  Both conserve the learned
    energy when ``u = 0``.
    """
    spec = nets.spec
    s1, s2, s3, s4, s5 = split_state(spec, s)
    z = torch.cat([s1, s2, s3], -1)
    qdot = torch.cat([s4, s5], -1)
    zdot = torch.cat([s4, -s3 * s5, s2 * s5], -1)
    M, dM = nets.mass_and_rate(z, zdot)
    if check:
        _check_mass(M)
    _, dV = nets.potential_and_grad(z)
    force = nets.generalized_force(z, dV)
    force = force + (nets.input_matrix(z) @ u.to(s.dtype).unsqueeze(-1)).squeeze(-1)
    dMq = (dM @ qdot.unsqueeze(-1)).squeeze(-1)
    if nets.el_form == "eq3":
        force = force - 0.5 * dMq
    else:
        force = force - dMq + _kinetic_gradient(nets, z, qdot)
    acc = torch.linalg.solve(M, force.unsqueeze(-1)).squeeze(-1)
    return torch.cat([s4, -s3 * s5, s2 * s5, acc], -1)


def _kinetic_gradient(nets: DynamicsNets, z: torch.Tensor, qdot: torch.Tensor) -> torch.Tensor:
    # 1/2 d(qdot' M qdot)/dq with angles reached through (cos, sin)
    with torch.enable_grad():
        zz = z if z.requires_grad else z.detach().requires_grad_(True)
        K = 0.5 * torch.einsum("...i,...ij,...j->...", qdot, nets.mass(zz), qdot)
        (dK,) = torch.autograd.grad(K.sum(), zz, create_graph=True)
    nt, nr = nets.spec.n_trans, nets.spec.n_rot
    s2, s3 = z[..., nt : nt + nr], z[..., nt + nr :]
    return torch.cat([dK[..., :nt], -s3 * dK[..., nt : nt + nr] + s2 * dK[..., nt + nr :]], -1)


def learned_energy(nets: DynamicsNets, s: torch.Tensor) -> torch.Tensor:
    """``1/2 qdot' M qdot + V`` under the learned networks."""
    s1, s2, s3, s4, s5 = split_state(nets.spec, s)
    z = torch.cat([s1, s2, s3], -1)
    qdot = torch.cat([s4, s5], -1)
    T = 0.5 * torch.einsum("...i,...ij,...j->...", qdot, nets.mass(z), qdot)
    return T + nets.potential(z)


def learned_potential_grad_q(nets: DynamicsNets, z: torch.Tensor) -> torch.Tensor:
    """``dV/dq`` at ``z``; for angles ``-s3 dV/ds2 + s2 dV/ds3``."""
    _, dV = nets.potential_and_grad(z)
    return -nets.generalized_force(z, dV)


class MLPDynamics(nn.Module):
    """Unstructured ablation field ``(s, u) -> ds/dt``."""

    def __init__(self, spec: SystemSpec, hidden=(64, 64, 64), zero_last: bool = False):
        super().__init__()
        self.spec = spec
        self.net = TanhMLP(spec.state_dim + spec.u_dim, spec.state_dim, hidden, zero_last)

    def forward(self, s: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
        u = u.to(s.dtype).expand(*s.shape[:-1], -1)
        return self.net(torch.cat([s, u], -1))


def mlp_rhs(model: MLPDynamics, s: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
    return model(s, u)


class LagrangianDynamics(nn.Module):
    """Callable field wrapper so both dynamics variants share one interface."""

    def __init__(self, spec: SystemSpec, **kwargs):
        super().__init__()
        self.spec = spec
        self.nets = DynamicsNets(spec, **kwargs)

    def forward(self, s: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
        return latent_rhs(self.nets, s, u)


def make_dynamics(spec: SystemSpec, kind: str = "lagrangian", **kwargs) -> nn.Module:
    if kind == "lagrangian":
        return LagrangianDynamics(spec, **kwargs)
    if kind == "mlp":
        kwargs.pop("constant_g", None)
        kwargs.pop("el_form", None)
        return MLPDynamics(spec, **kwargs)
    raise ValueError(f"unknown dynamics {kind!r}; expected 'lagrangian' or 'mlp'")


def angle_state(r, phi, rdot, phidot) -> torch.Tensor:
    """Assemble ``s`` from 1-D coordinate lists (float64)."""
    as1 = lambda v: torch.as_tensor(v, dtype=torch.float64).reshape(-1)
    phi = as1(phi)
    return torch.cat([as1(r), torch.cos(phi), torch.sin(phi), as1(rdot), as1(phidot)])


__all__ = [
    "DynamicsNets",
    "LagrangianDynamics",
    "MLPDynamics",
    "SingularMassError",
    "TanhMLP",
    "angle_state",
    "latent_rhs",
    "learned_energy",
    "learned_potential_grad_q",
    "make_dynamics",
    "mlp_rhs",
]
