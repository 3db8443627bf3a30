"""Ground-truth planar rigid-body systems.

Three systems are provided: a torque-driven pendulum, a fully actuated
cart-pole and a fully actuated acrobot.  Angles are measured from the upright
direction, clockwise in the image plane, so ``phi = 0`` is the configuration of
highest potential energy.  All rotational coordinates are absolute angles of
the body they place (the acrobot's second angle is *not* relative to link 1).

State vectors come in two layouts:

* q-form ``(q, qdot)`` with unwrapped angles, used by the data generator;
* latent form ``s = (r, cos phi, sin phi, rdot, phidot)``, the layout shared
  with the learned dynamics.

Translational coordinates always precede rotational ones in ``q``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Callable

import torch

TRANSLATIONAL = "translational"
ROTATIONAL = "rotational"
SYSTEM_NAMES = ("pendulum", "cartpole", "acrobot")
EL_FORMS = ("full", "eq3")


class NonFiniteStateError(ValueError):
    """Raised when a dynamics function receives NaN or inf entries."""


@dataclass(frozen=True)
class PhysParams:
    """Physical constants.  Lengths and masses are listed per body.

    ``com_fractions`` places each body's centre of mass along its length and
    ``inertias`` are moments about that centre; both only matter for bodies
    that are not point masses (the acrobot links).
    """

    masses: tuple[float, ...]
    lengths: tuple[float, ...]
    gravity: float
    com_fractions: tuple[float, ...] = ()
    inertias: tuple[float, ...] = ()

    def __post_init__(self):
        for name in ("masses", "lengths", "com_fractions", "inertias"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        vals = self.masses + self.lengths + (self.gravity,)
        if any(not (v > 0 and math.isfinite(v)) for v in vals):
            raise ValueError(f"physical constants must be finite and positive: {self}")
        if any(v < 0 for v in self.com_fractions + self.inertias):
            raise ValueError("com_fractions and inertias must be non-negative")


@dataclass(frozen=True)
class SystemSpec:
    name: str
    n_bodies: int
    n_constraints: int
    coord_kinds: tuple[str, ...]
    body_of_coord: tuple[int, ...]
    phys: PhysParams
    geom_constants: tuple[float, ...] = ()
    extent: float = 1.0
    el_form: str = "full"
    actuation: str = "identity"

    def __post_init__(self):
        object.__setattr__(self, "coord_kinds", tuple(self.coord_kinds))
        object.__setattr__(self, "body_of_coord", tuple(int(b) for b in self.body_of_coord))
        object.__setattr__(self, "geom_constants", tuple(float(c) for c in self.geom_constants))
        if self.name not in SYSTEM_NAMES:
            raise ValueError(f"unknown system {self.name!r}; expected one of {SYSTEM_NAMES}")
        if self.dof != 3 * self.n_bodies - self.n_constraints:
            raise ValueError(
                f"{self.name}: dof {self.dof} != 3*{self.n_bodies} - {self.n_constraints}"
            )
        if any(k not in (TRANSLATIONAL, ROTATIONAL) for k in self.coord_kinds):
            raise ValueError(f"bad coordinate kinds {self.coord_kinds}")
        kinds = list(self.coord_kinds)
        if kinds != sorted(kinds, key=lambda k: k != TRANSLATIONAL):
            raise ValueError("translational coordinates must precede rotational ones")
        if len(self.body_of_coord) != self.dof or not all(
            0 <= b < self.n_bodies for b in self.body_of_coord
        ):
            raise ValueError("body_of_coord must name one body per coordinate")
        if self.el_form not in EL_FORMS:
            raise ValueError(f"el_form must be one of {EL_FORMS}")
        if self.actuation != "identity":
            raise ValueError("only fully actuated (identity) input matrices are supported")
        if not self.extent > 0:
            raise ValueError("extent must be positive")

    @property
    def dof(self) -> int:
        return len(self.coord_kinds)

    @property
    def n_trans(self) -> int:
        return self.coord_kinds.count(TRANSLATIONAL)

    @property
    def n_rot(self) -> int:
        return self.coord_kinds.count(ROTATIONAL)

    @property
    def u_dim(self) -> int:
        return self.dof

    @property
    def state_dim(self) -> int:
        return 2 * self.n_trans + 3 * self.n_rot

    def input_matrix(self, dtype=torch.float64) -> torch.Tensor:
        return torch.eye(self.dof, dtype=dtype)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["phys"] = asdict(self.phys)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SystemSpec":
        d = dict(d)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown SystemSpec keys: {sorted(unknown)}")
        phys = d.pop("phys")
        if isinstance(phys, dict):
            phys = PhysParams(**phys)
        return cls(phys=phys, **d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SystemSpec":
        return cls.from_dict(json.loads(text))


def make_system(name: str, el_form: str = "full", **overrides) -> SystemSpec:
    """Default configuration for one of the three benchmark systems."""
    name = name.lower()
    if name == "pendulum":
        spec = dict(
            name="pendulum",
            n_bodies=1,
            n_constraints=2,
            coord_kinds=(ROTATIONAL,),
            body_of_coord=(0,),
            phys=PhysParams(masses=(1.0,), lengths=(1.0,), gravity=10.0),
            extent=1.25,
        )
    elif name == "cartpole":
        spec = dict(
            name="cartpole",
            n_bodies=2,
            n_constraints=4,
            coord_kinds=(TRANSLATIONAL, ROTATIONAL),
            body_of_coord=(0, 1),
            phys=PhysParams(masses=(1.0, 0.1), lengths=(0.6, 0.5), gravity=9.8),
            extent=2.0,
        )
    elif name == "acrobot":
        spec = dict(
            name="acrobot",
            n_bodies=2,
            n_constraints=4,
            coord_kinds=(ROTATIONAL, ROTATIONAL),
            body_of_coord=(0, 1),
            phys=PhysParams(
                masses=(1.0, 1.0),
                lengths=(1.0, 1.0),
                gravity=9.8,
                com_fractions=(0.5, 0.5),
                inertias=(1.0 / 12.0, 1.0 / 12.0),
            ),
            geom_constants=(1.0,),
            extent=2.25,
        )
    else:
        raise ValueError(f"unknown system {name!r}")
    spec["el_form"] = el_form
    spec.update(overrides)
    return SystemSpec(**spec)


# ---------------------------------------------------------------------------
# closed-form mechanics on a batch of configurations qb of shape (B, m)


def _mechanics(spec: SystemSpec, c: torch.Tensor, sn: torch.Tensor):
    """Closed-form mechanics written in the angle components.

    ``c`` and ``sn`` (B, n_rot) are the cosines and sines of the rotational
    coordinates; nothing here assumes ``c^2 + sn^2 = 1``, so the same formulas
    extend smoothly off the circle.  Angle derivatives use
    ``d/dphi = -sn d/dc + c d/dsn``.

    Returns ``M`` (B,m,m), ``dM/dq`` (B,m,m,m, last index = q_k), ``V`` (B,)
    and ``dV/dq`` (B,m).
    """
    p = spec.phys
    g = p.gravity
    B, m = c.shape[0], spec.dof
    M = c.new_zeros(B, m, m)
    dM = c.new_zeros(B, m, m, m)
    if spec.name == "pendulum":
        mass, l = p.masses[0], p.lengths[0]
        M[:, 0, 0] = mass * l * l
        V = mass * g * l * c[:, 0]
        dV = -mass * g * l * sn
    elif spec.name == "cartpole":
        mc, mp = p.masses
        l = p.lengths[1]
        M[:, 0, 0] = mc + mp
        M[:, 1, 1] = mp * l * l
        M[:, 0, 1] = M[:, 1, 0] = mp * l * c[:, 0]
        dM[:, 0, 1, 1] = dM[:, 1, 0, 1] = -mp * l * sn[:, 0]
        V = mp * g * l * c[:, 0]
        dV = torch.stack([torch.zeros_like(V), -mp * g * l * sn[:, 0]], -1)
    else:
        m1, m2 = p.masses
        l1 = p.lengths[0]
        lc1, lc2 = (f * l for f, l in zip(p.com_fractions, p.lengths))
        i1, i2 = p.inertias
        (c1, c2), (s1, s2) = c.unbind(-1), sn.unbind(-1)
        k = m2 * l1 * lc2
        M[:, 0, 0] = m1 * lc1**2 + i1 + m2 * l1**2
        M[:, 1, 1] = m2 * lc2**2 + i2
        # cos(p1 - p2) and sin(p1 - p2)
        M[:, 0, 1] = M[:, 1, 0] = k * (c1 * c2 + s1 * s2)
        d = -k * (s1 * c2 - c1 * s2)
        dM[:, 0, 1, 0] = dM[:, 1, 0, 0] = d
        dM[:, 0, 1, 1] = dM[:, 1, 0, 1] = -d
        a1, a2 = g * (m1 * lc1 + m2 * l1), g * m2 * lc2
        V = a1 * c1 + a2 * c2
        dV = torch.stack([-a1 * s1, -a2 * s2], -1)
    return M, dM, V, dV


def _mechanics_q(spec: SystemSpec, qb: torch.Tensor):
    phi = qb[:, spec.n_trans:]
    return _mechanics(spec, torch.cos(phi), torch.sin(phi))


def _accel(spec: SystemSpec, mech, qdb: torch.Tensor, ub: torch.Tensor) -> torch.Tensor:
    M, dM, _, dV = mech  # dM[b, i, j, k] = dM_ij / dq_k
    mdot_qd = torch.einsum("bijk,bk,bj->bi", dM, qdb, qdb)
    force = ub @ spec.input_matrix(ub.dtype).T - dV
    if spec.el_form == "full":
        quad = torch.einsum("bi,bijk,bj->bk", qdb, dM, qdb)
        rhs = -mdot_qd + 0.5 * quad + force
    else:
        rhs = -0.5 * mdot_qd + force
    return torch.linalg.solve(M, rhs.unsqueeze(-1)).squeeze(-1)


def _t(x, like: torch.Tensor | None = None) -> torch.Tensor:
    dtype = like.dtype if like is not None else None
    if torch.is_tensor(x):
        return x if dtype is None else x.to(dtype)
    return torch.as_tensor(x, dtype=dtype or torch.float64)


def _as_batch(x, dim: int, like: torch.Tensor | None = None) -> tuple[torch.Tensor, tuple[int, ...]]:
    x = _t(x, like)
    lead = tuple(x.shape[:-1])
    if x.shape[-1] != dim:
        raise ValueError(f"expected trailing dimension {dim}, got shape {tuple(x.shape)}")
    return x.reshape(-1, dim), lead


def mass_matrix_gt(spec: SystemSpec, q) -> torch.Tensor:
    """Mass matrix ``M(q)``; accepts any leading batch shape."""
    qb, lead = _as_batch(q, spec.dof)
    return _mechanics_q(spec, qb)[0].reshape(*lead, spec.dof, spec.dof)


def potential_gt(spec: SystemSpec, q) -> torch.Tensor:
    qb, lead = _as_batch(q, spec.dof)
    return _mechanics_q(spec, qb)[2].reshape(lead)


def potential_grad_gt(spec: SystemSpec, q) -> torch.Tensor:
    """``dV/dq`` in closed form."""
    qb, lead = _as_batch(q, spec.dof)
    return _mechanics_q(spec, qb)[3].reshape(*lead, spec.dof)


def gt_accel(spec: SystemSpec, q, qdot, u) -> torch.Tensor:
    """Generalised accelerations from the Euler-Lagrange equations.

    ``spec.el_form == "full"`` solves
    ``M qdd = -Mdot qd + 1/2 d/dq(qd' M qd) - dV/dq + g u``;
    ``"eq3"`` uses the abbreviated ``M qdd = -1/2 Mdot qd - dV/dq + g u``.
    """
    qb, lead = _as_batch(q, spec.dof)
    qdb, _ = _as_batch(qdot, spec.dof, qb)
    ub, _ = _as_batch(u, spec.u_dim, qb)
    for name, t in (("q", qb), ("qdot", qdb), ("u", ub)):
        if not torch.isfinite(t).all():
            raise NonFiniteStateError(f"non-finite {name} passed to ground-truth dynamics")
    qdd = _accel(spec, _mechanics_q(spec, qb), qdb, ub)
    return qdd.reshape(*lead, spec.dof)


def gt_q_field(spec: SystemSpec) -> Callable[[torch.Tensor, torch.Tensor], torch.Tensor]:
    """Vector field on ``y = (q, qdot)`` for fixed-step integration."""
    m = spec.dof

    def f(y, u):
        q, qd = y[..., :m], y[..., m:]
        return torch.cat([qd, gt_accel(spec, q, qd, u)], dim=-1)

    return f


# ---------------------------------------------------------------------------
# latent-form helpers


def q_to_state(spec: SystemSpec, q, qdot) -> torch.Tensor:
    q = _t(q)
    qdot = _t(qdot, q)
    nt = spec.n_trans
    r, phi = q[..., :nt], q[..., nt:]
    return torch.cat([r, torch.cos(phi), torch.sin(phi), qdot[..., :nt], qdot[..., nt:]], dim=-1)


def split_state(spec: SystemSpec, s: torch.Tensor):
    """Return the five blocks ``(r, cos, sin, rdot, phidot)``."""
    nt, nr = spec.n_trans, spec.n_rot
    idx = [0, nt, nt + nr, nt + 2 * nr, 2 * nt + 2 * nr, 2 * nt + 3 * nr]
    if s.shape[-1] != idx[-1]:
        raise ValueError(f"state dimension {s.shape[-1]} != {idx[-1]} for {spec.name}")
    return tuple(s[..., a:b] for a, b in zip(idx[:-1], idx[1:]))


def state_to_q(spec: SystemSpec, s) -> tuple[torch.Tensor, torch.Tensor]:
    """Recover ``(q, qdot)``; angles come back wrapped to (-pi, pi]."""
    s = _t(s)
    r, c, sn, rd, pd = split_state(spec, s)
    return torch.cat([r, torch.atan2(sn, c)], -1), torch.cat([rd, pd], -1)


def gt_rhs(spec: SystemSpec, s, u) -> torch.Tensor:
    """Time derivative of the latent-form state under the true dynamics.

    The mechanics are evaluated on the stored (cos, sin) components rather
    than on a recovered angle, matching the structure of the learned model.
    """
    s = _t(s)
    if not torch.isfinite(s).all():
        raise NonFiniteStateError("non-finite state passed to gt_rhs")
    r, c, sn, rd, pd = split_state(spec, s)
    lead = tuple(s.shape[:-1])
    cb, snb = c.reshape(-1, spec.n_rot), sn.reshape(-1, spec.n_rot)
    qdb = torch.cat([rd, pd], -1).reshape(-1, spec.dof)
    ub, _ = _as_batch(u, spec.u_dim, s)
    if not torch.isfinite(ub).all():
        raise NonFiniteStateError("non-finite u passed to gt_rhs")
    ub = ub.expand(qdb.shape[0], -1)
    qdd = _accel(spec, _mechanics(spec, cb, snb), qdb, ub).reshape(*lead, spec.dof)
    nt = spec.n_trans
    return torch.cat([rd, -sn * pd, c * pd, qdd[..., :nt], qdd[..., nt:]], dim=-1)


def total_energy_q(spec: SystemSpec, q, qdot) -> torch.Tensor:
    q = _t(q)
    qdot = _t(qdot, q)
    M = mass_matrix_gt(spec, q)
    kin = 0.5 * torch.einsum("...i,...ij,...j->...", qdot, M, qdot)
    return kin + potential_gt(spec, q)


def total_energy_gt(spec: SystemSpec, s) -> torch.Tensor:
    """``E = 1/2 qdot' M qdot + V`` for a latent-form state."""
    q, qd = state_to_q(spec, s)
    return total_energy_q(spec, q, qd)
