"""Rendering, trajectory generation, windowing, batching and file I/O.

Images are rendered procedurally, one channel per rigid body, with a
one-pixel anti-aliasing ramp on signed distance fields.  Shapes are expressed
in the normalised image frame of :mod:`lagvae.geometry` (``y`` up).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import integrators
from .systems import ROTATIONAL, SystemSpec, gt_q_field, make_system

FORMAT_VERSION = 1
# RK4 steps per recorded frame; fast acrobot swings need the finer step
DEFAULT_SUBSTEPS = 20
DEFAULT_CONTROLS = (-2.0, -1.0, 0.0, 1.0, 2.0)


class DatasetFormatError(ValueError):
    """Malformed or inconsistent dataset directory."""


# ---------------------------------------------------------------------------
# rendering


@dataclass(frozen=True)
class RenderStyle:
    """Drawing sizes in normalised units (1.0 = half the image width)."""

    pole_radius: float = 0.08
    cart_half_height: float = 0.1
    pole_draw_scale: float = 1.0  # drawn pole length / physical length


STYLES = {
    "pendulum": RenderStyle(pole_radius=0.09),
    "cartpole": RenderStyle(pole_radius=0.06, cart_half_height=0.1, pole_draw_scale=2.0),
    "acrobot": RenderStyle(pole_radius=0.07),
}


def _capsule(px, py, ax, ay, bx, by, radius):
    dx, dy = bx - ax, by - ay
    L2 = np.maximum(dx * dx + dy * dy, 1e-12)
    t = np.clip(((px - ax) * dx + (py - ay) * dy) / L2, 0.0, 1.0)
    ex, ey = px - (ax + t * dx), py - (ay + t * dy)
    return np.sqrt(ex * ex + ey * ey) - radius


def _box(px, py, cx, cy, hx, hy):
    qx, qy = np.abs(px - cx) - hx, np.abs(py - cy) - hy
    outside = np.sqrt(np.maximum(qx, 0) ** 2 + np.maximum(qy, 0) ** 2)
    return outside + np.minimum(np.maximum(qx, qy), 0.0)


def body_primitives(spec: SystemSpec, q: np.ndarray) -> list[tuple]:
    """Shape parameters of every body for configurations ``q`` of shape (N, m).

    Returns one tuple per body: ``("capsule", ax, ay, bx, by, radius)`` or
    ``("box", cx, cy, hx, hy)`` with arrays of shape (N,).
    """
    st = STYLES[spec.name]
    e = spec.extent
    q = np.asarray(q, dtype=np.float64)
    if spec.name == "pendulum":
        L = spec.phys.lengths[0] / e * st.pole_draw_scale
        phi = q[:, 0]
        z = np.zeros_like(phi)
        return [("capsule", z, z, L * np.sin(phi), L * np.cos(phi), st.pole_radius)]
    if spec.name == "cartpole":
        r, phi = q[:, 0] / e, q[:, 1]
        hx = 0.5 * spec.phys.lengths[0] / e
        L = spec.phys.lengths[1] / e * st.pole_draw_scale
        z = np.zeros_like(r)
        return [
            ("box", r, z, hx, st.cart_half_height),
            ("capsule", r, z, r + L * np.sin(phi), L * np.cos(phi), st.pole_radius),
        ]
    l1, l2 = (l / e for l in spec.phys.lengths)
    p1, p2 = q[:, 0], q[:, 1]
    z = np.zeros_like(p1)
    ex, ey = l1 * np.sin(p1), l1 * np.cos(p1)
    return [
        ("capsule", z, z, ex, ey, st.pole_radius),
        ("capsule", ex, ey, ex + l2 * np.sin(p2), ey + l2 * np.cos(p2), st.pole_radius),
    ]


def body_centers(spec: SystemSpec, q) -> np.ndarray:
    """Analytic centre of each drawn body, shape (N, n_bodies, 2)."""
    out = []
    for prim in body_primitives(spec, np.atleast_2d(q)):
        if prim[0] == "capsule":
            out.append(np.stack([(prim[1] + prim[3]) / 2, (prim[2] + prim[4]) / 2], -1))
        else:
            out.append(np.stack([prim[1], prim[2]], -1))
    return np.stack(out, 1)


def render(spec: SystemSpec, q, H: int = 32, W: int = 32) -> np.ndarray:
    """Render configurations to per-body channels.

    ``q`` of shape (m,) gives (n_bodies, H, W); shape (N, m) gives
    (N, n_bodies, H, W).  Output is float32 in [0, 1].
    """
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    q2 = q.reshape(-1, spec.dof)
    xs = np.linspace(-1.0, 1.0, W)
    ys = np.linspace(1.0, -1.0, H)
    py, px = np.meshgrid(ys, xs, indexing="ij")
    px, py = px[None], py[None]
    pitch = 2.0 / (min(H, W) - 1)
    chans = []
    for prim in body_primitives(spec, q2):
        args = [a[:, None, None] if isinstance(a, np.ndarray) else a for a in prim[1:]]
        d = _capsule(px, py, *args) if prim[0] == "capsule" else _box(px, py, *args)
        chans.append(np.clip(0.5 - d / pitch, 0.0, 1.0))
    img = np.stack(chans, 1).astype(np.float32)
    return img[0] if single else img


# ---------------------------------------------------------------------------
# generation


@dataclass
class DatasetManifest:
    system: dict
    n_ic: int
    controls: list[float]
    dt: float
    T: int
    H: int
    W: int
    n_bodies: int
    u_dim: int
    seed: int
    el_form: str
    n_records: int
    has_gt_states: bool = True
    substeps: int = 1
    ic_distribution: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION
    layout: dict = field(
        default_factory=lambda: {
            "images.f32": "little-endian float32 [record][time][body][row][col]",
            "controls.f32": "little-endian float32 [record][u_dim]",
            "gt_states.f32": "little-endian float32 [record][time][q..., qdot...]",
        }
    )

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        missing = {f for f in cls.__dataclass_fields__} - set(d)
        if missing:
            raise DatasetFormatError(f"manifest missing fields: {sorted(missing)}")
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise DatasetFormatError(f"manifest has unknown fields: {sorted(unknown)}")
        return cls(**d)

    @property
    def spec(self) -> SystemSpec:
        return SystemSpec.from_dict(self.system)


@dataclass
class Dataset:
    manifest: DatasetManifest
    images: np.ndarray  # (N, T+1, n_bodies, H, W) float32
    controls: np.ndarray  # (N, u_dim) float32
    gt_states: np.ndarray | None = None  # (N, T+1, 2m) float32, evaluation only

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def spec(self) -> SystemSpec:
        return self.manifest.spec

    def record(self, i: int) -> "TrajectoryRecord":
        gt = None if self.gt_states is None else self.gt_states[i]
        return TrajectoryRecord(self.images[i], self.controls[i], gt)


@dataclass
class TrajectoryRecord:
    images: np.ndarray  # (T+1, n_bodies, H, W)
    u_const: np.ndarray
    gt_states: np.ndarray | None = None


def control_grid(u_dim: int, values=DEFAULT_CONTROLS) -> np.ndarray:
    """Zero control once, then every nonzero value on each axis separately."""
    rows = [np.zeros(u_dim)]
    for d in range(u_dim):
        for v in values:
            if v != 0.0:
                u = np.zeros(u_dim)
                u[d] = v
                rows.append(u)
    return np.array(rows)


def sample_initial_conditions(spec: SystemSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    """Angles uniform on the circle, angular rates U[-1, 1]; cart r, rdot U[-0.5, 0.5]."""
    y = np.zeros((n, 2 * spec.dof))
    for j, kind in enumerate(spec.coord_kinds):
        if kind == ROTATIONAL:
            y[:, j] = rng.uniform(-math.pi, math.pi, n)
            y[:, spec.dof + j] = rng.uniform(-1.0, 1.0, n)
        else:
            y[:, j] = rng.uniform(-0.5, 0.5, n)
            y[:, spec.dof + j] = rng.uniform(-0.5, 0.5, n)
    return y


def simulate(spec: SystemSpec, y0: np.ndarray, u: np.ndarray, dt: float, T: int, substeps: int = 1) -> np.ndarray:
    """RK4 ground truth in q-form; returns (N, T+1, 2m) float64.

    Each recorded frame interval ``dt`` is covered by ``substeps`` RK4 steps.
    """
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    f = gt_q_field(spec)
    ro = integrators.rollout(
        f,
        torch.as_tensor(y0, dtype=torch.float64),
        torch.as_tensor(u, dtype=torch.float64),
        dt / substeps,
        T * substeps,
        "rk4",
    )
    return ro.states[::substeps].transpose(0, 1).numpy()


def generate_dataset(
    spec: SystemSpec,
    n_ic: int = 256,
    controls=DEFAULT_CONTROLS,
    T: int = 20,
    dt: float = 0.05,
    seed: int = 0,
    H: int = 32,
    W: int = 32,
    substeps: int = DEFAULT_SUBSTEPS,
) -> Dataset:
    if not dt > 0:
        raise ValueError("dt must be positive")
    rng = np.random.default_rng(seed)
    ics = sample_initial_conditions(spec, n_ic, rng)
    grid = control_grid(spec.u_dim, controls)
    y0 = np.repeat(ics, len(grid), axis=0)
    u = np.tile(grid, (n_ic, 1))
    with torch.no_grad():
        states = simulate(spec, y0, u, dt, T, substeps)
    m = spec.dof
    q = states[..., :m].reshape(-1, m)
    images = render(spec, q, H, W).reshape(len(y0), T + 1, spec.n_bodies, H, W)
    manifest = DatasetManifest(
        system=json.loads(spec.to_json()),
        n_ic=n_ic,
        controls=[float(c) for c in controls],
        dt=float(dt),
        T=int(T),
        H=int(H),
        W=int(W),
        n_bodies=spec.n_bodies,
        u_dim=spec.u_dim,
        seed=int(seed),
        el_form=spec.el_form,
        n_records=len(y0),
        substeps=int(substeps),
        ic_distribution={
            "rotational": "angle U(-pi, pi), rate U(-1, 1)",
            "translational": "position U(-0.5, 0.5), rate U(-0.5, 0.5)",
        },
    )
    return Dataset(manifest, images, u.astype(np.float32), states.astype(np.float32))


# ---------------------------------------------------------------------------
# windows and batches


@dataclass
class WindowSet:
    """Sub-sequences of length ``T_pred + 1`` referencing a dataset's arrays."""

    images: np.ndarray
    controls: np.ndarray
    index: np.ndarray  # (K, 2): record, start frame
    T_pred: int

    def __len__(self) -> int:
        return self.index.shape[0]

    def window(self, k: int) -> np.ndarray:
        rec, start = self.index[k]
        return self.images[rec, start : start + self.T_pred + 1]

    def control_groups(self) -> dict[tuple, np.ndarray]:
        keys = [tuple(np.round(self.controls[r], 6)) for r in self.index[:, 0]]
        groups: dict[tuple, list[int]] = {}
        for k, key in enumerate(keys):
            groups.setdefault(key, []).append(k)
        return {key: np.array(v) for key, v in sorted(groups.items())}


@dataclass
class TrajectoryBatch:
    images: torch.Tensor  # (B, T_pred+1, n_bodies, H, W)
    u: torch.Tensor  # (B, u_dim)
    window_ids: np.ndarray


def reorganize(data: Dataset, T_pred: int, records=None) -> WindowSet:
    """Cut every trajectory into ``T - T_pred`` overlapping windows."""
    T = data.images.shape[1] - 1
    if not 1 <= T_pred < T:
        raise ValueError(f"T_pred must satisfy 1 <= T_pred < T={T}")
    recs = np.arange(len(data)) if records is None else np.asarray(records)
    starts = np.arange(T - T_pred)
    index = np.stack(np.meshgrid(recs, starts, indexing="ij"), -1).reshape(-1, 2)
    return WindowSet(data.images, data.controls, index, T_pred)


def sample_batch(
    windows: WindowSet,
    size: int,
    mode: str = "standard",
    rng: np.random.Generator | None = None,
    zero_weight: float = 0.5,
    dtype=torch.float32,
) -> TrajectoryBatch:
    """Draw a batch of windows, always with replacement.

    ``standard`` samples uniformly over all windows.  ``homogeneous`` first
    picks one control value (the zero control with probability
    ``zero_weight``, otherwise uniformly among the rest) and samples only
    windows recorded under it.
    """
    if len(windows) == 0:
        raise ValueError("no windows to sample from")
    rng = rng or np.random.default_rng()
    if mode == "standard":
        ids = rng.integers(0, len(windows), size)
    elif mode == "homogeneous":
        groups = windows.control_groups()
        keys = list(groups)
        zero = tuple(0.0 for _ in keys[0])
        others = [k for k in keys if k != zero]
        if zero in groups and (not others or rng.random() < zero_weight):
            key = zero
        else:
            key = others[rng.integers(0, len(others))]
        members = groups[key]
        ids = members[rng.integers(0, len(members), size)]
    else:
        raise ValueError(f"unknown batching mode {mode!r}")
    idx = windows.index[ids]
    L = windows.T_pred + 1
    frames = idx[:, 1:2] + np.arange(L)[None]
    imgs = windows.images[idx[:, :1], frames]
    return TrajectoryBatch(
        torch.as_tensor(imgs, dtype=dtype),
        torch.as_tensor(windows.controls[idx[:, 0]], dtype=dtype),
        ids,
    )


# ---------------------------------------------------------------------------
# on-disk format


def write_dataset(path, data: Dataset) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
        (path / "manifest.json").write_text(json.dumps(data.manifest.to_dict(), indent=2, sort_keys=True))
        np.ascontiguousarray(data.images, dtype="<f4").tofile(path / "images.f32")
        np.ascontiguousarray(data.controls, dtype="<f4").tofile(path / "controls.f32")
        gt = path / "gt_states.f32"
        if data.gt_states is not None:
            np.ascontiguousarray(data.gt_states, dtype="<f4").tofile(gt)
        elif gt.exists():
            gt.unlink()
    except OSError as exc:
        raise OSError(f"failed writing dataset to {path}: {exc}") from exc
    return path


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        d = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError:
        raise DatasetFormatError(f"{path}: no manifest.json") from None
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{path}/manifest.json: {exc}") from None
    if d.get("format_version") != FORMAT_VERSION:
        raise DatasetFormatError(
            f"{path}: format_version {d.get('format_version')} unsupported (expected {FORMAT_VERSION})"
        )
    return DatasetManifest.from_dict(d)


def _read_f32(file: Path, shape: tuple[int, ...]) -> np.ndarray:
    expected = int(np.prod(shape)) * 4
    try:
        actual = file.stat().st_size
    except FileNotFoundError:
        raise DatasetFormatError(f"{file}: missing payload file") from None
    if actual != expected:
        raise DatasetFormatError(f"{file.name}: expected {expected} bytes, found {actual}")
    return np.fromfile(file, dtype="<f4").astype(np.float32).reshape(shape)


def read_dataset(path, manifest_only: bool = False) -> Dataset | DatasetManifest:
    path = Path(path)
    man = read_manifest(path)
    if manifest_only:
        return man
    N, T1 = man.n_records, man.T + 1
    images = _read_f32(path / "images.f32", (N, T1, man.n_bodies, man.H, man.W))
    controls = _read_f32(path / "controls.f32", (N, man.u_dim))
    gt = None
    if man.has_gt_states and (path / "gt_states.f32").exists():
        gt = _read_f32(path / "gt_states.f32", (N, T1, 2 * len(man.system["coord_kinds"])))
    return Dataset(man, images, controls, gt)


def make_dataset(system: str, **kwargs) -> Dataset:
    """Shorthand: default system constants plus :func:`generate_dataset`."""
    el_form = kwargs.pop("el_form", "full")
    return generate_dataset(make_system(system, el_form=el_form), **kwargs)
