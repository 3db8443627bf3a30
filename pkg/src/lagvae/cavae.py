"""Coordinate-aware VAE, its black-box ablation and the velocity estimator.

Coordinates travel as a flat tensor ``z = (r, cos phi, sin phi)``, the same
layout as the first three latent state blocks.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from . import geometry
from .distributions import (
    GaussianParam,
    VonMisesParam,
    gauss_sample,
    normalize_direction,
    vm_sample,
)
from .systems import ROTATIONAL, SystemSpec

LOG_KAPPA_RANGE = (-6.0, 12.0)
LOG_VAR_RANGE = (-20.0, 6.0)


class EncoderOutputError(FloatingPointError):
    """An encoder head produced a non-finite value."""


def _soft_clamp(x: torch.Tensor, lo: float, hi: float) -> torch.Tensor:
    mid, half = (hi + lo) / 2, (hi - lo) / 2
    return mid + half * torch.tanh((x - mid) / half)


@dataclass
class CoordPosterior:
    """Posterior over all coordinates of one batch of images.

    ``gauss`` covers the translational coordinates, ``vm`` the rotational ones
    (either may be ``None``).  ``dir_norm`` holds the pre-normalisation length
    of every raw direction ``(alpha, beta)``.
    """

    spec: SystemSpec
    gauss: GaussianParam | None
    vm: VonMisesParam | None
    dir_norm: torch.Tensor | None

    def kl(self) -> torch.Tensor:
        total = 0.0
        if self.gauss is not None:
            total = total + self.gauss.kl().sum(-1)
        if self.vm is not None:
            total = total + self.vm.kl().sum(-1)
        return total

    def norm_penalty(self) -> torch.Tensor:
        if self.dir_norm is None:
            return torch.zeros(())
        return self.dir_norm.sum(-1)

    def mean(self) -> torch.Tensor:
        parts = []
        if self.gauss is not None:
            parts.append(self.gauss.mean)
        if self.vm is not None:
            parts += [self.vm.mu[..., 0], self.vm.mu[..., 1]]
        return torch.cat(parts, -1)

    def sample(self, generator: torch.Generator | None = None) -> torch.Tensor:
        return sample_coords(self, generator)

    def mean_angles(self) -> torch.Tensor:
        return torch.atan2(self.vm.mu[..., 1], self.vm.mu[..., 0])


def sample_coords(post: CoordPosterior, generator: torch.Generator | None = None) -> torch.Tensor:
    """Reparameterised draw of ``z``."""
    parts = []
    if post.gauss is not None:
        parts.append(gauss_sample(post.gauss.mean, post.gauss.log_var, generator))
    if post.vm is not None:
        cs = vm_sample(post.vm.mu, post.vm.kappa, generator)
        parts += [cs[..., 0], cs[..., 1]]
    return torch.cat(parts, -1)


def estimate_velocity(spec: SystemSpec, z0: torch.Tensor, z1: torch.Tensor, dt: float) -> torch.Tensor:
    """First-order velocity from two coordinate means, ``(rdot, phidot)``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    nt, nr = spec.n_trans, spec.n_rot
    r0, c0, s0 = z0[..., :nt], z0[..., nt : nt + nr], z0[..., nt + nr :]
    r1, c1, s1 = z1[..., :nt], z1[..., nt : nt + nr], z1[..., nt + nr :]
    rdot = (r1 - r0) / dt
    phidot = ((s1 - s0) * c0 - (c1 - c0) * s0) / dt
    return torch.cat([rdot, phidot], -1)


def coord_map(spec: SystemSpec, z: torch.Tensor) -> dict[int, torch.Tensor]:
    """Split ``z`` into the per-coordinate values used by frame rules."""
    nt, nr = spec.n_trans, spec.n_rot
    out = {}
    for j in range(spec.dof):
        if j < nt:
            out[j] = z[..., j]
        else:
            k = j - nt
            out[j] = torch.stack([z[..., nt + k], z[..., nt + nr + k]], -1)
    return out


def _mlp(sizes, act=nn.ReLU) -> nn.Sequential:
    layers = []
    for a, b in zip(sizes[:-2], sizes[1:-1]):
        layers += [nn.Linear(a, b), act()]
    layers.append(nn.Linear(sizes[-2], sizes[-1]))
    return nn.Sequential(*layers)


def _split_head(spec: SystemSpec, out: list[torch.Tensor]) -> CoordPosterior:
    """Turn stacked head outputs into a :class:`CoordPosterior`.

    ``out[j]`` is the raw output of coordinate ``j`` (2 or 3 values).
    """
    nt = spec.n_trans
    for o in out:
        if not torch.isfinite(o).all():
            raise EncoderOutputError("encoder produced non-finite distribution parameters")
    gauss = vm = norm = None
    if nt:
        g = torch.stack([out[j] for j in range(nt)], -2)
        gauss = GaussianParam(g[..., 0], _soft_clamp(g[..., 1], *LOG_VAR_RANGE))
    if spec.n_rot:
        v = torch.stack([out[j] for j in range(nt, spec.dof)], -2)
        mu, norm = normalize_direction(v[..., 0], v[..., 1])
        kappa = torch.exp(_soft_clamp(v[..., 2], *LOG_KAPPA_RANGE))
        vm = VonMisesParam(mu, kappa)
    return CoordPosterior(spec, gauss, vm, norm)


class CanvasGenerator(nn.Module):
    """Canonical image of one body from a constant input."""

    def __init__(self, H: int, W: int, hidden: int = 128):
        super().__init__()
        self.H, self.W = H, W
        self.net = nn.Sequential(nn.Linear(1, hidden), nn.Tanh(), nn.Linear(hidden, H * W))
        nn.init.constant_(self.net[-1].bias, -3.0)

    def forward(self) -> torch.Tensor:
        one = torch.ones(1, 1, dtype=self.net[0].weight.dtype)
        return torch.sigmoid(self.net(one)).reshape(self.H, self.W)


class CoordAwareVAE(nn.Module):
    """Per-coordinate attention-window encoder and placement decoder."""

    kind = "coordinate-aware"

    def __init__(self, spec: SystemSpec, H: int = 32, W: int = 32, hidden: int = 256, canvas_hidden: int = 128):
        super().__init__()
        self.spec, self.H, self.W = spec, H, W
        self.order = geometry.encoding_order(spec)
        self.heads = nn.ModuleList(
            _mlp((H * W, hidden, hidden, 3 if kind == ROTATIONAL else 2)) for kind in spec.coord_kinds
        )
        self.canvases = nn.ModuleList(CanvasGenerator(H, W, canvas_hidden) for _ in range(spec.n_bodies))
        # geometric constants (link lengths) in normalised image units, learned
        self.lengths = nn.Parameter(torch.full((len(spec.geom_constants),), 0.5))

    def constants(self) -> torch.Tensor:
        return self.lengths if self.lengths.numel() else torch.zeros(1, dtype=self.lengths.dtype)

    def encode(self, x: torch.Tensor) -> CoordPosterior:
        """``x`` has shape ``(..., n_bodies, H, W)``."""
        spec, c = self.spec, self.constants()
        means: dict[int, torch.Tensor] = {}
        raw: dict[int, torch.Tensor] = {}
        for j in self.order:
            body = spec.body_of_coord[j]
            tf = geometry.enc_frame(spec, j, means, c)
            window = geometry.sample_image(x[..., body, :, :], tf)
            out = self.heads[j](window.flatten(-2))
            raw[j] = out
            if spec.coord_kinds[j] == ROTATIONAL:
                mu, _ = normalize_direction(out[..., 0], out[..., 1])
                means[j] = mu
            else:
                means[j] = out[..., 0]
        return _split_head(spec, [raw[j] for j in range(spec.dof)])

    def canvas_images(self) -> torch.Tensor:
        return torch.stack([g() for g in self.canvases])

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        """Place every body canvas; returns ``(..., n_bodies, H, W)``."""
        spec, c = self.spec, self.constants()
        q = coord_map(spec, z)
        canv = self.canvas_images().to(z.dtype)
        out = []
        for i in range(spec.n_bodies):
            tf = geometry.dec_frame(spec, i, q, c).inverse()
            out.append(geometry.sample_image(canv[i], tf))
        return torch.stack(out, -3)


class TraditionalVAE(nn.Module):
    """Black-box MLP encoder/decoder with the same posterior contract."""

    kind = "traditional"

    def __init__(self, spec: SystemSpec, H: int = 32, W: int = 32, hidden: int = 256):
        super().__init__()
        self.spec, self.H, self.W = spec, H, W
        n_in = spec.n_bodies * H * W
        self.n_params = [3 if k == ROTATIONAL else 2 for k in spec.coord_kinds]
        self.encoder = _mlp((n_in, hidden, hidden, sum(self.n_params)))
        nz = spec.n_trans + 2 * spec.n_rot
        self.decoder = _mlp((nz, hidden, hidden, n_in))

    def encode(self, x: torch.Tensor) -> CoordPosterior:
        out = self.encoder(x.flatten(-3))
        return _split_head(self.spec, list(torch.split(out, self.n_params, -1)))

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        img = torch.sigmoid(self.decoder(z))
        return img.reshape(*z.shape[:-1], self.spec.n_bodies, self.H, self.W)


def black_box_encode(model: TraditionalVAE, x: torch.Tensor) -> CoordPosterior:
    return model.encode(x)


def black_box_decode(model: TraditionalVAE, z: torch.Tensor) -> torch.Tensor:
    return model.decode(z)


def encode(model, x: torch.Tensor) -> CoordPosterior:
    return model.encode(x)


def decode(model, z: torch.Tensor) -> torch.Tensor:
    return model.decode(z)


def make_vae(spec: SystemSpec, kind: str = "coordinate-aware", H: int = 32, W: int = 32) -> nn.Module:
    if kind == "coordinate-aware":
        return CoordAwareVAE(spec, H, W)
    if kind == "traditional":
        return TraditionalVAE(spec, H, W)
    raise ValueError(f"unknown vae {kind!r}; expected 'coordinate-aware' or 'traditional'")


def build_initial_state(
    model, x0: torch.Tensor, x1: torch.Tensor, dt: float, generator: torch.Generator | None = None
) -> tuple[torch.Tensor, CoordPosterior, CoordPosterior]:
    """``s0`` from a sampled position and a mean-based velocity estimate.

    Returns ``(s0, posterior of x0, posterior of x1)``.
    """
    p0, p1 = model.encode(x0), model.encode(x1)
    z0 = p0.sample(generator)
    vel = estimate_velocity(model.spec, p0.mean(), p1.mean(), dt)
    return torch.cat([z0, vel], -1), p0, p1


def initial_state_from_means(model, x0: torch.Tensor, x1: torch.Tensor, dt: float) -> torch.Tensor:
    p0, p1 = model.encode(x0), model.encode(x1)
    m0 = p0.mean()
    return torch.cat([m0, estimate_velocity(model.spec, m0, p1.mean(), dt)], -1)
