"""Shared oracles for gradient checks."""
import math

import torch

from lagvae.distributions import _implicit_dxi_dkappa, vm_cdf
from lagvae.geometry import PlanarTransform, pixel_grid


def vm_inverse_cdf(u: torch.Tensor, kappa: torch.Tensor, iters: int = 64) -> torch.Tensor:
    """Zero-mean von Mises quantile by bisection (float64)."""
    lo = torch.full_like(u, -math.pi)
    hi = torch.full_like(u, math.pi)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        below = vm_cdf(mid, kappa) < u
        lo = torch.where(below, mid, lo)
        hi = torch.where(below, hi, mid)
    return 0.5 * (lo + hi)


def inverse_cdf_vm_sample(mu, kappa, generator=None):
    """vM draw with the uniform held fixed, ``xi = F^-1(U; kappa)``.

    Its derivative in ``kappa`` is exactly the implicit reparameterisation
    gradient, so finite differences taken with a reseeded generator are a
    valid oracle for gradients that flow through the sampler.
    """
    u = torch.rand(kappa.shape, generator=generator, dtype=torch.float64)
    k = kappa.detach().to(torch.float64)
    xi = vm_inverse_cdf(u, k)
    if kappa.requires_grad:
        slope = _implicit_dxi_dkappa(xi, k).to(kappa.dtype)
        xi = xi.to(kappa.dtype) + slope * (kappa - kappa.detach())
    else:
        xi = xi.to(kappa.dtype)
    c, s = torch.cos(xi), torch.sin(xi)
    mc, ms = mu[..., 0], mu[..., 1]
    return torch.stack([mc * c - ms * s, ms * c + mc * s], dim=-1)


def kink_free(shape, params, direction, h) -> bool:
    """No sample point of ``sample_image`` changes bilinear cell between ``params -+ h*direction``."""
    H, W = shape
    px, py = pixel_grid(H, W)
    cells = []
    for sign in (-1, 1):
        x, y, th = (params + sign * h * direction).tolist()
        sx, sy = PlanarTransform.from_angle(x, y, th).apply(px, py)
        cells.append((torch.floor((sx + 1) / 2 * (W - 1)), torch.floor((1 - sy) / 2 * (H - 1))))
    return all(torch.equal(a, b) for a, b in zip(*cells))


def rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-300)
