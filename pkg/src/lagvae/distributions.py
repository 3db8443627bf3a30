"""Latent distributions: Gaussian for translations, von Mises for angles.

The von Mises sampler draws with the Best-Fisher rejection scheme (wrapped
Cauchy proposal) in float64.  The accepted angle is made differentiable in the
concentration with the implicit reparameterisation gradient
``d(xi)/d(kappa) = -(dF/dkappa) / p(xi)`` where ``F`` is the CDF, evaluated by
Hill's series for small ``kappa`` and his corrected normal approximation
otherwise.  Rotating the standardised sample by the mean direction carries the
gradient to ``mu``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch

SERIES_CUTOFF = 15.0
_SERIES_TERMS = 60
_ASYMPTOTIC_TERMS = 30
_CDF_SERIES_CUTOFF = 10.5
_CDF_SERIES_TERMS = 40


class DegenerateDirectionError(ValueError):
    """Raised when a von Mises direction vector has zero length."""


def _as_tensor(x) -> torch.Tensor:
    return x if torch.is_tensor(x) else torch.as_tensor(x, dtype=torch.float64)


def _check_kappa(kappa: torch.Tensor) -> None:
    with torch.no_grad():
        if (kappa < 0).any() or torch.isnan(kappa).any():
            raise ValueError("von Mises concentration must be >= 0")


def _asymptotic_coeffs(nu: int, n: int) -> list[float]:
    coeffs, c = [1.0], 1.0
    for k in range(1, n):
        c *= -(4 * nu * nu - (2 * k - 1) ** 2) / (k * 8.0)
        coeffs.append(c)
    return coeffs


_A0 = _asymptotic_coeffs(0, _ASYMPTOTIC_TERMS)
_A1 = _asymptotic_coeffs(1, _ASYMPTOTIC_TERMS)


def bessel_ratio_and_log_i0(kappa) -> tuple[torch.Tensor, torch.Tensor]:
    """Return ``(I1(k)/I0(k), log I0(k))``, differentiable in ``k``.

    Power series below ``SERIES_CUTOFF``, Hankel asymptotic expansion above.
    """
    kappa = _as_tensor(kappa)
    _check_kappa(kappa)
    small = kappa < SERIES_CUTOFF
    ks = torch.where(small, kappa, torch.zeros_like(kappa))
    kl = torch.where(small, torch.full_like(kappa, SERIES_CUTOFF), kappa)

    # series: t_k = (k^2/4)^k / (k!)^2
    q = 0.25 * ks * ks
    term = torch.ones_like(ks)
    s0 = torch.ones_like(ks)
    s1 = torch.ones_like(ks)  # sum of t_k / (k+1)
    for k in range(1, _SERIES_TERMS):
        term = term * q / (k * k)
        s0 = s0 + term
        s1 = s1 + term / (k + 1)
    ratio_s = 0.5 * ks * s1 / s0
    log_i0_s = torch.log(s0)

    inv = 1.0 / kl
    p0 = torch.zeros_like(kl)
    p1 = torch.zeros_like(kl)
    for c0, c1 in zip(reversed(_A0), reversed(_A1)):
        p0 = p0 * inv + c0
        p1 = p1 * inv + c1
    ratio_l = p1 / p0
    log_i0_l = kl - 0.5 * torch.log(2 * math.pi * kl) + torch.log(p0)

    return torch.where(small, ratio_s, ratio_l), torch.where(small, log_i0_s, log_i0_l)


def vm_kl_to_uniform(kappa) -> torch.Tensor:
    """``KL(vM(mu, kappa) || U(S^1)) = kappa * I1/I0 - log I0``."""
    ratio, log_i0 = bessel_ratio_and_log_i0(kappa)
    return _as_tensor(kappa) * ratio - log_i0


def vm_log_density(theta, kappa) -> torch.Tensor:
    """Log density of a zero-mean von Mises at angle ``theta``."""
    _, log_i0 = bessel_ratio_and_log_i0(kappa)
    return _as_tensor(kappa) * torch.cos(_as_tensor(theta)) - math.log(2 * math.pi) - log_i0


def gauss_kl_to_std_normal(mean, log_var) -> torch.Tensor:
    mean, log_var = _as_tensor(mean), _as_tensor(log_var)
    # expm1 keeps the result non-negative when log_var is tiny
    return 0.5 * (torch.expm1(log_var) - log_var + mean * mean)


def normalize_direction(alpha, beta) -> tuple[torch.Tensor, torch.Tensor]:
    """Map a raw direction ``(alpha, beta)`` to a unit vector and its norm."""
    alpha, beta = _as_tensor(alpha), _as_tensor(beta)
    norm = torch.sqrt(alpha * alpha + beta * beta)
    if (norm == 0).any():
        raise DegenerateDirectionError("von Mises direction (alpha, beta) is the zero vector")
    return torch.stack([alpha / norm, beta / norm], dim=-1), norm


@dataclass
class GaussianParam:
    mean: torch.Tensor
    log_var: torch.Tensor

    def __post_init__(self):
        self.mean, self.log_var = _as_tensor(self.mean), _as_tensor(self.log_var)
        if not (torch.isfinite(self.mean).all() and torch.isfinite(self.log_var).all()):
            raise ValueError("Gaussian parameters must be finite")

    def kl(self) -> torch.Tensor:
        return gauss_kl_to_std_normal(self.mean, self.log_var)

    def sample(self, generator: torch.Generator | None = None) -> torch.Tensor:
        return gauss_sample(self.mean, self.log_var, generator)


@dataclass
class VonMisesParam:
    mu: torch.Tensor  # (..., 2) unit vectors (cos, sin)
    kappa: torch.Tensor

    def __post_init__(self):
        self.mu, self.kappa = _as_tensor(self.mu), _as_tensor(self.kappa)
        _check_kappa(self.kappa)
        if not torch.isfinite(self.kappa).all():
            raise ValueError("concentration must be finite")
        tol = 1e-9 if self.mu.dtype == torch.float64 else 1e-5
        with torch.no_grad():
            if ((self.mu.norm(dim=-1) - 1).abs() > tol).any():
                raise ValueError("von Mises mean direction must be a unit vector")

    def kl(self) -> torch.Tensor:
        return vm_kl_to_uniform(self.kappa)

    def sample(self, generator: torch.Generator | None = None) -> torch.Tensor:
        return vm_sample(self.mu, self.kappa, generator)


def gauss_sample(mean, log_var, generator: torch.Generator | None = None) -> torch.Tensor:
    mean, log_var = _as_tensor(mean), _as_tensor(log_var)
    eps = torch.randn(mean.shape, generator=generator, dtype=torch.float64).to(mean.dtype)
    return mean + torch.exp(0.5 * log_var) * eps


# ---------------------------------------------------------------------------
# von Mises sampling


def _best_fisher(kappa: torch.Tensor, generator, max_iter: int = 100) -> torch.Tensor:
    """Standardised (zero-mean) von Mises angles, float64, no gradient."""
    k = kappa.detach().to(torch.float64)
    shape = k.shape
    uniform = k < 1e-12
    kk = torch.where(uniform, torch.ones_like(k), k)
    r = 1.0 + torch.sqrt(1.0 + 4.0 * kk * kk)
    rho = (r - torch.sqrt(2.0 * r)) / (2.0 * kk)
    s = torch.where(kk > 1.2e-4, (1.0 + rho * rho) / (2.0 * rho), 1.0 / kk)

    done = uniform.clone()
    u_keep = torch.rand(shape, generator=generator, dtype=torch.float64) * 2 - 1
    w_keep = torch.ones(shape, dtype=torch.float64)
    for _ in range(max_iter):
        if bool(done.all()):
            break
        u = torch.rand(shape, generator=generator, dtype=torch.float64) * 2 - 1
        v = torch.rand(shape, generator=generator, dtype=torch.float64)
        z = torch.cos(math.pi * u)
        w = (1.0 + s * z) / (s + z)
        y = kk * (s - w)
        accept = (y * (2.0 - y) >= v) | (torch.log(y / v) + 1.0 >= y)
        new = accept & ~done
        u_keep = torch.where(new, u, u_keep)
        w_keep = torch.where(new, w, w_keep)
        done = done | accept
    xi = torch.sign(u_keep) * torch.acos(w_keep.clamp(-1.0, 1.0))
    # kappa == 0: uniform on the circle
    return torch.where(uniform, math.pi * u_keep, xi)


def _cdf_series(x: torch.Tensor, kappa: torch.Tensor) -> torch.Tensor:
    rn = torch.zeros_like(x)
    vn = torch.zeros_like(x)
    for n in range(_CDF_SERIES_TERMS, 0, -1):
        rn = kappa / (2.0 * n + kappa * rn)
        vn = rn * (torch.sin(n * x) / n + vn)
    return 0.5 + x / (2 * math.pi) + vn / math.pi


def _cdf_normal(x: torch.Tensor, kappa: torch.Tensor) -> torch.Tensor:
    _, log_i0 = bessel_ratio_and_log_i0(kappa)
    i0e = torch.exp(log_i0 - kappa)
    z = math.sqrt(2.0 / math.pi) / i0e * torch.sin(0.5 * x)
    z2 = z * z
    c = 24.0 * kappa
    xi = z - z2 * z / ((c - 2.0 * z2 - 16.0) / 3.0 - (z2 * z2 + 1.75 * z2 + 83.5) / (c - 56.0 - z2 + 3.0)) ** 2
    return torch.special.ndtr(xi)


def vm_cdf(x, kappa) -> torch.Tensor:
    """CDF of the zero-mean von Mises on [-pi, pi]."""
    x, kappa = torch.broadcast_tensors(_as_tensor(x), _as_tensor(kappa))
    series = kappa < _CDF_SERIES_CUTOFF
    ks = torch.where(series, kappa, torch.zeros_like(kappa))
    kn = torch.where(series, torch.full_like(kappa, _CDF_SERIES_CUTOFF), kappa)
    return torch.where(series, _cdf_series(x, ks), _cdf_normal(x, kn)).clamp(0.0, 1.0)


def _implicit_dxi_dkappa(xi: torch.Tensor, kappa: torch.Tensor) -> torch.Tensor:
    with torch.enable_grad():
        k = kappa.detach().to(torch.float64).requires_grad_(True)
        cdf = vm_cdf(xi, k)
        (dcdf,) = torch.autograd.grad(cdf.sum(), k)
    with torch.no_grad():
        log_p = vm_log_density(xi, k.detach())
        return -dcdf * torch.exp(-log_p)


def vm_standard_sample(kappa, generator: torch.Generator | None = None) -> torch.Tensor:
    """Zero-mean von Mises angles with a pathwise gradient in ``kappa``."""
    kappa = _as_tensor(kappa)
    _check_kappa(kappa)
    xi = _best_fisher(kappa, generator)
    if not kappa.requires_grad:
        return xi.to(kappa.dtype)
    slope = _implicit_dxi_dkappa(xi, kappa).to(kappa.dtype)
    # value equals xi; first derivative equals the implicit gradient
    return xi.to(kappa.dtype) + slope * (kappa - kappa.detach())


def vm_sample(mu, kappa, generator: torch.Generator | None = None) -> torch.Tensor:
    """Draw ``(cos theta, sin theta)`` from vM(mu, kappa).

    ``mu`` has shape ``(..., 2)`` (unit vectors) and ``kappa`` shape ``(...)``.
    """
    mu, kappa = _as_tensor(mu), _as_tensor(kappa)
    xi = vm_standard_sample(kappa, generator)
    c, s = torch.cos(xi), torch.sin(xi)
    mc, ms = mu[..., 0], mu[..., 1]
    return torch.stack([mc * c - ms * s, ms * c + mc * s], dim=-1)
