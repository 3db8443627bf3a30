"""Planar rigid transforms, differentiable image resampling and frame maps.

Normalised image coordinates span ``[-1, 1]`` on both axes with ``x`` to the
right and ``y`` *up*: column ``j`` sits at ``x = -1 + 2 j / (W - 1)`` and row
``i`` at ``y = 1 - 2 i / (H - 1)``.  A transform ``T(x, y, theta)`` maps a point
of the default frame to ``R p + (x, y)`` with ``R = [[c, s], [-s, c]]``, so a
body drawn pointing up in a canonical canvas appears rotated clockwise by
``theta`` after placement.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import torch
import torch.nn.functional as F

from .systems import ROTATIONAL, SystemSpec


class FrameOrderError(ValueError):
    """A frame rule was evaluated before the coordinates it depends on."""


def _t(v, like: torch.Tensor | None = None) -> torch.Tensor:
    if torch.is_tensor(v):
        return v
    return torch.as_tensor(v, dtype=like.dtype if like is not None else torch.float64)


@dataclass
class PlanarTransform:
    """Translation ``(x, y)`` and rotation stored as ``(cos, sin)``.

    Fields broadcast against each other, so one object can describe a batch.
    """

    x: torch.Tensor
    y: torch.Tensor
    cos: torch.Tensor
    sin: torch.Tensor

    @classmethod
    def from_angle(cls, x, y, theta) -> "PlanarTransform":
        x = _t(x)
        y, theta = _t(y, x), _t(theta, x)
        return cls(x, y, torch.cos(theta), torch.sin(theta))

    @classmethod
    def identity(cls, dtype=torch.float64) -> "PlanarTransform":
        z = torch.zeros((), dtype=dtype)
        return cls(z, z, z + 1, z)

    @property
    def theta(self) -> torch.Tensor:
        return torch.atan2(self.sin, self.cos)

    def matrix(self) -> torch.Tensor:
        x, y, c, s = torch.broadcast_tensors(self.x, self.y, self.cos, self.sin)
        zero, one = torch.zeros_like(x), torch.ones_like(x)
        return torch.stack(
            [torch.stack([c, s, x], -1), torch.stack([-s, c, y], -1), torch.stack([zero, zero, one], -1)],
            -2,
        )

    def inverse(self) -> "PlanarTransform":
        c, s = self.cos, self.sin
        return PlanarTransform(-(c * self.x - s * self.y), -(s * self.x + c * self.y), c, -s)

    def apply(self, px, py) -> tuple[torch.Tensor, torch.Tensor]:
        return self.cos * px + self.sin * py + self.x, -self.sin * px + self.cos * py + self.y

    def as_tuple(self) -> tuple[float, float, float]:
        return float(self.x), float(self.y), float(self.theta)


def make_transform(x, y, theta) -> torch.Tensor:
    """3x3 homogeneous matrix of a translation by ``(x, y)`` and rotation ``theta``."""
    return PlanarTransform.from_angle(x, y, theta).matrix()


def invert_transform(x, y, theta) -> torch.Tensor:
    """Closed-form inverse of :func:`make_transform`."""
    return PlanarTransform.from_angle(x, y, theta).inverse().matrix()


def pixel_grid(H: int, W: int, dtype=torch.float64) -> tuple[torch.Tensor, torch.Tensor]:
    """Normalised ``(x, y)`` coordinates of every pixel, each of shape (H, W)."""
    xs = torch.linspace(-1.0, 1.0, W, dtype=dtype)
    ys = torch.linspace(1.0, -1.0, H, dtype=dtype)
    py, px = torch.meshgrid(ys, xs, indexing="ij")
    return px, py


def sample_image(img: torch.Tensor, tf: PlanarTransform) -> torch.Tensor:
    """Resample ``img`` so output pixel ``p`` reads ``img`` at ``T p``.

    ``img`` has shape ``(..., H, W)``; transform fields broadcast against the
    leading dimensions.  Bilinear interpolation, zeros outside the grid.
    """
    H, W = img.shape[-2:]
    if H < 2 or W < 2:
        raise ValueError("images must be at least 2x2")
    px, py = pixel_grid(H, W, img.dtype)
    x, y, c, s = (_t(v, img).to(img.dtype)[..., None, None] for v in (tf.x, tf.y, tf.cos, tf.sin))
    sx = c * px + s * py + x
    sy = -s * px + c * py + y
    # grid_sample's y axis points down
    grid = torch.stack(torch.broadcast_tensors(sx, -sy), dim=-1)
    lead = torch.broadcast_shapes(img.shape[:-2], grid.shape[:-3])
    img = img.expand(*lead, H, W)
    grid = grid.expand(*lead, H, W, 2)
    out = F.grid_sample(
        img.reshape(-1, 1, H, W),
        grid.reshape(-1, H, W, 2),
        mode="bilinear",
        padding_mode="zeros",
        align_corners=True,
    )
    return out.reshape(*lead, H, W)


# ---------------------------------------------------------------------------
# frame maps
#
# Coordinate values handed to frame rules are tensors: shape (...) for a
# translational coordinate, (..., 2) holding (cos, sin) for a rotational one.
# Constants ``c`` are lengths in normalised image units.


Rule = Callable[[Mapping[int, torch.Tensor], torch.Tensor], PlanarTransform]


@dataclass(frozen=True)
class FrameRule:
    depends: tuple[int, ...]
    fn: Rule


def _zero_frame(q, c) -> PlanarTransform:
    z = torch.zeros((), dtype=c.dtype)
    return PlanarTransform(z, z, z + 1, z)


def _shift(x: torch.Tensor, y: torch.Tensor) -> PlanarTransform:
    return PlanarTransform(x, y, torch.ones_like(x), torch.zeros_like(x))


def _link_end(phi: torch.Tensor, c) -> tuple[torch.Tensor, torch.Tensor]:
    # end of a link of length c[0] pivoted at the origin, phi given as (cos, sin)
    return c[0] * phi[..., 1], c[0] * phi[..., 0]


def _cart_window(q, c):
    return _shift(q[0], torch.zeros_like(q[0]))


def _second_link_window(q, c):
    return _shift(*_link_end(q[0], c))


def _rotate_at_origin(q, c):
    z = torch.zeros_like(q[0][..., 0])
    return PlanarTransform(z, z, q[0][..., 0], q[0][..., 1])


def _place_cart(q, c):
    return _shift(q[0], torch.zeros_like(q[0]))


def _place_pole(q, c):
    return PlanarTransform(q[0], torch.zeros_like(q[0]), q[1][..., 0], q[1][..., 1])


def _place_second_link(q, c):
    x, y = _link_end(q[0], c)
    return PlanarTransform(x, y, q[1][..., 0], q[1][..., 1])


ENCODER_FRAMES: dict[str, dict[int, FrameRule]] = {
    "pendulum": {0: FrameRule((), _zero_frame)},
    "cartpole": {0: FrameRule((), _zero_frame), 1: FrameRule((0,), _cart_window)},
    "acrobot": {0: FrameRule((), _zero_frame), 1: FrameRule((0,), _second_link_window)},
}

DECODER_FRAMES: dict[str, dict[int, FrameRule]] = {
    "pendulum": {0: FrameRule((0,), _rotate_at_origin)},
    "cartpole": {0: FrameRule((0,), _place_cart), 1: FrameRule((0, 1), _place_pole)},
    "acrobot": {0: FrameRule((0,), _rotate_at_origin), 1: FrameRule((0, 1), _place_second_link)},
}


def encoding_order(spec: SystemSpec) -> list[int]:
    """Topological order of coordinates under the encoder frame dependencies."""
    rules = ENCODER_FRAMES[spec.name]
    order: list[int] = []
    state: dict[int, int] = {}

    def visit(j: int):
        if state.get(j) == 1:
            raise FrameOrderError(f"cyclic encoder frame dependencies at coordinate {j}")
        if state.get(j) == 2:
            return
        state[j] = 1
        for d in rules[j].depends:
            visit(d)
        state[j] = 2
        order.append(j)

    for j in range(spec.dof):
        visit(j)
    return order


def _coord_value(spec: SystemSpec, j: int, v) -> torch.Tensor:
    v = _t(v)
    if spec.coord_kinds[j] == ROTATIONAL and v.dim() == 0:
        v = torch.stack([torch.cos(v), torch.sin(v)], -1)
    return v


def _evaluate(spec, rule: FrameRule, q: Mapping[int, object], c, what: str) -> PlanarTransform:
    missing = [d for d in rule.depends if d not in q]
    if missing:
        raise FrameOrderError(f"{what} needs coordinates {missing} that are not available yet")
    vals = {d: _coord_value(spec, d, q[d]) for d in rule.depends}
    if c is None:
        c = torch.tensor(world_to_image_constants(spec) or (0.0,), dtype=torch.float64)
    return rule.fn(vals, _t(c))


def enc_frame(spec: SystemSpec, j: int, q_partial: Mapping[int, object], c=None) -> PlanarTransform:
    """Attention-window frame for coordinate ``j``.

    Rotational coordinates are (cos, sin) tensors of shape (..., 2); a plain
    scalar angle is also accepted.
    """
    return _evaluate(spec, ENCODER_FRAMES[spec.name][j], q_partial, c, f"encoder frame {j}")


def dec_frame(spec: SystemSpec, i: int, q: Mapping[int, object], c=None) -> PlanarTransform:
    """Placement frame of body ``i``."""
    return _evaluate(spec, DECODER_FRAMES[spec.name][i], q, c, f"decoder frame {i}")


def world_to_image_constants(spec: SystemSpec) -> tuple[float, ...]:
    """Geometric constants of ``spec`` expressed in normalised image units."""
    return tuple(g / spec.extent for g in spec.geom_constants)
