"""Fixed-step solvers with the control held constant over a trajectory.

Everything is plain torch arithmetic, so gradients flow through an unrolled
rollout back to the initial state, the control and any parameters the vector
field closes over.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Callable, Protocol

import torch

DIVERGENCE_LIMIT = 1e6
METHODS = ("euler", "rk4")

# Number of steps taken per method since import (or the last reset).  Used to
# verify which solver a training or evaluation loop actually exercised.
STEP_COUNTS: Counter = Counter()


class OdeField(Protocol):
    def __call__(self, s: torch.Tensor, u: torch.Tensor) -> torch.Tensor: ...


class IntegrationDivergedError(RuntimeError):
    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"integration diverged at step {step}")


@dataclass
class Rollout:
    states: torch.Tensor  # (T+1, *state_shape)
    dt: float
    u_const: torch.Tensor

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")

    @property
    def T(self) -> int:
        return self.states.shape[0] - 1


def reset_counters() -> None:
    STEP_COUNTS.clear()


def _guard(s: torch.Tensor, step: int) -> torch.Tensor:
    with torch.no_grad():
        bad = not torch.isfinite(s).all() or bool((s.abs() > DIVERGENCE_LIMIT).any())
    if bad:
        raise IntegrationDivergedError(step)
    return s


def euler_step(f: OdeField, s, u, dt: float, step: int = 0) -> torch.Tensor:
    if not dt > 0:
        raise ValueError("dt must be positive")
    STEP_COUNTS["euler"] += 1
    return _guard(s + dt * f(s, u), step)


def rk4_step(f: OdeField, s, u, dt: float, step: int = 0) -> torch.Tensor:
    if not dt > 0:
        raise ValueError("dt must be positive")
    STEP_COUNTS["rk4"] += 1
    k1 = f(s, u)
    k2 = f(s + 0.5 * dt * k1, u)
    k3 = f(s + 0.5 * dt * k2, u)
    k4 = f(s + dt * k3, u)
    return _guard(s + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4), step)


STEPPERS: dict[str, Callable] = {"euler": euler_step, "rk4": rk4_step}


def get_stepper(method: str) -> Callable:
    try:
        return STEPPERS[method]
    except KeyError:
        raise ValueError(f"unknown solver {method!r}; expected one of {METHODS}") from None


def rollout(f: OdeField, s0, u_const, dt: float, T: int, method: str = "rk4") -> Rollout:
    """Integrate ``T`` steps of ``ds/dt = f(s, u_const)``.

    This is the augmented system ``(s, u)`` with ``du/dt = 0``: the control
    tensor is passed unchanged to every stage of every step.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    step = get_stepper(method)
    states = [s0]
    s = s0
    for k in range(T):
        s = step(f, s, u_const, dt, k)
        states.append(s)
    return Rollout(torch.stack(states), dt, u_const)
