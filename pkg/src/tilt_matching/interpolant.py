"""Interpolant schedules and interpolant samples.

The interpolant between a base draw ``x0`` and a target draw ``x1`` is
``I_t = alpha(t) x0 + beta(t) x1`` with time derivative
``I_dot_t = alpha_dot(t) x0 + beta_dot(t) x1``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable

import numpy as np

# Training times are drawn from [T_EPS, 1 - T_EPS].
T_EPS = 1e-4

_BOUNDARY_TOL = 1e-12


class DomainError(ValueError):
    """Raised when a quantity is evaluated outside its domain of definition."""


class ScheduleKind(enum.Enum):
    LINEAR = "linear"
    CUSTOM = "custom"


ScalarFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class InterpolantSchedule:
    """Coefficients ``alpha``, ``beta`` and their time derivatives.

    All four callables accept scalars or arrays of times and broadcast.
    """

    alpha: ScalarFn
    beta: ScalarFn
    alpha_dot: ScalarFn
    beta_dot: ScalarFn
    kind: ScheduleKind = ScheduleKind.CUSTOM

    def __post_init__(self):
        a0, a1 = float(self.alpha(0.0)), float(self.alpha(1.0))
        b0, b1 = float(self.beta(0.0)), float(self.beta(1.0))
        if (abs(a0 - 1.0) >= _BOUNDARY_TOL or abs(b1 - 1.0) >= _BOUNDARY_TOL
                or abs(a1) >= _BOUNDARY_TOL or abs(b0) >= _BOUNDARY_TOL):
            raise ValueError(
                "schedule violates boundary conditions: "
                f"alpha(0)={a0}, alpha(1)={a1}, beta(0)={b0}, beta(1)={b1}"
            )

    def coefficients(self, t):
        """Return ``(alpha, beta, alpha_dot, beta_dot)`` at ``t`` as float64 arrays."""
        t = np.asarray(t, dtype=np.float64)
        return (
            np.asarray(self.alpha(t), dtype=np.float64) + 0.0 * t,
            np.asarray(self.beta(t), dtype=np.float64) + 0.0 * t,
            np.asarray(self.alpha_dot(t), dtype=np.float64) + 0.0 * t,
            np.asarray(self.beta_dot(t), dtype=np.float64) + 0.0 * t,
        )


def make_linear_schedule() -> InterpolantSchedule:
    """The linear interpolant ``I_t = (1 - t) x0 + t x1``."""
    return InterpolantSchedule(
        alpha=lambda t: 1.0 - np.asarray(t, dtype=np.float64),
        beta=lambda t: np.asarray(t, dtype=np.float64),
        alpha_dot=lambda t: np.full(np.shape(t), -1.0),
        beta_dot=lambda t: np.full(np.shape(t), 1.0),
        kind=ScheduleKind.LINEAR,
    )


def make_custom_schedule(alpha, beta, alpha_dot, beta_dot) -> InterpolantSchedule:
    """Wrap user closures; the boundary conditions are checked on construction."""
    return InterpolantSchedule(alpha, beta, alpha_dot, beta_dot, ScheduleKind.CUSTOM)


@dataclass(frozen=True)
class InterpolantSample:
    t: float
    x0: np.ndarray
    x1: np.ndarray
    I: np.ndarray
    I_dot: np.ndarray
    reward: float


@dataclass(frozen=True)
class SampleBatch:
    """Batched interpolant samples; arrays have a leading batch axis of size N."""

    t: np.ndarray       # (N,)
    x0: np.ndarray      # (N, d)
    x1: np.ndarray      # (N, d)
    I: np.ndarray       # (N, d)
    I_dot: np.ndarray   # (N, d)
    reward: np.ndarray  # (N,)

    def __len__(self):
        return self.t.shape[0]

    @property
    def dim(self) -> int:
        return self.x0.shape[1]

    def subset(self, idx) -> "SampleBatch":
        return SampleBatch(self.t[idx], self.x0[idx], self.x1[idx],
                           self.I[idx], self.I_dot[idx], self.reward[idx])


def sample_interpolant(schedule: InterpolantSchedule, x0, x1, t: float,
                       reward_fn: Callable[[np.ndarray], float]) -> InterpolantSample:
    x0 = np.atleast_1d(np.asarray(x0, dtype=np.float64))
    x1 = np.atleast_1d(np.asarray(x1, dtype=np.float64))
    if x0.shape != x1.shape:
        raise ValueError(f"dimension mismatch: x0 {x0.shape} vs x1 {x1.shape}")
    if not 0.0 <= t <= 1.0:
        raise DomainError(f"t={t} outside [0, 1]")
    a, b, ad, bd = (float(c) for c in schedule.coefficients(t))
    return InterpolantSample(
        t=float(t), x0=x0, x1=x1,
        I=a * x0 + b * x1,
        I_dot=ad * x0 + bd * x1,
        reward=float(reward_fn(x1)),
    )


def sample_interpolant_batch(schedule: InterpolantSchedule, x0, x1, t,
                             reward: np.ndarray | Callable | None = None) -> SampleBatch:
    """Vectorised :func:`sample_interpolant`.

    ``reward`` may be an array of precomputed rewards, a callable mapping
    ``(N, d) -> (N,)``, or ``None`` for zero rewards.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.ndim == 1:
        x0 = x0[:, None]
    if x1.ndim == 1:
        x1 = x1[:, None]
    if x0.shape != x1.shape:
        raise ValueError(f"dimension mismatch: x0 {x0.shape} vs x1 {x1.shape}")
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x0.shape[0],)).copy()
    if np.any((t < 0.0) | (t > 1.0)):
        raise DomainError("times must lie in [0, 1]")
    a, b, ad, bd = schedule.coefficients(t)
    if reward is None:
        r = np.zeros(x0.shape[0])
    elif callable(reward):
        r = np.asarray(reward(x1), dtype=np.float64).reshape(x0.shape[0])
    else:
        r = np.asarray(reward, dtype=np.float64).reshape(x0.shape[0])
    return SampleBatch(
        t=t, x0=x0, x1=x1,
        I=a[:, None] * x0 + b[:, None] * x1,
        I_dot=ad[:, None] * x0 + bd[:, None] * x1,
        reward=r,
    )


def sample_times(rng: np.random.Generator, n: int, eps: float = T_EPS) -> np.ndarray:
    return rng.uniform(eps, 1.0 - eps, size=n)


def sigma_squared(schedule: InterpolantSchedule, t):
    """Diffusion coefficient matching the interpolant's conditional endpoint laws.

    ``sigma_t^2 = 2 * (beta_dot / beta * alpha^2 - alpha_dot * alpha)``.
    For the linear schedule this is ``2 (1 - t) / t``.
    """
    a, b, ad, bd = schedule.coefficients(t)
    if np.any(b == 0.0):
        raise DomainError("sigma_squared is undefined where beta(t) = 0")
    out = 2.0 * (bd / b * a * a - ad * a)
    return float(out) if out.ndim == 0 else out
