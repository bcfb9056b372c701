"""Kinematic bicycle model, its control-affine form, and a fixed-step RK4 integrator.

State ordering everywhere is ``(alpha, x, y, v)``.  Heading ``alpha = 0``
points along +y; the car moves with velocity ``v * (-sin(alpha), cos(alpha))``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

WHEELBASE = 0.34
GAMMA_MAX = math.pi / 4
THRUST_MAX = 4.0
DIVERGENCE_BOUND = 1e6


class NonFiniteError(ValueError):
    """Raised when a state or input contains NaN or inf."""


@dataclass(frozen=True)
class InertialState:
    alpha: float
    x: float
    y: float
    v: float

    def as_array(self) -> np.ndarray:
        return np.array([self.alpha, self.x, self.y, self.v], dtype=float)

    @classmethod
    def from_array(cls, a: Sequence[float]) -> "InertialState":
        a = np.asarray(a, dtype=float)
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]))


@dataclass(frozen=True)
class ControlInput:
    """Timing rate ``u0``, steering angle ``gamma`` and thrust."""

    u0: float
    gamma: float
    thrust: float

    def affine(self, l: float = WHEELBASE) -> np.ndarray:
        """The input as ``(u0, w, thrust)`` with ``w = tan(gamma) / l``."""
        return np.array([self.u0, math.tan(self.gamma) / l, self.thrust])

    @classmethod
    def from_affine(cls, v: Sequence[float], l: float = WHEELBASE) -> "ControlInput":
        return cls(float(v[0]), float(math.atan(l * v[1])), float(v[2]))


@dataclass(frozen=True)
class InputBox:
    """Box saturation polytope over ``(u0, gamma, thrust)``.

    Steering enters the dynamics through ``w = tan(gamma) / l``, which is
    monotone in gamma, so the box maps exactly onto a box over
    ``(u0, w, thrust)``; see :meth:`affine_bounds`.
    """

    u0_lo: float = 0.2
    u0_hi: float = 2.0
    gamma_lo: float = -GAMMA_MAX
    gamma_hi: float = GAMMA_MAX
    thrust_lo: float = -THRUST_MAX
    thrust_hi: float = THRUST_MAX
    l: float = WHEELBASE

    def __post_init__(self):
        if not self.u0_lo <= self.u0_hi:
            raise ValueError("u0 bounds out of order")
        if not (self.gamma_lo < self.gamma_hi and self.thrust_lo < self.thrust_hi):
            raise ValueError("input bounds out of order")
        if self.u0_lo <= 0:
            raise ValueError("u0 lower bound must be positive")
        if not self.u0_lo <= 1.0 <= self.u0_hi:
            raise ValueError("u0 bounds must bracket 1 so the reference stays feasible")
        if self.gamma_lo < -math.pi / 2 or self.gamma_hi > math.pi / 2:
            raise ValueError("steering bounds must lie inside (-pi/2, pi/2)")

    @property
    def fixed_timing(self) -> bool:
        return self.u0_lo == self.u0_hi

    def trajectory_tracking(self) -> "InputBox":
        """Same box with the timing input pinned to 1 (zero-width interval)."""
        return InputBox(1.0, 1.0, self.gamma_lo, self.gamma_hi,
                        self.thrust_lo, self.thrust_hi, self.l)

    def affine_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.array([self.u0_lo, math.tan(self.gamma_lo) / self.l, self.thrust_lo])
        hi = np.array([self.u0_hi, math.tan(self.gamma_hi) / self.l, self.thrust_hi])
        return lo, hi

    def center(self) -> np.ndarray:
        lo, hi = self.affine_bounds()
        return 0.5 * (lo + hi)

    def clip(self, v: np.ndarray) -> np.ndarray:
        lo, hi = self.affine_bounds()
        return np.clip(v, lo, hi)

    def contains(self, u: ControlInput, tol: float = 1e-12) -> bool:
        return (self.u0_lo - tol <= u.u0 <= self.u0_hi + tol
                and self.gamma_lo - tol <= u.gamma <= self.gamma_hi + tol
                and self.thrust_lo - tol <= u.thrust <= self.thrust_hi + tol)

    def to_dict(self) -> dict:
        return {"u0": [self.u0_lo, self.u0_hi], "gamma": [self.gamma_lo, self.gamma_hi],
                "thrust": [self.thrust_lo, self.thrust_hi], "wheelbase": self.l}

    @classmethod
    def from_dict(cls, d: dict) -> "InputBox":
        return cls(d["u0"][0], d["u0"][1], d["gamma"][0], d["gamma"][1],
                   d["thrust"][0], d["thrust"][1], d.get("wheelbase", WHEELBASE))


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteError(f"non-finite value in {np.asarray(a)!r}")


def bicycle_vector_field(s, gamma, thrust, l: float = WHEELBASE) -> np.ndarray:
    """Time derivative ``(alpha', x', y', v')`` of the bicycle model.

    Broadcasts over leading dimensions of ``s`` (shape ``(..., 4)``) and the
    inputs.
    """
    if l <= 0:
        raise ValueError("wheelbase must be positive")
    s = np.asarray(s, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    thrust = np.asarray(thrust, dtype=float)
    _check_finite(s, gamma, thrust)
    alpha, v = s[..., 0], s[..., 3]
    out = np.empty(np.broadcast_shapes(s.shape, gamma.shape + (1,), thrust.shape + (1,)))
    out[..., 0] = v / l * np.tan(gamma)
    out[..., 1] = v * np.sin(-alpha)
    out[..., 2] = v * np.cos(alpha)
    out[..., 3] = thrust
    return out


def affine_input_form(s, l: float = WHEELBASE) -> tuple[np.ndarray, np.ndarray]:
    """Drift ``f0`` and input matrix ``G`` with ``s' = f0 + G @ (w, thrust)``."""
    if l <= 0:
        raise ValueError("wheelbase must be positive")
    s = np.asarray(s, dtype=float)
    _check_finite(s)
    alpha, v = s[..., 0], s[..., 3]
    f0 = np.zeros(s.shape)
    f0[..., 1] = v * np.sin(-alpha)
    f0[..., 2] = v * np.cos(alpha)
    G = np.zeros(s.shape + (2,))
    G[..., 0, 0] = v
    G[..., 3, 1] = 1.0
    return f0, G


def affine_field(s, w, thrust) -> np.ndarray:
    """Bicycle field driven directly by the affine steering input ``w``."""
    s = np.asarray(s, dtype=float)
    alpha, v = s[..., 0], s[..., 3]
    out = np.empty(np.broadcast_shapes(s.shape, np.shape(w) + (1,)))
    out[..., 0] = v * w
    out[..., 1] = -v * np.sin(alpha)
    out[..., 2] = v * np.cos(alpha)
    out[..., 3] = thrust
    return out


def rk4_step(f: Callable[[float, np.ndarray], np.ndarray], t: float, x: np.ndarray,
             dt: float) -> np.ndarray:
    k1 = f(t, x)
    k2 = f(t + 0.5 * dt, x + 0.5 * dt * k1)
    k3 = f(t + 0.5 * dt, x + 0.5 * dt * k2)
    k4 = f(t + dt, x + dt * k3)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


@dataclass
class Trajectory:
    t: np.ndarray
    states: np.ndarray
    diverged: bool = False


def integrate(s0, schedule, dt: float = 0.01, horizon: float = 1.0,
              l: float = WHEELBASE, bound: float = DIVERGENCE_BOUND) -> Trajectory:
    """Integrate the bicycle model under a piecewise-constant schedule.

    ``schedule`` is either a callable ``t -> (gamma, thrust)`` evaluated at the
    start of each step and held over it, or a sequence of ``(gamma, thrust)``
    pairs, one per step.  A run whose state leaves ``|s| <= bound`` is cut
    short and flagged ``diverged``.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if horizon < dt:
        raise ValueError("horizon must be at least one step")
    n = int(round(horizon / dt))
    x = np.asarray(s0.as_array() if isinstance(s0, InertialState) else s0, dtype=float)
    _check_finite(x)
    ts = [0.0]
    xs = [x.copy()]
    for k in range(n):
        t = k * dt
        gamma, thrust = schedule(t) if callable(schedule) else schedule[k]
        x = rk4_step(lambda _t, z: bicycle_vector_field(z, gamma, thrust, l), t, x, dt)
        if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > bound:
            return Trajectory(np.array(ts), np.array(xs), diverged=True)
        ts.append((k + 1) * dt)
        xs.append(x.copy())
    return Trajectory(np.array(ts), np.array(xs))
