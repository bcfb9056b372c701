"""Feedback and timing laws extracted from a funnel function.

Two pointwise extraction rules work on the affine form ``Vdot = a + g . v``:

* ``sontag-clamp``: Sontag's universal formula around the box centre,
  then clipped to the input box;
* ``min-norm-qp``: the input closest to the reference input that achieves
  ``Vdot <= -lambda``, falling back to the exact box minimizer when no
  input in the box does.

In trajectory tracking mode the timing input is pinned to 1 and removed
from both rules.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dynamics import ControlInput, InputBox
from .funnel import FunnelFunction, box_argmin
from .reference import ReferenceSegment, to_body

STRATEGIES = ("sontag-clamp", "min-norm-qp")
G_TINY = 1e-9


def sontag(a: float, g: np.ndarray, center: np.ndarray, lo: np.ndarray, hi: np.ndarray,
           clamp: bool = True) -> np.ndarray:
    """Sontag's formula with inputs measured from ``center``; clipped when ``clamp``."""
    g = np.asarray(g, dtype=float)
    a1 = a + g @ center
    gg = g @ g
    if gg <= G_TINY ** 2:
        v = center.copy()
    else:
        v = center - (a1 + np.sqrt(a1 * a1 + gg * gg)) / gg * g
    return np.clip(v, lo, hi) if clamp else v


def min_norm_qp(a: float, g: np.ndarray, target: float, v_nom: np.ndarray,
                lo: np.ndarray, hi: np.ndarray) -> tuple[np.ndarray, bool]:
    """``argmin |v - v_nom|^2`` s.t. ``a + g.v <= target``, ``lo <= v <= hi``.

    The optimum is ``clip(v_nom - mu g)`` for the smallest ``mu >= 0`` that
    meets the inequality; ``a + g . clip(v_nom - mu g)`` is piecewise linear
    and nonincreasing in ``mu``, so ``mu`` is found exactly by walking its
    breakpoints.  Returns ``(v, feasible)``; infeasible problems return the
    box minimizer of ``a + g.v``.
    """
    g = np.asarray(g, dtype=float)
    v0 = np.clip(v_nom, lo, hi)
    if a + g @ v0 <= target:
        return v0, True
    vmin = box_argmin(g, lo, hi)
    if a + g @ vmin > target:
        return vmin, False
    nz = np.abs(g) > 0
    # mu at which each coordinate of v_nom - mu g reaches the bound it is heading to
    bound = np.where(g > 0, lo, hi)
    with np.errstate(divide="ignore", invalid="ignore"):
        mu_hit = np.where(nz, (v_nom - bound) / np.where(nz, g, 1.0), np.inf)
    mu_hit = np.maximum(mu_hit, 0.0)
    # before its entry mu a coordinate sits clipped at the opposite bound
    entry = np.where(nz, (v_nom - np.where(g > 0, hi, lo)) / np.where(nz, g, 1.0), -np.inf)
    knots = np.unique(np.concatenate([[0.0], np.maximum(entry[np.isfinite(entry)], 0.0),
                                      mu_hit[np.isfinite(mu_hit)]]))

    def h(mu):
        return a + g @ np.clip(v_nom - mu * g, lo, hi)

    prev = 0.0
    for k in knots:
        if h(k) <= target:
            h0, h1 = h(prev), h(k)
            mu = k if h1 == h0 else prev + (target - h0) * (k - prev) / (h1 - h0)
            return np.clip(v_nom - mu * g, lo, hi), True
        prev = k
    return vmin, False


@dataclass
class ControlResult:
    input: ControlInput
    affine: np.ndarray
    vdot: float
    feasible: bool = True


def extract_control(V: FunnelFunction, theta: float, b, ref: ReferenceSegment,
                    strategy: str = "min-norm-qp", box: InputBox | None = None,
                    mode: str = "pf") -> ControlResult:
    """Pointwise input from the funnel at ``(theta, b)``.

    Inside the band ``beta_lower <= V`` the min-norm target is
    ``Vdot <= -lambda``.  Below the band it is ``Vdot_b <= -lambda V_b /
    beta_lower`` on the quadratic part only (the ``c0 u0`` term cannot be
    negative), which keeps the controller continuous across ``beta_lower``
    and steers the deviation towards zero.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    box = box or InputBox()
    if mode == "tt":
        box = box.trajectory_tracking()
    b = np.asarray(b, dtype=float)
    a, g = V.lie_derivative_affine(theta, b, ref)
    a, g = float(a), np.asarray(g, dtype=float)
    lo, hi = box.affine_bounds()
    fixed = hi <= lo
    # fold pinned coordinates (u0 = 1 in tracking mode) into the drift
    a_f = a + g[fixed] @ lo[fixed]
    free = ~fixed
    g_f, lo_f, hi_f = g[free], lo[free], hi[free]
    feasible = True
    if strategy == "sontag-clamp":
        vf = sontag(a_f, g_f, 0.5 * (lo_f + hi_f), lo_f, hi_f)
    else:
        v_nom = ref.reference_inputs(theta, box.l)[free]
        val = float(V.value(theta, b))
        if val >= V.beta_lower:
            vf, feasible = min_norm_qp(a_f, g_f, -V.lam, v_nom, lo_f, hi_f)
        else:
            # quadratic part only: Vdot_b = Vdot - c0 u0
            gq = g.copy()
            gq[0] -= V.c0
            aq = a + gq[fixed] @ lo[fixed] - (V.c0 * lo[0] if fixed[0] else 0.0)
            vq = val - V.c0 * theta
            target = -V.lam * vq / V.beta_lower
            vf, feasible = min_norm_qp(aq, gq[free], target, v_nom, lo_f, hi_f)
    v = lo.copy()
    v[free] = vf
    v = np.clip(v, lo, hi)
    return ControlResult(ControlInput.from_affine(v, box.l), v, float(a + g @ v), feasible)


@dataclass
class ControllerState:
    """A funnel controller tracking its own path parameter."""

    V: FunnelFunction
    ref: ReferenceSegment
    mode: str = "pf"
    strategy: str = "min-norm-qp"
    box: InputBox = field(default_factory=InputBox)
    dt_ctrl: float = 0.01
    theta: float = 0.0
    elapsed: float = 0.0
    # elapsed = _base + _steps * dt_ctrl, so TT timing is exactly k dt
    _base: float = field(default=0.0, repr=False)
    _steps: int = field(default=0, repr=False)

    def __post_init__(self):
        if self.mode not in ("pf", "tt"):
            raise ValueError("mode must be 'pf' or 'tt'")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if not self.dt_ctrl > 0:
            raise ValueError("dt_ctrl must be positive")
        if not 0.0 <= self.theta <= self.ref.T:
            raise ValueError(f"theta={self.theta} outside [0, {self.ref.T}]")
        self._base = self.elapsed

    def body_state(self, s) -> np.ndarray:
        return to_body(np.asarray(s, dtype=float), self.theta, self.ref)

    def step(self, s, dt: float | None = None) -> tuple[ControlInput, ControlResult]:
        """Compute the input at inertial state ``s`` and advance ``theta``.

        PF: ``theta += u0 dt``; TT: ``theta`` is the elapsed time.  Both are
        clamped to ``[0, T]``.  The returned input carries the ``u0`` that was
        used (1 in tracking mode).
        """
        dt = self.dt_ctrl if dt is None else dt
        if not dt > 0:
            raise ValueError("dt must be positive")
        b = self.body_state(s)
        res = extract_control(self.V, self.theta, b, self.ref, self.strategy, self.box, self.mode)
        if dt == self.dt_ctrl:
            self._steps += 1
        else:
            self._base += dt
        self.elapsed = self._base + self._steps * self.dt_ctrl
        if self.mode == "pf":
            self.theta = min(self.theta + res.input.u0 * dt, self.ref.T)
        else:
            self.theta = min(self.elapsed, self.ref.T)
        return res.input, res

    def reset(self, ref: ReferenceSegment | None = None, theta: float = 0.0) -> None:
        """Start over on ``ref`` (used when chaining segments)."""
        if ref is not None:
            self.ref = ref
        self.theta = theta
        self._steps = 0
        self._base = theta if self.mode == "tt" else 0.0
        self.elapsed = self._base
