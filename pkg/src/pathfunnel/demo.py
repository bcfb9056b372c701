"""MPC demonstrator: a good input at a queried deviation state.

Direct single shooting over piecewise-constant affine inputs
``(u0, w, thrust)`` on the body deviation dynamics, integrated with RK4.
The box-constrained problem is solved by L-BFGS-B with a finite-difference
gradient (all perturbed rollouts are integrated as one batch) from a few
starting sequences; the cheapest result wins.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .dynamics import ControlInput, InputBox
from .reference import ReferenceSegment, body_affine_form

log = logging.getLogger(__name__)


class DemonstratorError(RuntimeError):
    pass


@dataclass(frozen=True)
class MpcConfig:
    horizon: int = 20
    dt: float = 0.05
    # heading weighted well above the rest: with unit weight the demonstrator
    # turns too lazily for its inputs to certify a decrease near the band.
    # The speed weight keeps tracking-mode demos from braking hard whenever
    # the car is ahead, which no admissible quadratic funnel agrees with.
    Q: tuple = (30.0, 1.0, 1.0, 5.0)
    R: tuple = (0.1, 0.1, 0.01)
    terminal_scale: float = 10.0
    # weight on ((theta - T) / T)^2 per step; zero by default
    q_theta: float = 0.0
    restarts: int = 4
    max_iter: int = 50
    fd_step: float = 1e-6
    box: InputBox = field(default_factory=InputBox)

    def __post_init__(self):
        if self.horizon < 2:
            raise ValueError("horizon must be at least 2 steps")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.restarts < 1:
            raise ValueError("need at least one start")
        for name in ("Q", "R"):
            M = self._matrix(getattr(self, name))
            if not np.allclose(M, M.T) or np.linalg.eigvalsh(M).min() < -1e-12:
                raise ValueError(f"{name} must be symmetric positive semidefinite")
        if self.q_theta < 0 or self.terminal_scale < 0:
            raise ValueError("weights must be non-negative")

    @staticmethod
    def _matrix(m) -> np.ndarray:
        m = np.asarray(m, dtype=float)
        return np.diag(m) if m.ndim == 1 else m

    @property
    def Q_b(self) -> np.ndarray:
        return self._matrix(self.Q)

    @property
    def R_v(self) -> np.ndarray:
        return self._matrix(self.R)

    def with_box(self, box: InputBox) -> "MpcConfig":
        d = dict(self.__dict__)
        d["box"] = box
        return MpcConfig(**d)

    def to_dict(self) -> dict:
        return {"horizon": self.horizon, "dt": self.dt,
                "Q": np.asarray(self.Q).tolist(), "R": np.asarray(self.R).tolist(),
                "terminal_scale": self.terminal_scale, "q_theta": self.q_theta,
                "restarts": self.restarts, "max_iter": self.max_iter, "fd_step": self.fd_step}


@dataclass
class DemoResult:
    sequence: np.ndarray          # (H, 3) affine inputs
    cost: float
    restart: int
    initial_costs: list
    final_costs: list

    @property
    def first(self) -> np.ndarray:
        return self.sequence[0]


def _field(ref: ReferenceSegment, z: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Body deviation field, written out for speed (same as ``body_deviation_field``)."""
    if hasattr(ref, "affine_form"):
        th = np.clip(z[..., 0], 0.0, ref.T)
        a, G = body_affine_form(th, z[..., 1:], ref)
        return a + np.einsum("...ij,...j->...i", G, v)
    th = np.clip(z[:, 0], 0.0, ref.T)
    xr, r = ref._state(th), ref._deriv(th)
    u0, w, thrust = v[:, 0], v[:, 1], v[:, 2]
    aR, xR, yR = z[:, 1], z[:, 2], z[:, 3]
    speed = z[:, 4] + xr[:, 3]
    da = r[:, 0]
    c, s = np.cos(xr[:, 0]), np.sin(xr[:, 0])
    q0 = c * r[:, 1] + s * r[:, 2]
    q1 = -s * r[:, 1] + c * r[:, 2]
    out = np.empty_like(z)
    out[:, 0] = u0
    out[:, 1] = speed * w - da * u0
    out[:, 2] = -speed * np.sin(aR) + (da * yR - q0) * u0
    out[:, 3] = speed * np.cos(aR) - (da * xR + q1) * u0
    out[:, 4] = thrust - r[:, 3] * u0
    return out


def rollout(z0, seqs, ref: ReferenceSegment, dt: float) -> np.ndarray:
    """States ``(N, H+1, 5)`` for input sequences ``(N, H, 3)`` from ``z0 = (theta, b)``."""
    seqs = np.asarray(seqs, dtype=float)
    n, H, _ = seqs.shape
    z = np.broadcast_to(np.asarray(z0, dtype=float), (n, 5)).copy()
    out = np.empty((n, H + 1, 5))
    out[:, 0] = z
    with np.errstate(all="ignore"):
        for k in range(H):
            v = seqs[:, k]
            k1 = _field(ref, z, v)
            k2 = _field(ref, z + 0.5 * dt * k1, v)
            k3 = _field(ref, z + 0.5 * dt * k2, v)
            k4 = _field(ref, z + dt * k3, v)
            z = z + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
            z[:, 0] = np.clip(z[:, 0], 0.0, ref.T)
            out[:, k + 1] = z
    return out


def sequence_cost(z0, seqs, ref: ReferenceSegment, cfg: MpcConfig) -> np.ndarray:
    """Quadratic cost of each sequence; ``inf`` for non-finite rollouts."""
    seqs = np.asarray(seqs, dtype=float)
    zs = rollout(z0, seqs, ref, cfg.dt)
    b = zs[:, :-1, 1:]
    vnom = ref.reference_inputs(np.clip(zs[:, :-1, 0], 0.0, ref.T), cfg.box.l)
    dv = seqs - vnom
    stage = (np.einsum("nki,ij,nkj->n", b, cfg.Q_b, b)
             + np.einsum("nki,ij,nkj->n", dv, cfg.R_v, dv))
    bH = zs[:, -1, 1:]
    term = cfg.terminal_scale * np.einsum("ni,ij,nj->n", bH, cfg.Q_b, bH)
    if cfg.q_theta:
        stage = stage + cfg.q_theta * np.sum(((zs[:, 1:, 0] - ref.T) / ref.T) ** 2, axis=1)
    c = stage + term
    return np.where(np.isfinite(c), c, np.inf)


def _reference_sequence(z0, ref: ReferenceSegment, cfg: MpcConfig) -> np.ndarray:
    ths = np.clip(z0[0] + cfg.dt * np.arange(cfg.horizon), 0.0, ref.T)
    return cfg.box.clip(ref.reference_inputs(ths, cfg.box.l))


def optimize_sequence(z, ref: ReferenceSegment, cfg: MpcConfig = MpcConfig(),
                      seed: int = 0) -> DemoResult:
    """Multi-start box-constrained shooting; raises :class:`DemonstratorError` if every start fails."""
    z = np.asarray(z, dtype=float)
    if not 0.0 <= z[0] <= ref.T + 1e-9:
        raise ValueError(f"theta={z[0]} outside [0, {ref.T}]")
    z = z.copy()
    z[0] = min(z[0], ref.T)
    rng = np.random.default_rng(seed)
    H = cfg.horizon
    lo, hi = cfg.box.affine_bounds()
    lo_f, hi_f = np.tile(lo, H), np.tile(hi, H)
    starts = [_reference_sequence(z, ref, cfg)]
    for _ in range(cfg.restarts - 1):
        starts.append(lo + rng.random((H, 3)) * (hi - lo))
    h = cfg.fd_step * np.maximum(1.0, hi_f - lo_f)
    free = hi_f > lo_f
    eye = np.diag(h)[free]

    def fun(p):
        # cost and central-difference gradient from one batched rollout
        batch = np.concatenate([p[None], p + eye, p - eye]).reshape(-1, H, 3)
        c = sequence_cost(z, batch, ref, cfg)
        if not np.isfinite(c[0]):
            return np.inf, np.zeros_like(p)
        m = len(eye)
        g = np.zeros_like(p)
        g[free] = (c[1:m + 1] - c[m + 1:]) / (2 * h[free])
        if not np.all(np.isfinite(g)):
            return np.inf, np.zeros_like(p)
        return float(c[0]), g

    init_costs, final_costs, results = [], [], []
    for i, s0 in enumerate(starts):
        p0 = s0.ravel()
        c0 = float(sequence_cost(z, p0.reshape(1, H, 3), ref, cfg)[0])
        init_costs.append(c0)
        if not np.isfinite(c0):
            final_costs.append(np.inf)
            results.append(None)
            continue
        r = minimize(fun, p0, jac=True, method="L-BFGS-B", bounds=list(zip(lo_f, hi_f)),
                     options={"maxiter": cfg.max_iter})
        p = np.clip(r.x, lo_f, hi_f)
        c = float(sequence_cost(z, p.reshape(1, H, 3), ref, cfg)[0])
        if not c <= c0:
            p, c = p0, c0  # never worse than the start
        final_costs.append(c)
        results.append(p.reshape(H, 3))
    if all(r is None for r in results):
        raise DemonstratorError("demonstrator failed: every rollout was non-finite")
    best = int(np.argmin(final_costs))  # lowest index on ties
    return DemoResult(results[best], final_costs[best], best, init_costs, final_costs)


def demonstrate(z, ref: ReferenceSegment, cfg: MpcConfig = MpcConfig(), seed: int = 0) -> ControlInput:
    """First action of the optimized sequence, as ``(u0, gamma, thrust)``."""
    res = optimize_sequence(z, ref, cfg, seed)
    return ControlInput.from_affine(cfg.box.clip(res.first), cfg.box.l)
