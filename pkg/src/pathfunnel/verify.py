"""Sampling falsifier for the funnel conditions.

Each condition domain is covered with scrambled Sobol points plus a few
analytic candidates (the exact minimizers of the quadratic part on box
faces, ball and ellipsoid boundaries).  The worst samples are then pushed
further by a derivative-free coordinate ascent on the violation margin.

A clean result only says that no violation was found at the sampled budget.
"""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.stats import qmc

from .dynamics import InputBox
from .funnel import CONDITIONS, FunnelFunction, box_min, condition_margins
from .reference import ReferenceSegment, safe_contains, to_body
from .regions import Ball, Box, Ellipsoid, ObstacleComplement, Region, RegionSpec

log = logging.getLogger(__name__)

BUDGET_SPLIT = {"a": 0.2, "b": 0.2, "c": 0.2, "d": 0.4}
MIN_BUDGET = 1000
MIN_ACCEPTANCE = 1e-4
REFINE_STEPS = 50
REFINE_TOP_K = 8


class ConfigurationError(ValueError):
    pass


@dataclass
class Counterexample:
    condition: str
    theta: float
    b: list
    margin: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FalsifyResult:
    counterexamples: list = field(default_factory=list)
    n_samples: dict = field(default_factory=dict)
    worst: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    @property
    def clean(self) -> bool:
        return not self.counterexamples

    @property
    def strongest(self) -> Counterexample | None:
        if not self.counterexamples:
            return None
        return max(self.counterexamples, key=lambda c: c.margin)

    def to_dict(self) -> dict:
        return {"clean": self.clean, "n_samples": self.n_samples, "worst_margin": self.worst,
                "warnings": self.warnings,
                "counterexamples": [c.to_dict() for c in self.counterexamples],
                "note": "falsification-clean at these samples is not a formal proof"}


# ------------------------------------------------------------ sampling

def _sobol(n: int, d: int, rng: np.random.Generator) -> np.ndarray:
    eng = qmc.Sobol(d, scramble=True, seed=rng)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return eng.random(n)


def _radial_boundary_scale(region: Region, b: np.ndarray) -> np.ndarray:
    """Scale ``s`` such that ``s * b`` lies on the boundary of a star-shaped region."""
    if isinstance(region, Ball):
        c = np.asarray(region.center)
        if np.any(c != 0):
            raise ConfigurationError("radial projection needs an origin-centred ball")
        n = np.linalg.norm(b, axis=-1)
        return region.radius / np.where(n > 0, n, np.inf)
    if isinstance(region, Ellipsoid):
        q = np.einsum("...i,ij,...j->...", b, region.matrix, b)
        return np.sqrt(region.level / np.where(q > 0, q, np.inf))
    if isinstance(region, Box):
        lo, hi = np.asarray(region.lo), np.asarray(region.hi)
        lim = np.where(b > 0, hi / np.where(b > 0, b, 1), np.where(b < 0, lo / np.where(b < 0, b, 1), np.inf))
        return np.min(lim, axis=-1)
    raise ConfigurationError(f"no radial projection for region {region.kind}")


def _floored_inverse(C: np.ndarray, floor: float = 1e-12) -> np.ndarray:
    """Inverse of a symmetric matrix with eigenvalues floored (handles singular C)."""
    w, U = np.linalg.eigh(C)
    return (U / np.maximum(w, floor)) @ U.T


def _quadratic_face_minimizers(C: np.ndarray, region: Region) -> np.ndarray:
    """Exact minimizers of ``b^T C b`` on the boundary of a ball, ellipsoid or box."""
    if isinstance(region, Ball):
        w, U = np.linalg.eigh(C)
        e = U[:, 0] * region.radius
        return np.stack([e, -e])
    if isinstance(region, Ellipsoid):
        # min b^T C b s.t. b^T Q b = level: generalized eigenvector of (C, Q)
        L = np.linalg.cholesky(region.matrix)
        Li = np.linalg.inv(L)
        w, U = np.linalg.eigh(Li @ C @ Li.T)
        e = Li.T @ U[:, 0]
        e = e * np.sqrt(region.level / (e @ region.matrix @ e))
        return np.stack([e, -e])
    if isinstance(region, Box):
        Ci = _floored_inverse(C)
        pts = []
        lo, hi = np.asarray(region.lo), np.asarray(region.hi)
        for i in range(len(lo)):
            for h in (lo[i], hi[i]):
                p = h * Ci[:, i] / Ci[i, i]
                pts.append(np.clip(p, lo, hi))
        return np.array(pts)
    return np.zeros((0, 4))


def _interior_samples(region: Region, n: int, rng: np.random.Generator) -> np.ndarray:
    lo, hi = region.bbox()
    u = _sobol(4 * n + 16, len(lo), rng)
    pts = lo + u * (hi - lo)
    pts = pts[region.contains(pts)]
    return pts[:n]


def _level_bbox(V: FunnelFunction, theta: np.ndarray, level: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-theta bounding box of ``{b : b^T C b <= level - c0 theta}``."""
    r = np.maximum(level - V.c0 * theta, 0.0)
    half = np.sqrt(r[:, None] * np.diag(_floored_inverse(V.C))[None, :])
    half = np.minimum(half, 1e6)
    return -half, half


def _obstacle_boundary_states(V, obstacle: ObstacleComplement, theta, ref, rng):
    """Body states whose position is on the inflated obstacle boundary."""
    n = len(theta)
    xy = obstacle.boundary_samples(n, rng)
    lo, hi = _level_bbox(V, theta, V.beta)
    u = rng.random((n, 2))
    xr = ref.state(theta)
    s = np.empty((n, 4))
    s[:, 0] = xr[:, 0] + lo[:, 0] + u[:, 0] * (hi[:, 0] - lo[:, 0])
    s[:, 1:3] = xy
    s[:, 3] = xr[:, 3] + lo[:, 3] + u[:, 1] * (hi[:, 3] - lo[:, 3])
    return to_body(s, theta, ref)


def _band_samples(V: FunnelFunction, spec: RegionSpec, ref: ReferenceSegment, n: int,
                  rng: np.random.Generator, warn: list) -> tuple[np.ndarray, np.ndarray]:
    """States in ``S(theta)`` with ``beta_lower <= V <= beta``.

    Rejection from the bounding box of the sublevel set (clipped to the safe
    set's box when it has one), topped up with points on the two level
    surfaces where the decrease condition is usually tightest.
    """
    T = ref.T
    n_rej = max(n // 2, 1)
    n_surf = n - n_rej
    draws = 8 * n_rej
    u = _sobol(draws, 5, rng)
    theta = u[:, 0] * T
    lo, hi = _level_bbox(V, theta, V.beta)
    safe = spec.safe_at(0.0) if not callable(spec.safe) or hasattr(spec.safe, "contains") else None
    if isinstance(safe, Box):
        lo = np.maximum(lo, np.asarray(safe.lo))
        hi = np.minimum(hi, np.asarray(safe.hi))
        hi = np.maximum(hi, lo)
    b = lo + u[:, 1:] * (hi - lo)
    val = V.value(theta, b)
    ok = (val >= V.beta_lower) & (val <= V.beta)
    ok &= safe_contains(spec, theta, b, ref)
    rate = ok.mean()
    th_r, b_r = theta[ok][:n_rej], b[ok][:n_rej]
    if rate < MIN_ACCEPTANCE:
        warn.append(f"decrease band empty at this resolution (acceptance {rate:.2e}); "
                    "condition d passes vacuously")
        return np.zeros(0), np.zeros((0, 4))

    # level-surface top-up: directions scaled onto V = beta_lower and V = beta
    m = 2 * n_surf
    th_s = _sobol(m, 1, rng)[:, 0] * T
    d = rng.standard_normal((m, 4))
    q = np.einsum("ni,ij,nj->n", d, V.C, d)
    levels = np.where(np.arange(m) % 2 == 0, V.beta_lower, V.beta)
    r = levels - V.c0 * th_s
    good = r > 0
    b_s = d[good] * np.sqrt(r[good] / q[good])[:, None]
    th_s = th_s[good]
    keep = safe_contains(spec, th_s, b_s, ref)
    th_s, b_s = th_s[keep][:n_surf], b_s[keep][:n_surf]
    return np.concatenate([th_r, th_s]), np.concatenate([b_r, b_s])


def draw_condition_samples(V: FunnelFunction, spec: RegionSpec, ref: ReferenceSegment,
                           budget: int, rng: np.random.Generator,
                           warn: list | None = None) -> dict:
    """Sample every condition's domain; returns ``{cond: (theta, b)}``."""
    warn = [] if warn is None else warn
    nb = {k: max(int(budget * f), 1) for k, f in BUDGET_SPLIT.items()}
    out = {}
    T = ref.T

    # a: initial set, half on the boundary and half inside
    I = spec.initial
    bd = I.boundary_samples(nb["a"] - nb["a"] // 2, rng)
    inner = _interior_samples(I, nb["a"] // 2, rng)
    b_a = np.concatenate([bd, inner, _quadratic_face_minimizers(V.C, I)])
    if len(b_a) == 0:
        raise ConfigurationError("initial set has zero volume")
    out["a"] = (np.zeros(len(b_a)), b_a)

    # b: goal boundary and an annulus just outside it
    G = spec.goal
    bd = G.boundary_samples(nb["b"], rng)
    scale = 1.0 + 0.5 * np.where(np.arange(nb["b"]) % 2 == 0, 0.0, rng.random(nb["b"]))
    b_b = np.concatenate([bd * scale[:, None], _quadratic_face_minimizers(V.C, G)])
    out["b"] = (np.full(len(b_b), T), b_b)

    # c: boundary of the safe set over a theta grid
    th_c = _sobol(nb["c"], 1, rng)[:, 0] * T
    S = spec.safe
    if isinstance(S, ObstacleComplement):
        b_c = _obstacle_boundary_states(V, S, th_c, ref, rng)
    elif isinstance(S, Region):
        b_c = S.boundary_samples(nb["c"], rng)
        fm = _quadratic_face_minimizers(V.C, S)
        if len(fm):
            grid = np.linspace(0.0, T, 11)
            th_c = np.concatenate([th_c, np.repeat(grid, len(fm))])
            b_c = np.concatenate([b_c, np.tile(fm, (len(grid), 1))])
    else:
        b_c = np.stack([S(t).boundary_samples(1, rng)[0] for t in th_c])
    out["c"] = (th_c, b_c)

    out["d"] = _band_samples(V, spec, ref, nb["d"], rng, warn)
    for k in ("a", "b", "c"):
        if len(out[k][1]) == 0:
            raise ConfigurationError(f"empty sample set for condition {k}")
    return out


# ------------------------------------------------------------ refinement

def _project(cond: str, V: FunnelFunction, spec: RegionSpec, ref: ReferenceSegment,
             theta: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Map candidates back onto the condition domain; returns (theta, b, feasible)."""
    T = ref.T
    if cond == "a":
        b = b * _radial_boundary_scale(spec.initial, b)[:, None]
        return np.zeros(len(b)), b, np.all(np.isfinite(b), axis=1)
    if cond == "b":
        b = b * _radial_boundary_scale(spec.goal, b)[:, None]
        return np.full(len(b), T), b, np.all(np.isfinite(b), axis=1)
    theta = np.clip(theta, 0.0, T)
    if cond == "c":
        S = spec.safe
        if isinstance(S, ObstacleComplement):
            from .reference import to_inertial
            s = to_inertial(b, theta, ref)
            xy = s[:, 1:3]
            P = S.vertices
            best = None
            for a0, a1 in zip(P, np.roll(P, -1, axis=0)):
                e = a1 - a0
                t = np.clip(((xy - a0) @ e) / (e @ e), 0, 1)
                cand = a0 + t[:, None] * e
                dist = np.linalg.norm(xy - cand, axis=1)
                if best is None:
                    best, bd = cand, dist
                else:
                    upd = dist < bd
                    best[upd], bd[upd] = cand[upd], dist[upd]
            direction = xy - best
            nrm = np.linalg.norm(direction, axis=1, keepdims=True)
            ok = nrm[:, 0] > 1e-12
            s[ok, 1:3] = best[ok] + S.rho * direction[ok] / nrm[ok]
            return theta, to_body(s, theta, ref), ok
        region = S if isinstance(S, Region) else None
        if region is None:
            return theta, b, np.ones(len(b), bool)
        b = b * _radial_boundary_scale(region, b)[:, None]
        return theta, b, np.all(np.isfinite(b), axis=1)
    # d: clamp the quadratic level into the band, then require safety
    q = np.einsum("ni,ij,nj->n", b, V.C, b)
    lo = V.beta_lower - V.c0 * theta
    hi = V.beta - V.c0 * theta
    target = np.clip(q, np.maximum(lo, 0.0), hi)
    ok = (hi > 0) & (q > 0)
    s = np.sqrt(np.where(ok, target / np.where(q > 0, q, 1.0), 1.0))
    b = b * s[:, None]
    ok &= safe_contains(spec, theta, b, ref)
    return theta, b, ok


def refine(cond: str, V: FunnelFunction, spec: RegionSpec, ref: ReferenceSegment, box: InputBox,
           theta: np.ndarray, b: np.ndarray, steps: int = REFINE_STEPS,
           free_theta: bool | None = None) -> tuple:
    """Adaptive coordinate ascent on the margin, vectorized over candidates."""
    theta = np.array(theta, float)
    b = np.array(b, float)
    theta, b, ok = _project(cond, V, spec, ref, theta, b)
    f = np.where(ok, condition_margins(cond, V, theta, b, ref, box), -np.inf)
    if free_theta is None:
        free_theta = cond in ("c", "d")
    dims = 5 if free_theta else 4
    step = np.full(len(b), 0.05)
    for _ in range(steps):
        improved = np.zeros(len(b), bool)
        for i in range(dims):
            for sign in (1.0, -1.0):
                th2, b2 = theta.copy(), b.copy()
                if i == 4:
                    th2 = th2 + sign * step * ref.T
                else:
                    b2[:, i] += sign * step
                th2, b2, ok2 = _project(cond, V, spec, ref, th2, b2)
                f2 = np.where(ok2, condition_margins(cond, V, th2, b2, ref, box), -np.inf)
                acc = f2 > f
                theta[acc], b[acc], f[acc] = th2[acc], b2[acc], f2[acc]
                improved |= acc
        step = np.where(improved, step, step * 0.5)
    return theta, b, f


def falsify(V: FunnelFunction, spec: RegionSpec, ref: ReferenceSegment, box: InputBox,
            budget: int = 10_000, seed: int = 0, top_k: int = REFINE_TOP_K,
            max_per_condition: int = 4) -> FalsifyResult:
    """Search for states violating the funnel conditions.

    Returns every refined violation (up to ``max_per_condition`` per
    condition, strongest first); an empty list means falsification-clean at
    this budget.  Deterministic for a fixed seed.
    """
    if budget < MIN_BUDGET:
        raise ConfigurationError(f"falsifier budget must be >= {MIN_BUDGET}")
    rng = np.random.default_rng(seed)
    res = FalsifyResult()
    samples = draw_condition_samples(V, spec, ref, budget, rng, res.warnings)
    for w in res.warnings:
        log.warning(w)
    for cond in CONDITIONS:
        theta, b = samples[cond]
        res.n_samples[cond] = int(len(b))
        if len(b) == 0:
            res.worst[cond] = float("-inf")
            continue
        theta = np.broadcast_to(np.asarray(theta, float), (len(b),))
        m = condition_margins(cond, V, theta, b, ref, box)
        idx = np.argsort(-m)[:top_k]
        th_r, b_r, m_r = refine(cond, V, spec, ref, box, theta[idx], b[idx])
        # keep the raw sample where refinement could not stay feasible
        better = m_r >= m[idx]
        th_r = np.where(better, th_r, theta[idx])
        b_r = np.where(better[:, None], b_r, b[idx])
        m_r = condition_margins(cond, V, th_r, b_r, ref, box)
        res.worst[cond] = float(max(m.max(), m_r.max()))
        order = np.argsort(-m_r)
        found = []
        for j in order:
            if m_r[j] > 0 and len(found) < max_per_condition:
                if any(np.allclose(b_r[j], f.b, atol=1e-6) for f in found):
                    continue
                found.append(Counterexample(cond, float(th_r[j]), [float(x) for x in b_r[j]],
                                            float(m_r[j])))
        if not found:
            viol = np.flatnonzero(m > 0)
            for j in viol[np.argsort(-m[viol])][:max_per_condition]:
                found.append(Counterexample(cond, float(theta[j]), [float(x) for x in b[j]],
                                            float(m[j])))
        res.counterexamples.extend(found)
    res.counterexamples.sort(key=lambda c: -c.margin)
    return res


# ------------------------------------------------------------ margin profile

def certify_margin_profile(V: FunnelFunction, spec: RegionSpec, ref: ReferenceSegment,
                           box: InputBox, grid: int = 50, per_theta: int = 2000,
                           seed: int = 0) -> np.ndarray:
    """Rows ``(theta, worst decrease rate)`` over sampled band states at each theta.

    The decrease rate is ``-min_v Vdot``; condition ``d`` with margin ``lambda``
    holds at the samples iff every entry is ``> lambda``.  The sample set does
    not depend on the input box, so shrinking the box can only lower entries.
    """
    if grid < 10:
        raise ValueError("grid must have at least 10 theta points")
    rng = np.random.default_rng(seed)
    rows = []
    for th in np.linspace(0.0, ref.T, grid):
        d = rng.standard_normal((per_theta, 4))
        q = np.einsum("ni,ij,nj->n", d, V.C, d)
        lev = V.beta_lower + (V.beta - V.beta_lower) * np.r_[0.0, 1.0, rng.random(per_theta - 2)]
        r = lev - V.c0 * th
        good = (r > 0) & (q > 0)
        b = d[good] * np.sqrt(r[good] / q[good])[:, None]
        b = b[safe_contains(spec, np.full(len(b), th), b, ref)]
        if len(b) == 0:
            rows.append((th, np.inf))
            continue
        a, g = V.lie_derivative_affine(th, b, ref)
        lo, hi = box.affine_bounds()
        rows.append((th, float(-np.max(box_min(a, g, lo, hi)))))
    return np.array(rows)


def write_margin_profile(path, table: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["theta", "margin"])
        for th, m in table:
            w.writerow([f"{th:.9g}", f"{m:.9g}"])
