"""Counterexample-guided synthesis of funnel parameters.

``V(theta, b) = b^T C b + c0 theta`` is linear in ``p`` = (upper triangle of
``C`` row by row, ``c0``), so every funnel condition checked at a concrete
state (and, for the decrease condition, a concrete demonstrated input)
becomes one linear inequality on ``p``.  Candidates are Chebyshev centres
of the accumulated polytope; the falsifier supplies new witnesses and the
MPC demonstrator supplies the inputs for decrease rows.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linprog

from .demo import DemonstratorError, MpcConfig, demonstrate
from .dynamics import ControlInput, InputBox
from .funnel import FunnelFunction
from .reference import ReferenceSegment, body_deviation_field, safe_contains, to_body
from .regions import ObstacleComplement, Region, RegionSpec
from .verify import Counterexample, falsify

log = logging.getLogger(__name__)

N_PARAMS = 11
ROW_DELTA = 1e-3
EPS_PD = 1e-3
P_MAX = 1e3
R_MIN = 1e-9
_IU = np.triu_indices(4)
_WEIGHT = np.where(_IU[0] == _IU[1], 1.0, 2.0)


class LPError(RuntimeError):
    """The LP solver failed for numerical reasons (distinct from infeasibility)."""


# ------------------------------------------------------------ parameters

def params_to_funnel(p, beta: float = 1.0, beta_lower: float = 0.7, lam: float = 0.02) -> FunnelFunction:
    p = np.asarray(p, dtype=float)
    C = np.zeros((4, 4))
    C[_IU] = p[:10]
    C = C + C.T - np.diag(np.diag(C))
    return FunnelFunction(C, float(p[10]), beta, beta_lower, lam)


def funnel_to_params(V: FunnelFunction) -> np.ndarray:
    return np.r_[V.C[_IU], V.c0]


def value_features(theta, b) -> np.ndarray:
    """``phi`` with ``V(theta, b) = phi . p``."""
    b = np.asarray(b, dtype=float)
    quad = b[..., _IU[0]] * b[..., _IU[1]] * _WEIGHT
    th = np.broadcast_to(np.asarray(theta, float), quad.shape[:-1])
    return np.concatenate([quad, th[..., None]], axis=-1)


def derivative_features(theta, b, v, ref: ReferenceSegment) -> np.ndarray:
    """``psi`` with ``Vdot(theta, b, v) = psi . p`` for affine inputs ``v``."""
    b = np.asarray(b, dtype=float)
    z = body_deviation_field(b, theta, v, ref)
    db = z[..., 1:]
    i, j = _IU
    quad = (db[..., i] * b[..., j] + b[..., i] * db[..., j]) * _WEIGHT
    return np.concatenate([quad, z[..., :1]], axis=-1)


# ------------------------------------------------------------ constraints

@dataclass
class ConstraintSet:
    """Rows ``A p <= rhs`` plus the box ``|p_i| <= p_max`` (kept implicitly)."""

    p_max: float = P_MAX
    A: list = field(default_factory=list)
    rhs: list = field(default_factory=list)
    provenance: list = field(default_factory=list)

    def add(self, a, rhs: float, tag: dict) -> None:
        a = np.asarray(a, dtype=float)
        if a.shape != (N_PARAMS,) or not np.all(np.isfinite(a)) or not np.isfinite(rhs):
            raise ValueError("constraint rows must be finite 11-vectors")
        self.A.append(a)
        self.rhs.append(float(rhs))
        self.provenance.append(tag)

    def extend(self, rows) -> None:
        for a, r, tag in rows:
            self.add(a, r, tag)

    def __len__(self) -> int:
        return len(self.A)

    def matrices(self) -> tuple[np.ndarray, np.ndarray]:
        """All rows including the bounding box."""
        box = np.vstack([np.eye(N_PARAMS), -np.eye(N_PARAMS)])
        A = np.vstack([np.array(self.A).reshape(-1, N_PARAMS), box])
        b = np.r_[np.array(self.rhs), np.full(2 * N_PARAMS, self.p_max)]
        return A, b

    def slack(self, p) -> np.ndarray:
        A, b = self.matrices()
        return b - A @ np.asarray(p, dtype=float)


@dataclass
class CenterResult:
    status: str            # "ok" or "infeasible"
    center: np.ndarray | None
    radius: float


def chebyshev_center(cs: ConstraintSet, r_min: float = R_MIN) -> CenterResult:
    """Centre of the largest ball inside the polytope (HiGHS LP)."""
    A, b = cs.matrices()
    norms = np.linalg.norm(A, axis=1)
    keep = norms > 0
    if np.any(b[~keep] < 0):
        return CenterResult("infeasible", None, -np.inf)
    A, b, norms = A[keep], b[keep], norms[keep]
    n = A.shape[1]
    c = np.zeros(n + 1)
    c[-1] = -1.0
    A_ub = np.hstack([A, norms[:, None]])
    res = linprog(c, A_ub=A_ub, b_ub=b, bounds=[(None, None)] * n + [(None, cs.p_max)],
                  method="highs")
    if res.status == 2:
        return CenterResult("infeasible", None, -np.inf)
    if res.status != 0:
        raise LPError(f"Chebyshev LP failed: {res.message}")
    r = float(res.x[-1])
    if r < r_min:
        return CenterResult("infeasible", None, r)
    return CenterResult("ok", res.x[:n], r)


def constraints_from_counterexample(cx: Counterexample, demo_input, spec: RegionSpec,
                                    ref: ReferenceSegment, beta: float = 1.0, lam: float = 0.02,
                                    delta: float = ROW_DELTA, l: float | None = None,
                                    band_weight: float = 0.0, beta_lower: float = 0.7) -> list:
    """Linear rows ``(a, rhs, tag)`` excluding the candidate that produced ``cx``.

    A decrease row is ``Vdot(v*) + mu (V - beta_lower) <= -lambda - delta``
    with ``mu = band_weight``.  With ``mu = 0`` it is the plain demonstrated
    decrease; ``mu > 0`` relaxes it for parameters that put the witness below
    the band, where no decrease is owed, and still cuts off the candidate.
    """
    b = np.asarray(cx.b, dtype=float)
    tag = {"condition": cx.condition, "theta": cx.theta, "b": list(map(float, b))}
    if cx.condition == "a":
        return [(value_features(0.0, b), beta - delta, tag)]
    if cx.condition == "b":
        return [(-value_features(ref.T, b), -(beta + delta), tag)]
    if cx.condition == "c":
        return [(-value_features(cx.theta, b), -(beta + delta), tag)]
    if cx.condition == "d":
        if demo_input is None:
            raise ValueError("a decrease witness needs a demonstrated input")
        if isinstance(demo_input, ControlInput):
            v = demo_input.affine() if l is None else demo_input.affine(l)
        else:
            v = np.asarray(demo_input, dtype=float)
        tag = dict(tag, input=list(map(float, v)))
        row = derivative_features(cx.theta, b, v, ref)
        if band_weight:
            row = row + band_weight * value_features(cx.theta, b)
        return [(row, -lam - delta + band_weight * beta_lower, tag)]
    raise ValueError(f"unknown condition {cx.condition!r}")


def pd_cut(p, eps: float = EPS_PD) -> list:
    """Eigenvector cuts ``e^T C e >= eps`` for every eigenvalue of ``C`` below ``eps``."""
    C = params_to_funnel(p).C
    w, U = np.linalg.eigh(C)
    rows = []
    for k in np.flatnonzero(w < eps):
        e = U[:, k]
        rows.append((-value_features(0.0, e), -eps, {"condition": "pd", "vector": e.tolist()}))
    return rows


# ------------------------------------------------------------ synthesis

@dataclass
class SynthesisConfig:
    mode: str = "pf"
    max_iterations: int = 300
    loop_budget: int = 10_000
    final_budget: int = 100_000
    # independent final checks; thin violations slip past a single seed
    final_seeds: int = 100
    # multiplier on (V - beta_lower) in decrease rows; see constraints_from_counterexample.
    # Each fallback restarts the loop when the previous weight runs the LP infeasible.
    band_weight: float = 0.0
    band_weight_fallbacks: tuple = (0.25, 1.0)
    beta: float = 1.0
    beta_lower: float = 0.7
    lam: float = 0.02
    seed_boundary_rows: int = 200
    seed_demos: int = 50
    demos_per_iteration: int = 4
    max_seconds: float | None = None
    box: InputBox = field(default_factory=InputBox)
    mpc: MpcConfig = field(default_factory=MpcConfig)

    def __post_init__(self):
        if self.mode not in ("pf", "tt"):
            raise ValueError("mode must be 'pf' or 'tt'")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.final_budget < self.loop_budget:
            raise ValueError("final falsifier budget must not be below the loop budget")
        self.band_weight_fallbacks = tuple(float(w) for w in self.band_weight_fallbacks)
        if min((self.band_weight,) + self.band_weight_fallbacks) < 0:
            raise ValueError("band weights must be non-negative")
        if self.final_seeds < 1:
            raise ValueError("final_seeds must be >= 1")

    @property
    def input_box(self) -> InputBox:
        return self.box.trajectory_tracking() if self.mode == "tt" else self.box

    def to_dict(self) -> dict:
        return {"mode": self.mode, "max_iterations": self.max_iterations,
                "loop_budget": self.loop_budget, "final_budget": self.final_budget,
                "final_seeds": self.final_seeds, "band_weight": self.band_weight,
                "band_weight_fallbacks": list(self.band_weight_fallbacks),
                "beta": self.beta, "beta_lower": self.beta_lower, "lambda": self.lam,
                "seed_boundary_rows": self.seed_boundary_rows, "seed_demos": self.seed_demos,
                "demos_per_iteration": self.demos_per_iteration, "max_seconds": self.max_seconds,
                "input_box": self.box.to_dict(), "mpc": self.mpc.to_dict()}


@dataclass
class SynthesisReport:
    outcome: str                     # found | infeasible | budget-exhausted
    iterations: int
    funnel: FunnelFunction | None
    log: list = field(default_factory=list)
    n_rows: int = 0
    seconds: float = 0.0
    config: dict = field(default_factory=dict)
    final_check: dict | None = None

    def to_dict(self) -> dict:
        return {"outcome": self.outcome, "iterations": self.iterations,
                "funnel": None if self.funnel is None else self.funnel.to_dict(),
                "n_rows": self.n_rows, "seconds": self.seconds, "config": self.config,
                "final_check": self.final_check, "log": self.log}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))


def _origin_row(ref: ReferenceSegment, beta_lower: float) -> tuple:
    """``V(T, 0) <= beta_lower - delta``: the reference itself must stay below the band.

    At ``b = 0`` the derivative is ``c0 u0`` whatever the steering and thrust,
    so a band state on the reference can never decrease when ``c0 > 0``.
    """
    return (value_features(ref.T, np.zeros(4)), beta_lower - ROW_DELTA, {"condition": "origin"})


def _boundary_rows(spec: RegionSpec, ref: ReferenceSegment, n: int, beta: float,
                   rng: np.random.Generator) -> list:
    rows = []
    for b in spec.initial.boundary_samples(n, rng):
        rows.append((value_features(0.0, b), beta - ROW_DELTA, {"condition": "a", "seed": True}))
    for b in spec.goal.boundary_samples(n, rng):
        rows.append((-value_features(ref.T, b), -(beta + ROW_DELTA), {"condition": "b", "seed": True}))
    ths = rng.random(n) * ref.T
    S = spec.safe
    if isinstance(S, ObstacleComplement):
        from .reference import to_inertial
        xy = S.boundary_samples(n, rng)
        s = to_inertial(np.zeros((n, 4)), ths, ref)
        s[:, 1:3] = xy
        bs = to_body(s, ths, ref)
    elif isinstance(S, Region):
        bs = S.boundary_samples(n, rng)
    else:
        bs = np.stack([S(t).boundary_samples(1, rng)[0] for t in ths])
    for t, b in zip(ths, bs):
        rows.append((-value_features(t, b), -(beta + ROW_DELTA),
                     {"condition": "c", "seed": True, "theta": float(t)}))
    return rows


def _band_states(V: FunnelFunction, spec: RegionSpec, ref: ReferenceSegment, n: int,
                 rng: np.random.Generator) -> np.ndarray:
    """Up to ``n`` states ``(theta, b)`` in the safe set with ``beta_lower <= V <= beta``."""
    out = []
    for _ in range(50):
        m = 4 * n
        th = rng.random(m) * ref.T
        d = rng.standard_normal((m, 4))
        q = np.einsum("ni,ij,nj->n", d, V.C, d)
        lev = V.beta_lower + (V.beta - V.beta_lower) * rng.random(m)
        r = lev - V.c0 * th
        ok = (r > 0) & (q > 0)
        b = d[ok] * np.sqrt(r[ok] / q[ok])[:, None]
        th = th[ok]
        keep = safe_contains(spec, th, b, ref)
        out.extend(np.c_[th[keep], b[keep]])
        if len(out) >= n:
            break
    return np.array(out[:n]).reshape(-1, 5)


class Synthesizer:
    """State of one synthesis run; :meth:`run` drives the loop."""

    def __init__(self, spec: RegionSpec, ref: ReferenceSegment, cfg: SynthesisConfig,
                 seed: int = 0, scenario: str = ""):
        self.spec, self.ref, self.cfg, self.seed = spec, ref, cfg, seed
        self.scenario = scenario
        self.box = cfg.input_box
        self.mpc = cfg.mpc.with_box(self.box)
        self.cs = ConstraintSet()
        self.log: list = []
        self.rng = np.random.default_rng(seed)
        self._demo_count = 0

    def funnel(self, p) -> FunnelFunction:
        c = self.cfg
        return params_to_funnel(p, c.beta, c.beta_lower, c.lam)

    def demonstrate(self, theta: float, b) -> np.ndarray:
        self._demo_count += 1
        u = demonstrate(np.r_[theta, b], self.ref, self.mpc, seed=self.seed * 7919 + self._demo_count)
        return u.affine(self.box.l)

    def decrease_rows(self, theta, b) -> list:
        cx = Counterexample("d", float(theta), list(map(float, b)), 0.0)
        try:
            v = self.demonstrate(theta, b)
        except DemonstratorError as exc:
            log.warning("demonstrator failed at theta=%.3f: %s", theta, exc)
            return []
        c = self.cfg
        return constraints_from_counterexample(cx, v, self.spec, self.ref, c.beta, c.lam,
                                               band_weight=c.band_weight, beta_lower=c.beta_lower)

    def propose(self) -> tuple[str, np.ndarray | None, int]:
        """Chebyshev centre made positive definite by lazy cuts; returns (status, p, cuts)."""
        cuts = 0
        for _ in range(100):
            res = chebyshev_center(self.cs)
            if res.status != "ok":
                return "infeasible", None, cuts
            rows = pd_cut(res.center)
            if not rows:
                return "ok", res.center, cuts
            self.cs.extend(rows)
            cuts += len(rows)
        return "infeasible", None, cuts

    def seed_rows(self) -> None:
        c = self.cfg
        self.cs.extend([_origin_row(self.ref, c.beta_lower)])
        self.cs.extend(_boundary_rows(self.spec, self.ref, c.seed_boundary_rows, c.beta, self.rng))
        if c.seed_demos <= 0:
            return
        status, p, _ = self.propose()
        if status != "ok":
            return
        for th, *b in _band_states(self.funnel(p), self.spec, self.ref, c.seed_demos, self.rng):
            self.cs.extend(self.decrease_rows(th, b))

    def run(self) -> SynthesisReport:
        c = self.cfg
        t0 = time.perf_counter()
        self.seed_rows()
        outcome, found = "budget-exhausted", None
        final_check = None
        it = 0
        while it < c.max_iterations:
            if c.max_seconds is not None and time.perf_counter() - t0 > c.max_seconds:
                break
            it += 1
            status, p, cuts = self.propose()
            if status != "ok":
                outcome = "infeasible"
                break
            V = self.funnel(p)
            res = falsify(V, self.spec, self.ref, self.box, budget=c.loop_budget,
                          seed=self.seed * 100_003 + it)
            entry = {"iteration": it, "candidate": p.tolist(), "pd_cuts": cuts,
                     "min_eig": V.min_eig(), "worst": res.worst,
                     "counterexamples": [x.to_dict() for x in res.counterexamples]}
            if res.clean:
                finals = []
                for j in range(c.final_seeds):
                    final = falsify(V, self.spec, self.ref, self.box, budget=c.final_budget,
                                    seed=self.seed * 100_003 + 50_000 + 1000 * j + it)
                    finals.append(final.to_dict())
                    if not final.clean:
                        break
                entry["final"] = finals
                if final.clean:
                    self.log.append(entry)
                    outcome, found, final_check = "found", V, finals
                    break
                res = final
            rows = []
            n_demo = 0
            for cx in res.counterexamples:
                if cx.condition == "d":
                    if n_demo >= c.demos_per_iteration:
                        continue
                    n_demo += 1
                    rows.extend(self.decrease_rows(cx.theta, cx.b))
                else:
                    rows.extend(constraints_from_counterexample(cx, None, self.spec, self.ref,
                                                                c.beta, c.lam))
            # every new row must cut off the current candidate
            rows = [r for r in rows if r[0] @ p > r[1]]
            entry["rows_added"] = len(rows)
            self.log.append(entry)
            log.info("iteration %d: %d counterexamples, %d rows, worst %s", it,
                     len(res.counterexamples), len(rows), res.worst)
            if not rows:
                # the demonstrator could not produce a separating input
                entry["note"] = "no separating row"
                continue
            self.cs.extend(rows)
        cfgd = c.to_dict()
        cfgd.update(seed=self.seed, scenario=self.scenario)
        return SynthesisReport(outcome, it, found, self.log, len(self.cs),
                               time.perf_counter() - t0, cfgd, final_check)


def synthesize(spec: RegionSpec, ref: ReferenceSegment, mode: str = "pf",
               cfg: SynthesisConfig | None = None, seed: int = 0, scenario: str = "") -> SynthesisReport:
    """Run the counterexample-guided loop; deterministic for a fixed seed (without ``max_seconds``).

    When the constraint LP becomes infeasible the loop restarts from scratch
    with the next band weight, spending what is left of the iteration budget.
    """
    cfg = cfg or SynthesisConfig(mode=mode)
    if cfg.mode != mode:
        cfg = SynthesisConfig(**{**cfg.__dict__, "mode": mode})
    weights = (cfg.band_weight,) + cfg.band_weight_fallbacks
    used, seconds, log_all, attempts = 0, 0.0, [], []
    for w in weights:
        left = cfg.max_iterations - used
        if left < 1:
            break
        sub = SynthesisConfig(**{**cfg.__dict__, "band_weight": w, "max_iterations": left,
                                 "band_weight_fallbacks": ()})
        if cfg.max_seconds is not None:
            sub.max_seconds = max(cfg.max_seconds - seconds, 0.0)
        rep = Synthesizer(spec, ref, sub, seed, scenario).run()
        used += rep.iterations
        seconds += rep.seconds
        for e in rep.log:
            e["band_weight"] = w
        log_all.extend(rep.log)
        attempts.append({"band_weight": w, "outcome": rep.outcome, "iterations": rep.iterations})
        if rep.outcome != "infeasible":
            break
    rep.iterations, rep.seconds, rep.log = used, seconds, log_all
    rep.config = {**cfg.to_dict(), "seed": seed, "scenario": scenario, "attempts": attempts}
    return rep
