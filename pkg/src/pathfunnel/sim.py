"""Closed-loop simulation of funnel controllers on the bicycle model.

The plant is integrated with RK4 at ``dt`` and the controller is sampled
every ``dt_ctrl`` (zero-order hold).  Several segments can be chained: when
the path parameter reaches the end of a segment with the deviation in its
goal set, the controller restarts on the next one.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .control import ControllerState
from .dynamics import DIVERGENCE_BOUND, ControlInput, bicycle_vector_field, rk4_step
from .funnel import FunnelFunction
from .reference import ReferenceSegment, safe_contains, to_body, to_inertial
from .regions import Region, RegionSpec

log = logging.getLogger(__name__)

DISTURBANCE_KINDS = ("none", "state-impulse", "input-noise", "parameter-error")


@dataclass(frozen=True)
class Disturbance:
    """What goes wrong in the plant.

    ``state-impulse`` adds ``offset`` (inertial ``alpha, x, y, v``) at ``time``;
    ``input-noise`` adds Gaussian noise of ``std`` to ``(gamma, thrust)`` before
    saturation; ``parameter-error`` scales the plant wheelbase by ``l_scale``.
    """

    kind: str = "none"
    time: float = 0.0
    offset: tuple = (0.0, 0.0, 0.0, 0.0)
    std: tuple = (0.0, 0.0)
    seed: int = 0
    l_scale: float = 1.0

    def __post_init__(self):
        if self.kind not in DISTURBANCE_KINDS:
            raise ValueError(f"unknown disturbance {self.kind!r}; expected one of {DISTURBANCE_KINDS}")
        if len(self.offset) != 4 or len(self.std) != 2:
            raise ValueError("offset needs 4 entries and std 2")
        if any(s < 0 for s in self.std):
            raise ValueError("noise std must be non-negative")
        if self.time < 0:
            raise ValueError("impulse time must be non-negative")
        if not self.l_scale > 0:
            raise ValueError("wheelbase scale must be positive")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "time": self.time, "offset": list(self.offset),
                "std": list(self.std), "seed": self.seed, "l_scale": self.l_scale}

    @classmethod
    def from_dict(cls, d: dict) -> "Disturbance":
        d = dict(d)
        for k in ("offset", "std"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


NO_DISTURBANCE = Disturbance()


@dataclass(frozen=True)
class Leg:
    """One segment of a run: reference, funnel and region specification."""

    ref: ReferenceSegment
    V: FunnelFunction
    spec: RegionSpec


def chain_legs(legs: list[Leg]) -> list[Leg]:
    """Place each leg where the previous one ends.

    Headings are shifted by whole turns so the reference heading is
    continuous, and positions are translated onto the previous end point.
    Closed curves (circle laps, oval halves) need no translation.
    """
    out = [legs[0]]
    for leg in legs[1:]:
        end = out[-1].ref.state(out[-1].ref.T)
        start = leg.ref.state(0.0)
        dalpha = 2 * math.pi * round((end[0] - start[0]) / (2 * math.pi))
        # a whole-turn rotation leaves positions fixed, so translate by the gap
        d = end[1:3] - start[1:3]
        if dalpha or np.linalg.norm(d) > 1e-9:
            rotated = leg.ref.shifted(dalpha, float(d[0]), float(d[1]))
        else:
            rotated = leg.ref
        out.append(Leg(rotated, leg.V, leg.spec))
    return out


@dataclass
class TraceRecord:
    t: np.ndarray             # (n,)
    theta: np.ndarray         # (n,)
    leg: np.ndarray           # (n,) segment index
    state: np.ndarray         # (n, 4) inertial
    body: np.ndarray          # (n, 4)
    inputs: np.ndarray        # (n, 3) u0, gamma, thrust applied after the sample
    V: np.ndarray             # (n,)
    safe: np.ndarray          # (n,) bool
    in_goal: np.ndarray       # (n,) bool, meaningful at theta = T
    clearance: np.ndarray     # (n,) obstacle clearance, nan without an obstacle
    beta: float
    T_last: float
    n_legs: int
    end_reason: str
    meta: dict = field(default_factory=dict)
    verdicts: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.verdicts:
            self.verdicts = compute_verdicts(self)

    @property
    def reached_goal(self) -> bool:
        return self.verdicts["reached_goal"]

    @property
    def t_star(self) -> float | None:
        return self.verdicts["t_star"]

    @property
    def stayed_safe(self) -> bool:
        return self.verdicts["stayed_safe"]

    def speed_steps(self) -> np.ndarray:
        """Absolute speed change between consecutive samples."""
        return np.abs(np.diff(self.state[:, 3]))

    def x_traverse_time(self, distance: float) -> float | None:
        """Time until ``x`` has grown by ``distance`` from its start (linear interpolation)."""
        gain = self.state[:, 1] - self.state[0, 1]
        idx = np.nonzero(gain >= distance)[0]
        if len(idx) == 0:
            return None
        k = idx[0]
        if k == 0:
            return 0.0
        f = (distance - gain[k - 1]) / (gain[k] - gain[k - 1])
        return float(self.t[k - 1] + f * (self.t[k] - self.t[k - 1]))

    def to_csv(self, path) -> None:
        cols = ["t", "theta", "leg", "alpha", "x", "y", "v", "alpha_R", "x_R", "y_R", "v_R",
                "u0", "gamma", "thrust", "V", "safe", "in_goal", "clearance"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for k in range(len(self.t)):
                w.writerow([repr(float(self.t[k])), repr(float(self.theta[k])), int(self.leg[k]),
                            *(repr(float(x)) for x in self.state[k]),
                            *(repr(float(x)) for x in self.body[k]),
                            *(repr(float(x)) for x in self.inputs[k]),
                            repr(float(self.V[k])), int(self.safe[k]), int(self.in_goal[k]),
                            repr(float(self.clearance[k]))])

    def summary(self) -> dict:
        return {"verdicts": self.verdicts, "end_reason": self.end_reason, "n_samples": len(self.t),
                "beta": self.beta, "T_last": self.T_last, "n_legs": self.n_legs, "meta": self.meta}

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)

    @classmethod
    def from_csv(cls, path, meta: dict) -> "TraceRecord":
        """Rebuild a trace from its CSV series and JSON summary."""
        data = np.genfromtxt(path, delimiter=",", names=True)
        data = np.atleast_1d(data)
        return cls(t=data["t"], theta=data["theta"], leg=data["leg"].astype(int),
                   state=np.stack([data[c] for c in ("alpha", "x", "y", "v")], axis=1),
                   body=np.stack([data[c] for c in ("alpha_R", "x_R", "y_R", "v_R")], axis=1),
                   inputs=np.stack([data[c] for c in ("u0", "gamma", "thrust")], axis=1),
                   V=data["V"], safe=data["safe"].astype(bool), in_goal=data["in_goal"].astype(bool),
                   clearance=data["clearance"], beta=meta["beta"], T_last=meta["T_last"],
                   n_legs=meta["n_legs"], end_reason=meta["end_reason"], meta=meta.get("meta", {}))


def compute_verdicts(tr: TraceRecord) -> dict:
    """Verdicts derived only from the stored series."""
    last = tr.n_legs - 1
    goal = (tr.leg == last) & (tr.theta >= tr.T_last) & tr.in_goal
    hit = np.nonzero(goal)[0]
    reached = len(hit) > 0
    clear = tr.clearance[np.isfinite(tr.clearance)]
    return {
        "reached_goal": bool(reached),
        "t_star": float(tr.t[hit[0]]) if reached else None,
        "stayed_safe": bool(np.all(tr.safe)),
        "min_obstacle_clearance": float(clear.min()) if len(clear) else None,
        # lateral (cross-track) body coordinate
        "max_y_deviation": float(np.max(np.abs(tr.body[:, 1]))) if len(tr.t) else 0.0,
        "funnel_containment": float(np.mean(tr.V <= tr.beta)) if len(tr.t) else 0.0,
    }


def run_closed_loop(ctrl: ControllerState, legs, x0, disturbance: Disturbance = NO_DISTURBANCE,
                    horizon: float | None = None, dt: float = 0.01,
                    obstacle: Region | None = None, meta: dict | None = None,
                    bound: float = DIVERGENCE_BOUND) -> TraceRecord:
    """Simulate until the last goal is reached, safety is lost, the state diverges or time runs out.

    ``legs`` is a :class:`Leg` or a list of them (already placed, see
    :func:`chain_legs`).  ``ctrl`` is reset onto each leg in turn.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    legs = [legs] if isinstance(legs, Leg) else list(legs)
    if not legs:
        raise ValueError("need at least one leg")
    hold = max(1, int(round(ctrl.dt_ctrl / dt)))
    if abs(hold * dt - ctrl.dt_ctrl) > 1e-12:
        raise ValueError("dt_ctrl must be an integer multiple of dt")
    if horizon is None:
        horizon = 1.5 * sum(leg.ref.T for leg in legs) / ctrl.box.u0_lo
    if disturbance.kind == "state-impulse" and disturbance.time > horizon:
        raise ValueError("impulse time beyond the horizon")
    rng = np.random.default_rng(disturbance.seed)
    l_plant = ctrl.box.l * (disturbance.l_scale if disturbance.kind == "parameter-error" else 1.0)
    glo, ghi = ctrl.box.gamma_lo, ctrl.box.gamma_hi
    tlo, thi = ctrl.box.thrust_lo, ctrl.box.thrust_hi

    k_leg = 0
    ctrl.reset(legs[0].ref, 0.0)
    x = np.asarray(x0.as_array() if hasattr(x0, "as_array") else x0, dtype=float).copy()
    n_steps = int(round(horizon / dt))
    k_impulse = int(round(disturbance.time / dt)) if disturbance.kind == "state-impulse" else -1
    rows = []
    applied = ControlInput(0.0, 0.0, 0.0)
    reason = "horizon"
    for k in range(n_steps + 1):
        t = k * dt
        if k == k_impulse:
            x = x + np.asarray(disturbance.offset, dtype=float)
        leg = legs[k_leg]
        b = to_body(x, ctrl.theta, leg.ref)
        safe = bool(safe_contains(leg.spec, ctrl.theta, b, leg.ref))
        at_end = ctrl.theta >= leg.ref.T
        in_goal = bool(at_end and leg.spec.goal.contains(b))
        if in_goal and k_leg < len(legs) - 1:
            k_leg += 1
            ctrl.reset(legs[k_leg].ref, 0.0)
            leg = legs[k_leg]
            b = to_body(x, 0.0, leg.ref)
            safe = safe and bool(safe_contains(leg.spec, 0.0, b, leg.ref))
            in_goal = False
        clear = float(obstacle.clearance(x[1:3])) if obstacle is not None else math.nan
        if obstacle is not None:
            safe = safe and clear > 0
        theta_rec = ctrl.theta
        if k % hold == 0 and not (in_goal or not safe or k == n_steps):
            applied, _ = ctrl.step(x, hold * dt)
            gamma, thrust = applied.gamma, applied.thrust
            if disturbance.kind == "input-noise":
                gamma += disturbance.std[0] * rng.standard_normal()
                thrust += disturbance.std[1] * rng.standard_normal()
            gamma, thrust = min(max(gamma, glo), ghi), min(max(thrust, tlo), thi)
            applied = ControlInput(applied.u0, gamma, thrust)
        rows.append((t, theta_rec, k_leg, x.copy(), b, (applied.u0, applied.gamma, applied.thrust),
                     float(leg.V.value(theta_rec, b)), safe, in_goal, clear))
        if in_goal:
            reason = "goal"
            break
        if not safe:
            reason = "unsafe"
            break
        if k == n_steps:
            break
        g, th = applied.gamma, applied.thrust
        x = rk4_step(lambda _t, z: bicycle_vector_field(z, g, th, l_plant), t, x, dt)
        if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > bound:
            reason = "diverged"
            break
    return _record(rows, legs, reason, meta or {})


def _record(rows, legs, reason, meta) -> TraceRecord:
    col = list(zip(*rows))
    return TraceRecord(t=np.array(col[0]), theta=np.array(col[1]), leg=np.array(col[2], dtype=int),
                       state=np.array(col[3]), body=np.array(col[4]), inputs=np.array(col[5]),
                       V=np.array(col[6]), safe=np.array(col[7], dtype=bool),
                       in_goal=np.array(col[8], dtype=bool), clearance=np.array(col[9]),
                       beta=legs[-1].V.beta, T_last=legs[-1].ref.T, n_legs=len(legs),
                       end_reason=reason, meta=meta)


# ------------------------------------------------------------------ batches

def sample_region(region: Region, n: int, rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
    """Uniform samples from ``scale * region`` by rejection from its bounding box."""
    lo, hi = region.bbox()
    lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
    out = []
    while sum(len(o) for o in out) < n:
        p = lo + rng.random((max(4 * n, 64), len(lo))) * (hi - lo)
        out.append(scale * p[region.contains(p)])
    return np.concatenate(out)[:n]


def initial_states(ref: ReferenceSegment, region: Region, n: int, seed: int = 0,
                   scale: float = 1.0) -> np.ndarray:
    """Inertial initial states whose deviation at ``theta = 0`` is uniform in ``scale * region``."""
    b = sample_region(region, n, np.random.default_rng(seed), scale)
    return to_inertial(b, 0.0, ref)


def _run_one(args):
    ctrl, legs, x0, dist, horizon, dt, obstacle, meta = args
    return run_closed_loop(ctrl, legs, x0, dist, horizon, dt, obstacle, meta)


def worker_count() -> int:
    """Workers for batches: ``FUNNEL_THREADS`` if set, else 1."""
    try:
        return max(1, int(os.environ.get("FUNNEL_THREADS", "1")))
    except ValueError:
        raise ValueError("FUNNEL_THREADS must be an integer") from None


def batch_experiment(legs, x0s, mode: str = "pf", strategy: str = "min-norm-qp", box=None,
                     disturbance: Disturbance = NO_DISTURBANCE, seed: int = 0,
                     horizon: float | None = None, dt: float = 0.01, dt_ctrl: float = 0.01,
                     obstacle: Region | None = None, workers: int | None = None) -> dict:
    """Run one closed loop per initial state and aggregate the verdicts.

    Per-run noise seeds are ``seed * 1000 + i``.
    """
    from .dynamics import InputBox
    legs = [legs] if isinstance(legs, Leg) else list(legs)
    x0s = np.atleast_2d(np.asarray(x0s, dtype=float))
    if len(x0s) < 1:
        raise ValueError("need at least one run")
    box = box or InputBox()
    jobs = []
    for i, x0 in enumerate(x0s):
        dist = disturbance
        if dist.kind == "input-noise":
            dist = Disturbance(**{**dist.__dict__, "seed": seed * 1000 + i})
        ctrl = ControllerState(legs[0].V, legs[0].ref, mode, strategy, box, dt_ctrl)
        jobs.append((ctrl, legs, x0, dist, horizon, dt, obstacle, {"run": i, "mode": mode}))
    workers = worker_count() if workers is None else workers
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            runs = list(ex.map(_run_one, jobs))
    else:
        runs = [_run_one(j) for j in jobs]
    return {"runs": runs, "aggregate": aggregate(runs)}


def aggregate(runs: list[TraceRecord]) -> dict:
    ok = [r for r in runs if r.reached_goal]
    ts = np.array([r.t_star for r in ok]) if ok else np.array([])
    dev = np.array([r.verdicts["max_y_deviation"] for r in runs])
    clear = [r.verdicts["min_obstacle_clearance"] for r in runs
             if r.verdicts["min_obstacle_clearance"] is not None]
    return {
        "n": len(runs),
        "success_rate": len(ok) / len(runs),
        "safe_rate": float(np.mean([r.stayed_safe for r in runs])),
        "t_star": _stats(ts),
        "max_y_deviation": _stats(dev),
        "min_obstacle_clearance": min(clear) if clear else None,
    }


def _stats(a: np.ndarray) -> dict | None:
    if len(a) == 0:
        return None
    return {"min": float(a.min()), "mean": float(a.mean()), "max": float(a.max())}
