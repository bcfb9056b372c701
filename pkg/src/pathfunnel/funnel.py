"""Control funnel functions ``V(theta, b) = b^T C b + c0 theta`` and their conditions.

Condition margins are signed so that a positive value is a violation:

* ``a``: ``V(0, b) - beta`` for ``b`` in the initial set,
* ``b``: ``beta + delta - V(T, b)`` for ``b`` outside the goal interior,
* ``c``: ``beta + delta - V(theta, b)`` for ``b`` outside the safe interior,
* ``d``: ``min_v Vdot + lambda`` over the input box, for ``b`` in the safe set
  with ``beta_lower <= V <= beta``.

The existential over inputs in ``d`` is decided exactly because ``Vdot`` is
affine in ``(u0, w, thrust)``; the universal over states is only sampled, so
a clean report means "no violation found at these samples", not a proof.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .dynamics import InputBox
from .reference import ReferenceSegment, body_affine_form

LEVEL_MARGIN = 1e-6
CONDITIONS = ("a", "b", "c", "d")


@dataclass(frozen=True)
class FunnelFunction:
    C: np.ndarray
    c0: float
    beta: float = 1.0
    beta_lower: float = 0.7
    lam: float = 0.02

    def __post_init__(self):
        C = np.asarray(self.C, dtype=float)
        if C.shape != (4, 4):
            raise ValueError("C must be 4x4")
        if not np.allclose(C, C.T, atol=1e-12):
            raise ValueError("C must be symmetric")
        if self.beta_lower > self.beta:
            raise ValueError("beta_lower must not exceed beta")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        object.__setattr__(self, "C", 0.5 * (C + C.T))

    def min_eig(self) -> float:
        return float(np.linalg.eigvalsh(self.C)[0])

    def is_positive_definite(self, eps: float = 0.0) -> bool:
        return self.min_eig() > eps

    def value(self, theta, b) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        return np.einsum("...i,ij,...j->...", b, self.C, b) + self.c0 * np.asarray(theta, float)

    def __call__(self, theta, b):
        return self.value(theta, b)

    def scaled(self, s: float) -> "FunnelFunction":
        return FunnelFunction(s * self.C, s * self.c0, s * self.beta, s * self.beta_lower, s * self.lam)

    def with_(self, **kw) -> "FunnelFunction":
        d = dict(C=self.C, c0=self.c0, beta=self.beta, beta_lower=self.beta_lower, lam=self.lam)
        d.update(kw)
        return FunnelFunction(**d)

    def lie_derivative_affine(self, theta, b, ref: ReferenceSegment) -> tuple[np.ndarray, np.ndarray]:
        """``(a, g)`` with ``Vdot = a + g . (u0, w, thrust)``."""
        b = np.asarray(b, dtype=float)
        drift, G = body_affine_form(theta, b, ref)
        grad_b = 2.0 * np.einsum("ij,...j->...i", self.C, np.broadcast_to(b, drift.shape[:-1] + (4,)))
        a = self.c0 * drift[..., 0] + np.einsum("...i,...i->...", grad_b, drift[..., 1:])
        g = self.c0 * G[..., 0, :] + np.einsum("...i,...ij->...j", grad_b, G[..., 1:, :])
        return a, g

    def lie_derivative(self, theta, b, v, ref: ReferenceSegment) -> np.ndarray:
        a, g = self.lie_derivative_affine(theta, b, ref)
        return a + np.einsum("...j,...j->...", g, np.asarray(v, dtype=float))

    def to_dict(self) -> dict:
        return {"C": [list(map(float, r)) for r in self.C], "c0": float(self.c0),
                "beta": self.beta, "beta_lower": self.beta_lower, "lambda": self.lam}

    @classmethod
    def from_dict(cls, d: dict) -> "FunnelFunction":
        return cls(np.array(d["C"], dtype=float), float(d["c0"]), float(d["beta"]),
                   float(d["beta_lower"]), float(d["lambda"]))


def box_min(a, g, lo, hi) -> np.ndarray:
    """Exact ``min_{lo <= v <= hi} a + g . v`` (coordinate-wise sign rule)."""
    g = np.asarray(g, dtype=float)
    return np.asarray(a) + np.sum(np.minimum(g * lo, g * hi), axis=-1)


def box_argmin(g, lo, hi) -> np.ndarray:
    g = np.asarray(g, dtype=float)
    return np.where(g > 0, lo, np.where(g < 0, hi, 0.5 * (lo + hi)))


def decrease_margin(V: FunnelFunction, theta, b, ref: ReferenceSegment, box: InputBox) -> np.ndarray:
    """``min_v Vdot + lambda``; positive means condition ``d`` fails at that state."""
    a, g = V.lie_derivative_affine(theta, b, ref)
    lo, hi = box.affine_bounds()
    return box_min(a, g, lo, hi) + V.lam


def condition_margins(cond: str, V: FunnelFunction, theta, b, ref: ReferenceSegment,
                      box: InputBox, delta: float = LEVEL_MARGIN) -> np.ndarray:
    """Per-sample signed margin for one condition (positive = violated).

    The caller is responsible for drawing ``(theta, b)`` from that
    condition's domain.
    """
    if cond == "a":
        return V.value(0.0, b) - V.beta
    if cond == "b":
        return V.beta + delta - V.value(ref.T, b)
    if cond == "c":
        return V.beta + delta - V.value(theta, b)
    if cond == "d":
        return decrease_margin(V, theta, b, ref, box)
    raise ValueError(f"unknown condition {cond!r}")


@dataclass
class ConditionResult:
    status: str
    n_samples: int
    worst_margin: float
    witness_theta: float | None = None
    witness_b: list | None = None

    @property
    def violated(self) -> bool:
        return self.status == "violated"


@dataclass
class ConditionReport:
    results: dict = field(default_factory=dict)
    note: str = "sampled check: verified-at-samples is not a proof"

    @property
    def clean(self) -> bool:
        return not any(r.violated for r in self.results.values())

    def first_violation(self) -> tuple[str, ConditionResult] | None:
        for k, r in self.results.items():
            if r.violated:
                return k, r
        return None

    def to_dict(self) -> dict:
        return {"clean": self.clean, "note": self.note,
                "conditions": {k: asdict(r) for k, r in self.results.items()}}


def summarize(margins: np.ndarray, theta, b) -> ConditionResult:
    margins = np.asarray(margins, dtype=float)
    if margins.size == 0:
        raise ValueError("empty sample set for a condition")
    i = int(np.argmax(margins))
    th = np.broadcast_to(np.asarray(theta, float), margins.shape)
    worst = float(margins[i])
    return ConditionResult("violated" if worst > 0 else "verified-at-samples", int(margins.size),
                           worst, float(th[i]), [float(x) for x in np.asarray(b)[i]])


def check_funnel_conditions(V: FunnelFunction, ref: ReferenceSegment, box: InputBox,
                            samples: dict) -> ConditionReport:
    """Evaluate each condition on pre-drawn samples ``{cond: (theta, b)}``.

    Use :func:`pathfunnel.verify.draw_condition_samples` to build the sample
    dictionary from a region spec.
    """
    report = ConditionReport()
    for cond in CONDITIONS:
        if cond not in samples:
            continue
        theta, b = samples[cond]
        if len(b) == 0:
            if cond == "d":
                report.results[cond] = ConditionResult("verified-at-samples", 0, -np.inf)
                continue
            raise ValueError(f"empty sample set for condition {cond}")
        report.results[cond] = summarize(condition_margins(cond, V, theta, b, ref, box), theta, b)
    return report


def check_global_clf(V: FunnelFunction, ref: ReferenceSegment, box: InputBox,
                     theta, b) -> ConditionReport:
    """Global CLF test on samples: (A) ``b^T C b > 0``, (B) some input gives ``Vdot < 0``.

    Only the quadratic part is used; ``c0`` is ignored (treated as zero).
    """
    Vq = V.with_(c0=0.0, lam=0.0)
    b = np.asarray(b, dtype=float)
    nz = np.linalg.norm(b, axis=-1) > 0
    b, th = b[nz], np.broadcast_to(np.asarray(theta, float), nz.shape)[nz]
    report = ConditionReport()
    report.results["A"] = summarize(-Vq.value(0.0, b), th, b)
    if Vq.min_eig() <= 0 and not report.results["A"].violated:
        report.results["A"].status = "violated"
    report.results["B"] = summarize(decrease_margin(Vq, th, b, ref, box), th, b)
    return report


def save_certificate(path, V: FunnelFunction, scenario: str, mode: str, box: InputBox,
                     budgets: dict | None = None, extra: dict | None = None) -> None:
    d = {"format": "pathfunnel-certificate/1", "scenario": scenario, "mode": mode,
         "funnel": V.to_dict(), "input_box": box.to_dict(), "budgets": budgets or {},
         "status": "falsification-clean at the recorded sample budgets (not a formal proof)"}
    if extra:
        d.update(extra)
    Path(path).write_text(json.dumps(d, indent=2, sort_keys=True))


def load_certificate(path) -> dict:
    d = json.loads(Path(path).read_text())
    if d.get("format") != "pathfunnel-certificate/1":
        raise ValueError(f"{path}: not a certificate file")
    d["funnel"] = FunnelFunction.from_dict(d["funnel"])
    d["input_box"] = InputBox.from_dict(d["input_box"])
    return d
