"""Region primitives used for the initial, goal and safe sets.

All regions are vectorized: ``contains`` takes points of shape ``(..., dim)``
and returns a boolean array of shape ``(...)``.  Ball, box and ellipsoid live
in body (deviation) coordinates; :class:`ObstacleComplement` lives in the
inertial x-y plane and is evaluated after transforming a body state back.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np


class Region:
    kind: str = ""
    frame: str = "body"
    dim: int = 4

    def contains(self, pts) -> np.ndarray:
        raise NotImplementedError

    def boundary_samples(self, n: int, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError


def _unit_directions(n: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    d = rng.standard_normal((n, dim))
    nrm = np.linalg.norm(d, axis=1, keepdims=True)
    nrm[nrm == 0] = 1.0
    return d / nrm


@dataclass(frozen=True)
class Ball(Region):
    radius: float
    center: tuple = (0.0, 0.0, 0.0, 0.0)
    kind = "ball"

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("ball radius must be positive")
        object.__setattr__(self, "radius", float(self.radius))
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))

    @property
    def dim(self) -> int:
        return len(self.center)

    def contains(self, pts) -> np.ndarray:
        d = np.asarray(pts, dtype=float) - np.asarray(self.center)
        return np.einsum("...i,...i->...", d, d) <= self.radius ** 2

    def boundary_samples(self, n, rng):
        if n < 1:
            raise ValueError("n must be >= 1")
        return np.asarray(self.center) + self.radius * _unit_directions(n, self.dim, rng)

    def bbox(self):
        c = np.asarray(self.center, dtype=float)
        return c - self.radius, c + self.radius

    def to_dict(self):
        return {"kind": "ball", "radius": self.radius, "center": list(self.center)}


@dataclass(frozen=True)
class Box(Region):
    lo: tuple
    hi: tuple
    kind = "box"

    def __post_init__(self):
        lo, hi = np.asarray(self.lo, float), np.asarray(self.hi, float)
        if lo.shape != hi.shape or not np.all(lo < hi):
            raise ValueError("box needs lo < hi in every coordinate")
        object.__setattr__(self, "lo", tuple(float(x) for x in lo))
        object.__setattr__(self, "hi", tuple(float(x) for x in hi))

    @property
    def dim(self) -> int:
        return len(self.lo)

    def contains(self, pts) -> np.ndarray:
        p = np.asarray(pts, dtype=float)
        return np.all((p >= np.asarray(self.lo)) & (p <= np.asarray(self.hi)), axis=-1)

    def boundary_samples(self, n, rng):
        """Uniform over the box surface (faces chosen by area)."""
        if n < 1:
            raise ValueError("n must be >= 1")
        lo, hi = np.asarray(self.lo, float), np.asarray(self.hi, float)
        width = hi - lo
        face_area = np.array([np.prod(np.delete(width, i)) for i in range(self.dim)])
        axis = rng.choice(self.dim, size=n, p=face_area / face_area.sum())
        pts = lo + rng.random((n, self.dim)) * width
        side = rng.random(n) < 0.5
        pts[np.arange(n), axis] = np.where(side, lo[axis], hi[axis])
        return pts

    def bbox(self):
        return np.asarray(self.lo, float), np.asarray(self.hi, float)

    def to_dict(self):
        return {"kind": "box", "lo": list(self.lo), "hi": list(self.hi)}


@dataclass(frozen=True)
class Ellipsoid(Region):
    """``{p : p^T Q p <= level}``."""

    Q: tuple
    level: float = 1.0
    kind = "ellipsoid"

    def __post_init__(self):
        Q = np.asarray(self.Q, dtype=float)
        if not self.level > 0:
            raise ValueError("ellipsoid level must be positive")
        if Q.ndim != 2 or Q.shape[0] != Q.shape[1] or not np.allclose(Q, Q.T):
            raise ValueError("ellipsoid form must be a symmetric matrix")
        if np.linalg.eigvalsh(Q).min() <= 0:
            raise ValueError("ellipsoid form must be positive definite")
        object.__setattr__(self, "Q", tuple(tuple(float(x) for x in r) for r in Q))
        object.__setattr__(self, "level", float(self.level))

    @property
    def dim(self) -> int:
        return len(self.Q)

    @property
    def matrix(self) -> np.ndarray:
        return np.asarray(self.Q, dtype=float)

    def contains(self, pts) -> np.ndarray:
        p = np.asarray(pts, dtype=float)
        return np.einsum("...i,ij,...j->...", p, self.matrix, p) <= self.level

    def boundary_samples(self, n, rng):
        if n < 1:
            raise ValueError("n must be >= 1")
        u = _unit_directions(n, self.dim, rng)
        q = np.einsum("ni,ij,nj->n", u, self.matrix, u)
        return u * np.sqrt(self.level / q)[:, None]

    def bbox(self):
        half = np.sqrt(self.level * np.diag(np.linalg.inv(self.matrix)))
        return -half, half

    def to_dict(self):
        return {"kind": "ellipsoid", "Q": [list(r) for r in self.matrix], "level": self.level}


def _segment_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    t = np.clip(np.einsum("...i,i->...", p - a, ab) / ab.dot(ab), 0.0, 1.0)
    proj = a + t[..., None] * ab
    return np.linalg.norm(p - proj, axis=-1)


def _signed_area(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


@dataclass(frozen=True)
class ObstacleComplement(Region):
    """Positions whose footprint disc of radius ``rho`` misses polygon ``O``.

    Lives in the inertial x-y plane; a point at distance exactly ``rho`` from
    the polygon is on the boundary and is *not* contained.
    """

    polygon: tuple
    rho: float = 0.25
    kind = "obstacle-complement"
    frame = "inertial"
    dim = 2

    def __post_init__(self):
        P = np.asarray(self.polygon, dtype=float)
        if P.ndim != 2 or P.shape[1] != 2 or len(P) < 3:
            raise ValueError("obstacle polygon needs at least 3 vertices in 2-D")
        if abs(_signed_area(P)) < 1e-12:
            raise ValueError("degenerate obstacle polygon (zero area)")
        if self.rho < 0:
            raise ValueError("inflation radius must be non-negative")
        ccw = P if _signed_area(P) > 0 else P[::-1]
        e = np.roll(ccw, -1, axis=0) - ccw
        turn = e[:, 0] * np.roll(e, -1, axis=0)[:, 1] - e[:, 1] * np.roll(e, -1, axis=0)[:, 0]
        if np.any(turn < -1e-12):
            raise ValueError("obstacle polygon must be convex")
        object.__setattr__(self, "polygon", tuple(tuple(float(x) for x in v) for v in P))
        object.__setattr__(self, "rho", float(self.rho))

    @property
    def vertices(self) -> np.ndarray:
        P = np.asarray(self.polygon, dtype=float)
        return P if _signed_area(P) > 0 else P[::-1]

    def inside_polygon(self, pts) -> np.ndarray:
        p = np.asarray(pts, dtype=float)
        P = self.vertices
        inside = np.ones(p.shape[:-1], dtype=bool)
        for a, b in zip(P, np.roll(P, -1, axis=0)):
            e = b - a
            cross = e[0] * (p[..., 1] - a[1]) - e[1] * (p[..., 0] - a[0])
            inside &= cross >= 0
        return inside

    def distance(self, pts) -> np.ndarray:
        """Euclidean distance from each point to the (convex) polygon; 0 inside."""
        p = np.asarray(pts, dtype=float)
        P = self.vertices
        d = np.min([_segment_distance(p, a, b) for a, b in zip(P, np.roll(P, -1, axis=0))], axis=0)
        return np.where(self.inside_polygon(p), 0.0, d)

    def clearance(self, pts) -> np.ndarray:
        return self.distance(pts) - self.rho

    def contains(self, pts) -> np.ndarray:
        return self.clearance(pts) > 0

    def boundary_samples(self, n, rng):
        """Uniform samples on the boundary of ``O`` inflated by ``rho``."""
        if n < 1:
            raise ValueError("n must be >= 1")
        P = self.vertices
        nxt = np.roll(P, -1, axis=0)
        edges = nxt - P
        lens = np.linalg.norm(edges, axis=1)
        normals = np.stack([edges[:, 1], -edges[:, 0]], axis=1) / lens[:, None]
        # exterior turning angle at each vertex (arc of the inflated corner)
        prev_n = np.roll(normals, 1, axis=0)
        ang0 = np.arctan2(prev_n[:, 1], prev_n[:, 0])
        turn = np.mod(np.arctan2(normals[:, 1], normals[:, 0]) - ang0, 2 * np.pi)
        pieces = np.concatenate([lens, self.rho * turn])
        k = len(P)
        choice = rng.choice(2 * k, size=n, p=pieces / pieces.sum())
        s = rng.random(n)
        out = np.empty((n, 2))
        on_edge = choice < k
        i = choice[on_edge]
        out[on_edge] = P[i] + s[on_edge, None] * edges[i] + self.rho * normals[i]
        j = choice[~on_edge] - k
        ang = ang0[j] + s[~on_edge] * turn[j]
        out[~on_edge] = P[j] + self.rho * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        return out

    def bbox(self):
        P = self.vertices
        return P.min(axis=0) - self.rho, P.max(axis=0) + self.rho

    def to_dict(self):
        return {"kind": "obstacle-complement", "polygon": [list(v) for v in self.polygon],
                "rho": self.rho}


def region_from_dict(d: dict) -> Region:
    kind = d["kind"]
    if kind == "ball":
        return Ball(float(d["radius"]), tuple(d.get("center", (0.0,) * 4)))
    if kind == "box":
        return Box(tuple(d["lo"]), tuple(d["hi"]))
    if kind == "ellipsoid":
        return Ellipsoid(tuple(tuple(r) for r in d["Q"]), float(d.get("level", 1.0)))
    if kind == "obstacle-complement":
        return ObstacleComplement(tuple(tuple(v) for v in d["polygon"]), float(d.get("rho", 0.25)))
    raise ValueError(f"unknown region kind {kind!r}")


def region_contains(region: Region, point) -> bool | np.ndarray:
    return region.contains(point)


def region_boundary_samples(region: Region, n: int, seed: int = 0) -> np.ndarray:
    return region.boundary_samples(n, np.random.default_rng(seed))


SafeSet = Union[Region, Callable[[float], Region]]


@dataclass(frozen=True)
class RegionSpec:
    """Initial set, goal set and safe tube, all in deviation coordinates.

    ``safe`` is either a single region (the same for every path parameter)
    or a callable ``theta -> Region``.  ``safe_bounds`` is an optional box
    intersected with an inertial-frame safe region so that it stays bounded
    in the body coordinates it does not constrain.
    """

    initial: Region
    goal: Region
    safe: SafeSet
    safe_bounds: Box | None = field(default=None)

    def safe_at(self, theta: float) -> Region:
        return self.safe(theta) if callable(self.safe) and not isinstance(self.safe, Region) else self.safe
