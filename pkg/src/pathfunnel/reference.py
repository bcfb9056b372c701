"""Reference path segments, the body-fixed deviation frame, and path projection.

A segment maps the path parameter ``theta in [0, T]`` to a reference state
``x_r(theta) = (alpha_r, x_r, y_r, v_r)`` together with its derivative
``r(theta)``.  Deviations are expressed in a frame centred on the reference
position and rotated by the reference heading, so that the body ``y_R`` axis
points along the reference direction of travel.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dynamics import WHEELBASE
from .regions import Box, RegionSpec

_DOMAIN_TOL = 1e-9


class DomainError(ValueError):
    """Path parameter outside the segment's domain."""


def _rot(phi, v):
    """Rotate 2-vectors ``v[..., :2]`` by angle ``phi`` (broadcast)."""
    c, s = np.cos(phi), np.sin(phi)
    return np.stack([c * v[..., 0] - s * v[..., 1], s * v[..., 0] + c * v[..., 1]], axis=-1)


class ReferenceSegment:
    """Base class: subclasses implement ``_state`` and ``_deriv`` for array theta."""

    T: float
    name: str = "segment"

    def check_domain(self, theta) -> np.ndarray:
        th = np.asarray(theta, dtype=float)
        if np.any(th < -_DOMAIN_TOL) or np.any(th > self.T + _DOMAIN_TOL) or not np.all(np.isfinite(th)):
            raise DomainError(f"theta outside [0, {self.T}]")
        return np.clip(th, 0.0, self.T)

    def state(self, theta) -> np.ndarray:
        return self._state(self.check_domain(theta))

    def deriv(self, theta) -> np.ndarray:
        return self._deriv(self.check_domain(theta))

    def _state(self, th: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _deriv(self, th: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def reference_inputs(self, theta, l: float = WHEELBASE) -> np.ndarray:
        """Affine inputs ``(u0, w, thrust)`` that reproduce the reference at ``u0 = 1``."""
        xr, r = self.state(theta), self.deriv(theta)
        v = xr[..., 3]
        w = np.divide(r[..., 0], v, out=np.zeros_like(v), where=np.abs(v) > 1e-12)
        return np.stack([np.ones_like(v), w, r[..., 3]], axis=-1)

    def feasibility_residual(self, theta, l: float = WHEELBASE) -> np.ndarray:
        """Mismatch between ``r(theta)`` and the bicycle field at the recovered inputs."""
        xr, r = self.state(theta), self.deriv(theta)
        v, a = xr[..., 3], xr[..., 0]
        pos = np.stack([-v * np.sin(a), v * np.cos(a)], axis=-1)
        res = np.linalg.norm(r[..., 1:3] - pos, axis=-1)
        # heading rate is reproducible only if the car is moving
        res = res + np.where(np.abs(v) > 1e-12, 0.0, np.abs(r[..., 0]))
        return res

    def shifted(self, dalpha: float = 0.0, dx: float = 0.0, dy: float = 0.0) -> "ReferenceSegment":
        return ShiftedSegment(self, dalpha, dx, dy)

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class StraightSegment(ReferenceSegment):
    x0: float
    y0: float
    heading: float
    speed: float
    T: float
    name: str = "straight"

    def _state(self, th):
        out = np.empty(th.shape + (4,))
        out[..., 0] = self.heading
        out[..., 1] = self.x0 - self.speed * math.sin(self.heading) * th
        out[..., 2] = self.y0 + self.speed * math.cos(self.heading) * th
        out[..., 3] = self.speed
        return out

    def _deriv(self, th):
        out = np.zeros(th.shape + (4,))
        out[..., 1] = -self.speed * math.sin(self.heading)
        out[..., 2] = self.speed * math.cos(self.heading)
        return out

    def to_dict(self):
        return {"type": "straight", "x0": self.x0, "y0": self.y0, "heading": self.heading,
                "speed": self.speed, "T": self.T}


@dataclass(frozen=True)
class ArcSegment(ReferenceSegment):
    """Counter-clockwise circle: position ``c + R (cos phi, sin phi)``, ``phi = phi0 + omega theta``."""

    radius: float
    omega: float
    T: float
    cx: float = 0.0
    cy: float = 0.0
    phi0: float = 0.0
    name: str = "arc"

    def _state(self, th):
        phi = self.phi0 + self.omega * th
        out = np.empty(th.shape + (4,))
        out[..., 0] = phi
        out[..., 1] = self.cx + self.radius * np.cos(phi)
        out[..., 2] = self.cy + self.radius * np.sin(phi)
        out[..., 3] = self.radius * self.omega
        return out

    def _deriv(self, th):
        phi = self.phi0 + self.omega * th
        out = np.zeros(th.shape + (4,))
        out[..., 0] = self.omega
        out[..., 1] = -self.radius * self.omega * np.sin(phi)
        out[..., 2] = self.radius * self.omega * np.cos(phi)
        return out

    def to_dict(self):
        return {"type": "arc", "radius": self.radius, "omega": self.omega, "T": self.T,
                "cx": self.cx, "cy": self.cy, "phi0": self.phi0}


@dataclass(frozen=True)
class EllipseSegment(ReferenceSegment):
    """Counter-clockwise ellipse ``(a cos phi, b sin phi)`` at constant ``dphi/dtheta = omega``.

    Heading follows the tangent; speed is whatever the parameterization
    yields, so the segment is exactly feasible.
    """

    a: float
    b: float
    omega: float
    T: float
    phi0: float = 0.0
    name: str = "ellipse"

    def _heading(self, phi):
        # continuous branch of atan2(a sin, b cos): phi plus a bounded correction
        s, c = np.sin(phi), np.cos(phi)
        return phi + np.arctan2((self.a - self.b) * s * c, self.b * c * c + self.a * s * s)

    def _state(self, th):
        phi = self.phi0 + self.omega * th
        s, c = np.sin(phi), np.cos(phi)
        out = np.empty(th.shape + (4,))
        out[..., 0] = self._heading(phi)
        out[..., 1] = self.a * c
        out[..., 2] = self.b * s
        out[..., 3] = self.omega * np.sqrt(self.a ** 2 * s * s + self.b ** 2 * c * c)
        return out

    def _deriv(self, th):
        phi = self.phi0 + self.omega * th
        s, c = np.sin(phi), np.cos(phi)
        q = self.a ** 2 * s * s + self.b ** 2 * c * c
        out = np.empty(th.shape + (4,))
        out[..., 0] = self.omega * self.a * self.b / q
        out[..., 1] = -self.omega * self.a * s
        out[..., 2] = self.omega * self.b * c
        out[..., 3] = self.omega ** 2 * (self.a ** 2 - self.b ** 2) * s * c / np.sqrt(q)
        return out

    def to_dict(self):
        return {"type": "ellipse", "a": self.a, "b": self.b, "omega": self.omega, "T": self.T,
                "phi0": self.phi0}


@dataclass(frozen=True)
class BumpSegment(ReferenceSegment):
    """Drive along +x from ``x_start`` with a raised-cosine lateral detour.

    Position ``(x, y0 + h (1 + cos(pi (x - xc) / L)) / 2)`` with
    ``x = x_start + sx * theta``; ``h`` may be negative to pass below.
    """

    x_start: float
    sx: float
    T: float
    xc: float = 0.0
    half_length: float = 1.5
    height: float = 0.9
    y0: float = 0.0
    name: str = "bump"

    def _shape(self, x):
        k = math.pi / self.half_length
        ph = k * (x - self.xc)
        f1 = -0.5 * self.height * k * np.sin(ph)
        f2 = -0.5 * self.height * k * k * np.cos(ph)
        f3 = 0.5 * self.height * k ** 3 * np.sin(ph)
        return 0.5 * self.height * (1 + np.cos(ph)), f1, f2, f3

    def _state(self, th):
        x = self.x_start + self.sx * th
        f, f1, _, _ = self._shape(x)
        out = np.empty(th.shape + (4,))
        out[..., 0] = np.arctan2(-1.0, f1)
        out[..., 1] = x
        out[..., 2] = self.y0 + f
        out[..., 3] = self.sx * np.sqrt(1 + f1 * f1)
        return out

    def _deriv(self, th):
        x = self.x_start + self.sx * th
        _, f1, f2, _ = self._shape(x)
        out = np.empty(th.shape + (4,))
        out[..., 0] = self.sx * f2 / (1 + f1 * f1)
        out[..., 1] = self.sx
        out[..., 2] = self.sx * f1
        out[..., 3] = self.sx ** 2 * f1 * f2 / np.sqrt(1 + f1 * f1)
        return out

    def to_dict(self):
        return {"type": "bump", "x_start": self.x_start, "sx": self.sx, "T": self.T,
                "xc": self.xc, "half_length": self.half_length, "height": self.height, "y0": self.y0}


@dataclass(frozen=True)
class PolynomialSegment(ReferenceSegment):
    """Per-component polynomials in theta; ``coeffs[i]`` is highest-degree first."""

    coeffs: tuple
    T: float
    name: str = "polynomial"

    def _state(self, th):
        return np.stack([np.polyval(np.asarray(c, float), th) for c in self.coeffs], axis=-1)

    def _deriv(self, th):
        return np.stack([np.polyval(np.polyder(np.asarray(c, float)), th) for c in self.coeffs],
                        axis=-1)

    def to_dict(self):
        return {"type": "polynomial", "coeffs": [list(c) for c in self.coeffs], "T": self.T}


@dataclass(frozen=True)
class ShiftedSegment(ReferenceSegment):
    """A base segment rotated by ``dalpha`` about the origin and translated."""

    base: ReferenceSegment
    dalpha: float = 0.0
    dx: float = 0.0
    dy: float = 0.0

    @property
    def T(self):
        return self.base.T

    @property
    def name(self):
        return self.base.name

    def _state(self, th):
        s = self.base._state(th)
        out = s.copy()
        out[..., 0] += self.dalpha
        out[..., 1:3] = _rot(self.dalpha, s[..., 1:3]) + np.array([self.dx, self.dy])
        return out

    def _deriv(self, th):
        r = self.base._deriv(th)
        out = r.copy()
        out[..., 1:3] = _rot(self.dalpha, r[..., 1:3])
        return out

    def to_dict(self):
        return {"type": "shifted", "base": self.base.to_dict(), "dalpha": self.dalpha,
                "dx": self.dx, "dy": self.dy}


def segment_from_dict(d: dict) -> ReferenceSegment:
    kind = d["type"]
    args = {k: v for k, v in d.items() if k != "type"}
    if kind == "straight":
        return StraightSegment(**args)
    if kind == "arc":
        return ArcSegment(**args)
    if kind == "ellipse":
        return EllipseSegment(**args)
    if kind == "bump":
        return BumpSegment(**args)
    if kind == "polynomial":
        return PolynomialSegment(tuple(tuple(c) for c in args["coeffs"]), float(args["T"]))
    if kind == "shifted":
        return ShiftedSegment(segment_from_dict(args.pop("base")), **args)
    raise ValueError(f"unknown segment type {kind!r}")


# ---------------------------------------------------------------- frames

def to_body(s, theta, ref: ReferenceSegment) -> np.ndarray:
    """Deviation of inertial state(s) ``s`` from ``x_r(theta)`` in the body frame."""
    s = np.asarray(s, dtype=float)
    xr = ref.state(theta)
    b = np.empty(np.broadcast_shapes(s.shape, xr.shape))
    b[..., 0] = s[..., 0] - xr[..., 0]
    b[..., 1:3] = _rot(-xr[..., 0], s[..., 1:3] - xr[..., 1:3])
    b[..., 3] = s[..., 3] - xr[..., 3]
    return b


def to_inertial(b, theta, ref: ReferenceSegment) -> np.ndarray:
    b = np.asarray(b, dtype=float)
    xr = ref.state(theta)
    s = np.empty(np.broadcast_shapes(b.shape, xr.shape))
    s[..., 0] = b[..., 0] + xr[..., 0]
    s[..., 1:3] = _rot(xr[..., 0], b[..., 1:3]) + xr[..., 1:3]
    s[..., 3] = b[..., 3] + xr[..., 3]
    return s


def body_affine_form(theta, b, ref: ReferenceSegment) -> tuple[np.ndarray, np.ndarray]:
    """Drift ``a`` (..., 5) and input matrix ``G`` (..., 5, 3) of ``z = (theta, b)``.

    ``z' = a + G @ (u0, w, thrust)``.  The frame rotates at rate
    ``alpha_r'(theta) u0``, which contributes to the position rows.
    A segment may supply its own deviation dynamics through an
    ``affine_form(theta, b)`` method with the same return convention.
    """
    b = np.asarray(b, dtype=float)
    custom = getattr(ref, "affine_form", None)
    if custom is not None:
        return custom(np.asarray(theta, dtype=float), b)
    xr, r = ref.state(theta), ref.deriv(theta)
    shape = np.broadcast_shapes(b.shape[:-1], np.shape(xr)[:-1])
    b = np.broadcast_to(b, shape + (4,))
    xr = np.broadcast_to(xr, shape + (4,))
    r = np.broadcast_to(r, shape + (4,))
    alpha_R, x_R, y_R, v_R = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    speed = v_R + xr[..., 3]
    dalpha = r[..., 0]
    q = _rot(-xr[..., 0], r[..., 1:3])

    a = np.zeros(shape + (5,))
    a[..., 2] = -speed * np.sin(alpha_R)
    a[..., 3] = speed * np.cos(alpha_R)
    G = np.zeros(shape + (5, 3))
    G[..., 0, 0] = 1.0
    G[..., 1, 0] = -dalpha
    G[..., 2, 0] = dalpha * y_R - q[..., 0]
    G[..., 3, 0] = -dalpha * x_R - q[..., 1]
    G[..., 4, 0] = -r[..., 3]
    G[..., 1, 1] = speed
    G[..., 4, 2] = 1.0
    return a, G


def body_deviation_field(b, theta, v, ref: ReferenceSegment) -> np.ndarray:
    """``(theta', b')`` under affine inputs ``v = (u0, w, thrust)``."""
    a, G = body_affine_form(theta, b, ref)
    return a + np.einsum("...ij,...j->...i", G, np.asarray(v, dtype=float))


def safe_contains(spec: RegionSpec, theta, b, ref: ReferenceSegment) -> np.ndarray:
    """Membership of body states ``b`` at ``theta`` in the safe set."""
    b = np.asarray(b, dtype=float)
    th = np.asarray(theta, dtype=float)
    if callable(spec.safe) and not hasattr(spec.safe, "contains"):
        ths = np.broadcast_to(th, b.shape[:-1])
        ok = np.array([spec.safe(t).contains(p) for t, p in zip(ths.ravel(), b.reshape(-1, 4))])
        inside = ok.reshape(b.shape[:-1])
    else:
        region = spec.safe
        if region.frame == "inertial":
            s = to_inertial(b, th, ref)
            inside = region.contains(s[..., 1:3])
        else:
            inside = region.contains(b)
    if spec.safe_bounds is not None:
        inside = inside & spec.safe_bounds.contains(b)
    return inside


# ------------------------------------------------------------ projection

def project_to_path(s, ref: ReferenceSegment, P=None, grid: int = 2001,
                    iters: int = 60) -> float:
    """Closest path parameter to ``s`` in the ``P``-weighted norm (metrics only).

    Dense grid search followed by ternary search on the bracketing cells.
    """
    s = np.asarray(s, dtype=float)
    P = np.eye(4) if P is None else np.asarray(P, dtype=float)
    if not np.allclose(P, P.T) or np.linalg.eigvalsh(P).min() <= 0:
        raise ValueError("P must be symmetric positive definite")

    def cost(th):
        d = s - ref.state(th)
        return np.einsum("...i,ij,...j->...", d, P, d)

    ths = np.linspace(0.0, ref.T, grid)
    k = int(np.argmin(cost(ths)))
    lo, hi = ths[max(k - 1, 0)], ths[min(k + 1, grid - 1)]
    for _ in range(iters):
        m1, m2 = lo + (hi - lo) / 3, hi - (hi - lo) / 3
        if cost(m1) <= cost(m2):
            hi = m2
        else:
            lo = m1
    best = 0.5 * (lo + hi)
    return float(best if cost(best) <= cost(ths[k]) else ths[k])
