"""Built-in scenarios: straight, restricted-velocity, circular, oval halves, obstacle detour."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .regions import Ball, Box, Ellipsoid, ObstacleComplement, RegionSpec
from .reference import (ArcSegment, BumpSegment, EllipseSegment, ReferenceSegment,
                        StraightSegment, safe_contains, to_body, to_inertial)

STRAIGHT_BOX = Box((-1.0, -1.0, -1.0, -3.0), (1.0, 1.0, 1.0, 3.0))
RESTRICTED_BOX = Box((-1.0, -1.0, -1.0, -0.5), (1.0, 1.0, 1.0, 0.5))
# printed as [-1, 1] x [-3, 3]; read as (alpha_R, x_R) with y_R, v_R padded to [-3, 3]
CURVED_BOX = Box((-1.0, -3.0, -3.0, -3.0), (1.0, 3.0, 3.0, 3.0))
BALL_05 = Ball(0.5)
RESTRICTED_ELLIPSOID = Ellipsoid(((4.0, 0, 0, 0), (0, 4.0, 0, 0), (0, 0, 4.0, 0), (0, 0, 0, 16.0)), 1.0)

FOOTPRINT_RADIUS = 0.25
OBSTACLE_ENGAGE = 1.5
OBSTACLE_POLYGON = ((-0.1, -0.1), (0.1, -0.1), (0.1, 0.1), (-0.1, 0.1))

OVAL_A, OVAL_B = 2.0, 1.0
OVAL_OMEGA = math.pi / 4


@dataclass(frozen=True)
class Scenario:
    name: str
    segment: ReferenceSegment
    spec: RegionSpec
    description: str = ""
    # per-scenario overrides of synthesis defaults (beta_lower, lam, ...)
    overrides: dict = field(default_factory=dict)
    obstacle: ObstacleComplement | None = None

    def to_dict(self) -> dict:
        d = {"name": self.name, "segment": self.segment.to_dict(), "description": self.description,
             "initial": self.spec.initial.to_dict(), "goal": self.spec.goal.to_dict(),
             "safe": self.spec.safe.to_dict(), "overrides": dict(self.overrides)}
        if self.spec.safe_bounds is not None:
            d["safe_bounds"] = self.spec.safe_bounds.to_dict()
        return d


def _straight(length: float, speed: float = 2.0) -> StraightSegment:
    return StraightSegment(-length / 2, 0.0, -math.pi / 2, speed, length / speed)


def _circle(speed: float) -> ArcSegment:
    radius = 1.5
    omega = speed / radius
    return ArcSegment(radius, omega, 2 * math.pi / omega)


def builtin_segments() -> dict[str, Scenario]:
    cat = {}
    cat["straight-4m"] = Scenario(
        "straight-4m", _straight(4.0),
        RegionSpec(BALL_05, BALL_05, STRAIGHT_BOX),
        "straight path x=-2..2 at 2 m/s")
    cat["straight-8m"] = Scenario(
        "straight-8m", _straight(8.0),
        RegionSpec(BALL_05, BALL_05, STRAIGHT_BOX),
        "straight path x=-4..4 at 2 m/s")
    cat["restricted-velocity"] = Scenario(
        "restricted-velocity", _straight(8.0),
        RegionSpec(RESTRICTED_ELLIPSOID, RESTRICTED_ELLIPSOID, RESTRICTED_BOX),
        "straight path x=-4..4 with the speed deviation restricted to 0.5 m/s")
    cat["circular"] = Scenario(
        "circular", _circle(math.pi / 2),
        RegionSpec(BALL_05, BALL_05, CURVED_BOX),
        "one CCW lap of a 1.5 m circle at pi/2 m/s")
    cat["circular-2pi"] = Scenario(
        "circular-2pi", _circle(2 * math.pi),
        RegionSpec(BALL_05, BALL_05, CURVED_BOX),
        "one CCW lap of a 1.5 m circle at 2 pi m/s")
    cat["circular-10pi"] = Scenario(
        "circular-10pi", _circle(10 * math.pi),
        RegionSpec(BALL_05, BALL_05, CURVED_BOX),
        "one CCW lap of a 1.5 m circle at 10 pi m/s (attempted, not gated)")
    half = math.pi / OVAL_OMEGA
    cat["oval-half-1"] = Scenario(
        "oval-half-1", EllipseSegment(OVAL_A, OVAL_B, OVAL_OMEGA, half, 0.0),
        RegionSpec(BALL_05, BALL_05, CURVED_BOX),
        "CCW from (2, 0) to (-2, 0) along x^2/4 + y^2 = 1")
    cat["oval-half-2"] = Scenario(
        "oval-half-2", EllipseSegment(OVAL_A, OVAL_B, OVAL_OMEGA, half, math.pi),
        RegionSpec(BALL_05, BALL_05, CURVED_BOX),
        "CCW from (-2, 0) to (2, 0) along x^2/4 + y^2 = 1")
    obstacle = ObstacleComplement(OBSTACLE_POLYGON, FOOTPRINT_RADIUS)
    bump = BumpSegment(x_start=-OBSTACLE_ENGAGE, sx=1.5, T=2 * OBSTACLE_ENGAGE / 1.5,
                       xc=0.0, half_length=OBSTACLE_ENGAGE, height=-1.0)
    cat["obstacle"] = Scenario(
        "obstacle", bump,
        RegionSpec(Ball(0.25), Ball(0.5), obstacle),
        "detour below a 0.2 m box obstacle; goal relaxed to radius 0.5",
        obstacle=obstacle)
    cat["obstacle-strict"] = Scenario(
        "obstacle-strict", bump,
        RegionSpec(Ball(0.25), Ball(0.25), obstacle),
        "obstacle detour with the unrelaxed 0.25 goal", obstacle=obstacle)
    return cat


def get_scenario(name: str) -> Scenario:
    cat = builtin_segments()
    if name not in cat:
        raise KeyError(f"unknown scenario {name!r}; known: {', '.join(sorted(cat))}")
    return cat[name]


def check_region_nesting(scn: Scenario, n: int = 1000, seed: int = 0, tol: float = 1e-9) -> dict:
    """Boundary-sample check of ``S(0) >= I`` and ``S(T) >= G``; also that all sets hold the origin."""
    rng = np.random.default_rng(seed)
    spec, ref = scn.spec, scn.segment
    zero = np.zeros((1, 4))
    res = {}
    for label, region, theta in (("initial", spec.initial, 0.0), ("goal", spec.goal, ref.T)):
        pts = region.boundary_samples(n, rng)
        shrink = pts * (1 - tol)
        res[f"safe_contains_{label}"] = bool(np.all(safe_contains(spec, theta, shrink, ref)))
        res[f"{label}_has_origin"] = bool(region.contains(zero)[0])
    ths = np.linspace(0.0, ref.T, 50)
    res["safe_has_origin"] = bool(np.all(safe_contains(spec, ths, np.zeros((50, 4)), ref)))
    return res


def check_concatenation(first: Scenario, second: Scenario, n: int = 1000, seed: int = 0,
                        tol: float = 1e-9, dalpha: float = 0.0) -> bool:
    """Check ``G_first`` is contained in ``I_second`` by mapping boundary samples.

    Goal samples are taken to inertial coordinates at the end of ``first``
    and back to body coordinates at the start of ``second`` (shifted in
    heading by ``dalpha``, e.g. ``2 pi`` when closing a lap).
    """
    rng = np.random.default_rng(seed)
    pts = first.spec.goal.boundary_samples(n, rng)
    inertial = to_inertial(pts, first.segment.T, first.segment)
    nxt = second.segment.shifted(dalpha) if dalpha else second.segment
    body = to_body(inertial, 0.0, nxt)
    # samples sit exactly on the boundary; absorb rounding by a relative shrink
    return bool(np.all(second.spec.initial.contains(body * (1 - tol))))
