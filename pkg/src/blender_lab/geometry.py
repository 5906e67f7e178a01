"""Value types shared by every module: intervals, boxes, cones, discs, codings.

All arithmetic that feeds a certificate rounds outward (enclosures) or inward
(windows that must be contained), so a TRUE answer is never produced by
rounding luck.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

INF = math.inf


def down(v: float) -> float:
    return math.nextafter(v, -INF)


def up(v: float) -> float:
    return math.nextafter(v, INF)


@dataclass(frozen=True)
class Interval:
    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo <= self.hi:
            raise ValueError(f"empty interval [{self.lo}, {self.hi}]")

    @staticmethod
    def point(v: float) -> Interval:
        return Interval(v, v)

    @staticmethod
    def around(center: float, radius: float) -> Interval:
        """Outward-rounded [center - radius, center + radius]."""
        return Interval(down(center - radius), up(center + radius))

    @property
    def width(self) -> float:
        return up(self.hi - self.lo)

    @property
    def mid(self) -> float:
        return 0.5 * (self.lo + self.hi)

    @property
    def rad(self) -> float:
        return up(0.5 * (self.hi - self.lo))

    def contains(self, v: float) -> bool:
        return self.lo <= v <= self.hi

    def strictly_contains(self, other: Interval) -> bool:
        """``other`` lies in the open interior of ``self``."""
        return self.lo < other.lo and other.hi < self.hi

    def subset_of(self, other: Interval) -> bool:
        return other.lo <= self.lo and self.hi <= other.hi

    def hull(self, other: Interval) -> Interval:
        return Interval(min(self.lo, other.lo), max(self.hi, other.hi))

    def intersect(self, other: Interval) -> Interval | None:
        lo, hi = max(self.lo, other.lo), min(self.hi, other.hi)
        return Interval(lo, hi) if lo <= hi else None

    def widen(self, r: float) -> Interval:
        return Interval(down(self.lo - r), up(self.hi + r))

    def shrink(self, r: float) -> Interval | None:
        """Inward-rounded shrink; None once nothing is left."""
        lo, hi = up(self.lo + r), down(self.hi - r)
        return Interval(lo, hi) if lo <= hi else None

    def affine(self, a: float, b: float) -> Interval:
        """Outward enclosure of {a*x + b : x in self}."""
        p, q = a * self.lo + b, a * self.hi + b
        return Interval(down(min(p, q)), up(max(p, q)))

    def to_list(self) -> list[float]:
        return [self.lo, self.hi]


def gap(a: Interval, b: Interval) -> float:
    """Signed distance between two intervals (negative when they overlap), rounded down."""
    return down(max(b.lo - a.hi, a.lo - b.hi))


def cube(dim: int, lo: float = -1.0, hi: float = 1.0) -> tuple[Interval, ...]:
    return tuple(Interval(lo, hi) for _ in range(dim))


@dataclass(frozen=True)
class BoxXYZ:
    x: Interval
    y: tuple[Interval, ...]
    z: tuple[Interval, ...]

    @property
    def d_u(self) -> int:
        return len(self.y)

    @property
    def d_ss(self) -> int:
        return len(self.z)

    @property
    def dim(self) -> int:
        return 1 + self.d_u + self.d_ss

    def y_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        return np.array([c.lo for c in self.y]), np.array([c.hi for c in self.y])

    def z_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        return np.array([c.lo for c in self.z]), np.array([c.hi for c in self.z])

    def contains_point(self, x: float, y: Sequence[float], z: Sequence[float], slack: float = 0.0) -> bool:
        if not (self.x.lo - slack <= x <= self.x.hi + slack):
            return False
        for c, v in zip(self.y, y):
            if not (c.lo - slack <= v <= c.hi + slack):
                return False
        for c, v in zip(self.z, z):
            if not (c.lo - slack <= v <= c.hi + slack):
                return False
        return True

    def swap_yz(self) -> BoxXYZ:
        return BoxXYZ(self.x, self.z, self.y)


@dataclass(frozen=True)
class ConeConstants:
    K_u: float
    K_s: float
    K_ss: float

    def __post_init__(self):
        for name in ("K_u", "K_s", "K_ss"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name}={v} outside (0, 1)")

    @property
    def K(self) -> float:
        return max(self.K_u, self.K_ss)


def _split(v, d_u: int):
    v = np.asarray(v, dtype=float)
    return abs(v[0]), np.max(np.abs(v[1:1 + d_u]), initial=0.0), np.max(np.abs(v[1 + d_u:]), initial=0.0)


def in_cone(v, cone: str, constants: ConeConstants, d_u: int = 1) -> bool:
    """Cone membership with max-norms on the y and z blocks."""
    dx, dy, dz = _split(v, d_u)
    if dx == 0.0 and dy == 0.0 and dz == 0.0:
        raise ValueError("zero tangent vector")
    if cone == "u":
        return dx + dz <= constants.K_u * dy
    if cone == "s":
        return dy <= constants.K_s * (dx + dz)
    if cone == "ss":
        return dx + dy <= constants.K_ss * dz
    raise ValueError(f"unknown cone {cone!r}")


def _affine_range(offset: float, slope: Sequence[float], box: Sequence[Interval]) -> tuple[float, float]:
    lo = hi = offset
    for s, c in zip(slope, box):
        a, b = s * c.lo, s * c.hi
        lo += min(a, b)
        hi += max(a, b)
    return lo, hi


@dataclass(frozen=True)
class SsDisc:
    """A strong-stable disc: a graph z -> (x, y) over the full z-box.

    The true disc deviates from the affine core by at most
    ``pad + lipschitz * |z - z_mid|`` in each of x and y.  The total slope
    (core slope plus lipschitz budget) must stay within the ss-cone.
    """

    element_id: int
    z_box: tuple[Interval, ...]
    x_offset: float
    x_slope: tuple[float, ...]
    y_offset: tuple[float, ...]
    y_slope: tuple[tuple[float, ...], ...]
    pad: float = 0.0
    lipschitz_x: float = 0.0
    lipschitz_y: float = 0.0

    def __post_init__(self):
        if self.pad < 0 or self.lipschitz_x < 0 or self.lipschitz_y < 0:
            raise ValueError("pad and lipschitz budgets must be nonnegative")

    @staticmethod
    def constant(element_id: int, x: float, y: Sequence[float], z_box: Sequence[Interval], **kw) -> SsDisc:
        ds = len(z_box)
        return SsDisc(element_id, tuple(z_box), float(x), (0.0,) * ds, tuple(float(v) for v in y),
                      tuple((0.0,) * ds for _ in y), **kw)

    @property
    def z_mid(self) -> np.ndarray:
        return np.array([c.mid for c in self.z_box])

    @property
    def z_rad(self) -> float:
        return max(c.rad for c in self.z_box)

    def core_x(self, z) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=float))
        return self.x_offset + z @ np.asarray(self.x_slope)

    def core_y(self, z) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=float))
        return np.asarray(self.y_offset) + z @ np.asarray(self.y_slope).T

    def total_slope(self) -> float:
        sx = float(np.sum(np.abs(self.x_slope))) + self.lipschitz_x
        sy = float(np.max(np.sum(np.abs(np.asarray(self.y_slope)), axis=1), initial=0.0)) + self.lipschitz_y
        return sx + sy

    def deviation(self) -> float:
        """Bound on |true x - core x| over the whole disc."""
        return up(self.pad + self.lipschitz_x * self.z_rad)

    def with_pad(self, pad: float) -> SsDisc:
        return replace(self, pad=pad)


def x_projection(disc: SsDisc) -> Interval:
    lo, hi = _affine_range(disc.x_offset, disc.x_slope, disc.z_box)
    r = disc.deviation()
    return Interval(down(lo - r), up(hi + r))


def crosses(disc: SsDisc, region_x: Interval, host: BoxXYZ | None = None) -> bool:
    """True only when the disc's x-projection sits in the open interior of ``region_x``."""
    if host is not None and tuple(host.z) != tuple(disc.z_box):
        return False
    return region_x.strictly_contains(x_projection(disc))


def separated(a_x: Interval, b_x: Interval, delta_ss: float) -> bool:
    """No ss-disc of x-width at most ``delta_ss`` can meet both intervals."""
    return gap(a_x, b_x) > delta_ss


@dataclass(frozen=True)
class UDisc:
    """An unstable disc: a graph y -> (x, z) over the full y-box."""

    element_id: int
    y_box: tuple[Interval, ...]
    x_offset: float
    x_slope: tuple[float, ...]
    z_offset: tuple[float, ...]
    z_slope: tuple[tuple[float, ...], ...]
    pad: float = 0.0
    lipschitz: float = 0.0

    def x_projection(self) -> Interval:
        lo, hi = _affine_range(self.x_offset, self.x_slope, self.y_box)
        r = up(self.pad + self.lipschitz * max(c.rad for c in self.y_box))
        return Interval(down(lo - r), up(hi + r))


@dataclass(frozen=True)
class Coding:
    symbols: tuple[int, ...]
    kind: str = "element"
    alphabet: int | None = None

    def __post_init__(self):
        if self.kind not in ("element", "array_slot"):
            raise ValueError(f"unknown coding kind {self.kind!r}")
        for s in self.symbols:
            if not isinstance(s, (int, np.integer)) or s < 0:
                raise ValueError(f"bad symbol {s!r}")
            if self.kind == "array_slot" and self.alphabet is not None and not 1 <= s <= self.alphabet:
                raise ValueError(f"slot {s} outside 1..{self.alphabet}")

    def __len__(self):
        return len(self.symbols)

    def extend(self, s: int) -> Coding:
        return replace(self, symbols=self.symbols + (int(s),))


@dataclass(frozen=True)
class FoldingFamily:
    """A one-parameter family of ss-discs with a quadratic center curve.

    Fiber ``t`` has x-core ``c0 + c1 t + c2 t^2`` at the z-center of the box and
    y-core ``y0 + y1 t``; ``template`` carries the shared z-slopes, pad and
    Lipschitz budgets.  ``markers`` record (t, leaf x-value) pairs for the
    endpoint fibers, and ``t_scale, t_shift`` map the current parameter back to
    the parameter of the family the computation started from.
    """

    element_id: int
    coeffs: tuple[float, float, float]
    y0: tuple[float, ...]
    y1: tuple[float, ...]
    template: SsDisc
    markers: tuple[tuple[float, float], ...] = ()
    kind: str = "plain"
    t_domain: Interval = field(default_factory=lambda: Interval(0.0, 1.0))
    t_scale: float = 1.0
    t_shift: float = 0.0

    KINDS = ("plain", "left", "right", "prefolding", "exact")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown family kind {self.kind!r}")

    def x_at(self, t):
        c0, c1, c2 = self.coeffs
        t = np.asarray(t, dtype=float)
        return c0 + c1 * t + c2 * t * t

    def dx_at(self, t):
        _, c1, c2 = self.coeffs
        return c1 + 2.0 * c2 * np.asarray(t, dtype=float)

    def y_at(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        return np.asarray(self.y0) + np.multiply.outer(t, np.asarray(self.y1))

    @property
    def vertex(self) -> float | None:
        _, c1, c2 = self.coeffs
        return None if c2 == 0.0 else -c1 / (2.0 * c2)

    def fiber(self, t: float) -> SsDisc:
        zc = self.template.z_mid
        xs = np.asarray(self.template.x_slope)
        ys = np.asarray(self.template.y_slope).reshape(len(self.y0), -1)
        x_off = float(self.x_at(t)) - float(xs @ zc)
        y_off = self.y_at(t) - ys @ zc
        return replace(self.template, element_id=self.element_id, x_offset=x_off,
                       y_offset=tuple(float(v) for v in y_off))

    def x_hull(self, t_lo: float | None = None, t_hi: float | None = None) -> Interval:
        """Enclosure of the x-projections of all fibers with t in [t_lo, t_hi]."""
        a = self.t_domain.lo if t_lo is None else t_lo
        b = self.t_domain.hi if t_hi is None else t_hi
        ts = [a, b]
        v = self.vertex
        if v is not None and a < v < b:
            ts.append(v)
        xs = [float(self.x_at(t)) for t in ts]
        proj = x_projection(self.fiber(0.5 * (a + b)))
        spread = up(proj.hi - float(self.x_at(0.5 * (a + b))))
        return Interval(down(min(xs) - spread), up(max(xs) + spread))

    def to_original_t(self, t: float) -> float:
        return self.t_scale * t + self.t_shift
