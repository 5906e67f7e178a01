import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blender_lab.geometry import (BoxXYZ, Coding, ConeConstants, FoldingFamily, Interval, SsDisc, crosses,
                                  gap, in_cone, separated, x_projection)

Z1 = (Interval(-1.0, 1.0),)


def disc(x=0.2, slope=0.0, pad=0.0, lip=0.0):
    return SsDisc(1, Z1, x, (slope,), (0.0,), ((0.0,),), pad, lip)


def test_interval_rejects_empty():
    with pytest.raises(ValueError):
        Interval(1.0, 0.0)


def test_around_rounds_outward():
    iv = Interval.around(0.1, 0.2)
    assert iv.lo < 0.1 - 0.2 or iv.lo == math.nextafter(0.1 - 0.2, -math.inf)
    assert iv.hi >= 0.1 + 0.2


def test_shrink_to_nothing():
    assert Interval(0.0, 1.0).shrink(0.6) is None
    assert Interval(0.0, 1.0).shrink(0.25).subset_of(Interval(0.25, 0.75))


def test_gap_sign():
    assert gap(Interval(0, 0.1), Interval(0.5, 0.6)) == pytest.approx(0.4)
    assert gap(Interval(0, 1), Interval(0.5, 2)) < 0


def test_x_projection_constant():
    iv = x_projection(disc())
    assert iv.lo <= 0.2 <= iv.hi and iv.width < 1e-15


def test_x_projection_affine_core():
    iv = x_projection(disc(x=0.2, slope=0.1))
    assert iv.lo == pytest.approx(0.1, abs=1e-15) and iv.hi == pytest.approx(0.3, abs=1e-15)


def test_x_projection_budget_terms():
    d = disc(pad=0.01, lip=0.05)
    iv = x_projection(d)
    assert iv.lo == pytest.approx(0.14, abs=1e-15) and iv.hi == pytest.approx(0.26, abs=1e-15)
    # any concrete disc inside the budgets stays in the projection
    z = np.linspace(-1, 1, 2001)
    for curve in (0.2 + 0.01 + 0.05 * np.abs(z), 0.2 - 0.01 - 0.05 * np.abs(z), 0.2 + 0.06 * np.sin(3 * z) / 3):
        assert iv.lo <= curve.min() and curve.max() <= iv.hi


def test_crosses_examples():
    d = disc(pad=0.01, lip=0.05)
    assert crosses(d, Interval(-0.3, 0.3))
    assert not crosses(d, Interval(0.2, 0.5))
    iv = x_projection(d)
    assert not crosses(d, Interval(iv.lo, 0.5))


def test_separated_examples():
    assert separated(Interval(0, 0.1), Interval(0.5, 0.6), 0.2)
    assert not separated(Interval(0, 0.1), Interval(0.15, 0.2), 0.2)
    assert not separated(Interval(0, 0.1), Interval(0, 0.1), 0.2)


def test_in_cone_examples():
    K = ConeConstants(0.1, 0.1, 0.1)
    assert in_cone((0, 1, 0), "u", K)
    assert not in_cone((0.2, 1, 0), "u", K)
    assert in_cone((0.03, 1, 0.05), "u", K)


def test_cone_constants_range():
    with pytest.raises(ValueError):
        ConeConstants(0.0, 0.5, 0.5)
    with pytest.raises(ValueError):
        ConeConstants(0.5, 1.0, 0.5)


def test_coding_validates_slots():
    with pytest.raises(ValueError):
        Coding((1, 3), "array_slot", 2)
    assert len(Coding((1, 2), "array_slot", 2).extend(1)) == 3


def test_family_fiber_matches_curve():
    tmpl = SsDisc(1, Z1, 0.0, (0.02,), (0.0,), ((0.0,),))
    fam = FoldingFamily(1, (0.1, 0.4, -0.4), (0.0,), (0.5,), tmpl)
    f = fam.fiber(0.5)
    assert f.core_x([[0.0]])[0] == pytest.approx(float(fam.x_at(0.5)))
    assert fam.x_hull().contains(0.2)


finite = st.floats(-0.5, 0.5, allow_nan=False)
small = st.floats(0.0, 0.05, allow_nan=False)


@given(finite, finite, small, small, small, small)
def test_projection_monotone_in_budgets(x, slope, pad, lip, dpad, dlip):
    a = x_projection(disc(x, slope, pad, lip))
    b = x_projection(disc(x, slope, pad + dpad, lip + dlip))
    assert b.lo <= a.lo and a.hi <= b.hi


@given(st.lists(st.floats(-2, 2, allow_nan=False), min_size=3, max_size=3).filter(lambda v: any(v)),
       st.floats(-10, 10, allow_nan=False).filter(lambda c: abs(c) > 1e-3),
       st.sampled_from(["u", "s", "ss"]))
def test_in_cone_scale_invariant(v, c, cone):
    K = ConeConstants(0.3, 0.3, 0.3)
    w = [c * t for t in v]
    if any(abs(t) > 0 for t in w):
        # the two evaluations may only differ by a rounding tie on the boundary
        a, b = in_cone(v, cone, K), in_cone(w, cone, K)
        if a != b:
            dx, dy, dz = (abs(t) for t in v)
            lhs, rhs = {"u": (dx + dz, 0.3 * dy), "s": (dy, 0.3 * (dx + dz)), "ss": (dx + dy, 0.3 * dz)}[cone]
            assert abs(lhs - rhs) <= 1e-12 * max(1.0, rhs)


@settings(max_examples=200)
@given(finite, finite, small, small, st.floats(-1, 1), st.floats(0.01, 1), st.integers(0, 2**31))
def test_crosses_is_conservative(x, slope, pad, lip, lo, w, seed):
    d = disc(x, slope, pad, lip)
    region = Interval(lo, lo + w)
    if crosses(d, region):
        rng = np.random.default_rng(seed)
        z = rng.uniform(-1, 1, 500)
        dev = rng.uniform(-1, 1, 500) * (pad + lip * np.abs(z))
        xs = x + slope * z + dev
        assert np.all(xs > region.lo) and np.all(xs < region.hi)


@settings(max_examples=200)
@given(st.floats(-1, 1), st.floats(0, 0.3), st.floats(-1, 1), st.floats(0, 0.3), st.floats(0.001, 0.3),
       st.integers(0, 2**31))
def test_separated_is_conservative(a0, aw, b0, bw, delta, seed):
    A, B = Interval(a0, a0 + aw), Interval(b0, b0 + bw)
    if separated(A, B, delta):
        rng = np.random.default_rng(seed)
        # discs of x-width at most delta: Lipschitz delta/2 over z in [-1, 1]
        for _ in range(50):
            c = rng.uniform(-1.5, 1.5)
            s = rng.uniform(-delta / 2, delta / 2)
            xs = c + s * np.linspace(-1, 1, 41)
            meets_a = np.any((xs >= A.lo) & (xs <= A.hi))
            meets_b = np.any((xs >= B.lo) & (xs <= B.hi))
            assert not (meets_a and meets_b)


def test_box_contains_point():
    b = BoxXYZ(Interval(-1, 1), (Interval(0, 1),), (Interval(-1, 1),))
    assert b.contains_point(0.0, [0.5], [0.0])
    assert not b.contains_point(0.0, [1.5], [0.0])
