import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blender_lab import covering as cv
from blender_lab import crossmap as cm
from blender_lab.errors import EmptyWindow
from blender_lab.geometry import Interval

BC = cv.BcgStructure(0.9, 0.3, 0.7)


def a2_a3_oracle(windows, bcg, w):
    """Scalar re-evaluation of A2 (alignment at each base boundary) and A3 on a 10^4 grid."""
    ok2 = True
    for v in windows:
        own = v.center_window
        for b in (v.base_window.lo, v.base_window.hi):
            if not -bcg.x_B < b < bcg.x_B:
                continue
            blo, bhi = max(b - w, -bcg.x_B), min(b + w, bcg.x_B)
            if not any(u.center_window.lo < blo and bhi < u.center_window.hi
                       and max(u.center_window.lo - own.hi, own.lo - u.center_window.hi) > w
                       for u in windows):
                ok2 = False
    ok3 = all(any(u.center_window.lo + w < x < u.center_window.hi - w for u in windows)
              for x in np.linspace(-bcg.x_C, bcg.x_C, 10_001))
    return ok2, ok3


def test_base_window_no_margin():
    v = cv.affine_windows([(0.5, 0.0)], cv.BcgStructure(0.9))[0]
    assert v.base_window.lo == pytest.approx(-0.45) and v.base_window.hi == pytest.approx(0.45)


def test_base_window_with_margin():
    v = cv.affine_windows([(0.5, 0.6)], cv.BcgStructure(0.9), delta=0.01)[0]
    assert v.base_window.lo == pytest.approx(0.18) and v.base_window.hi == pytest.approx(1.02)


def test_center_window_consumed_by_margin():
    # 2 alpha x_C - 6 D <= 2 D
    bcg = cv.BcgStructure(0.9, 0.19756, 0.5)
    d = 0.045 * 0.19756 / 4.0
    with pytest.raises(EmptyWindow):
        cv.affine_windows([(0.045, 0.0)], bcg, delta=d)


def test_center_inside_base(array_setup):
    _, _, _, ws, _ = array_setup
    assert all(v.center_window.subset_of(v.base_window) for v in ws)


def test_a1_three_strips():
    ws = cv.affine_windows([(0.5, -0.6), (0.5, 0.0), (0.5, 0.6)], cv.BcgStructure(0.9))
    got = [x for v in ws for x in v.base_window.to_list()]
    assert got == pytest.approx([-1.05, -0.15, -0.45, 0.45, 0.15, 1.05])
    assert cv.check_A1(None, cv.BcgStructure(0.9), ws).verdict


def test_a1_two_strips_fail_at_zero():
    ws = cv.affine_windows([(0.4, -0.5), (0.4, 0.5)], cv.BcgStructure(0.9))
    c = cv.check_A1(None, cv.BcgStructure(0.9), ws)
    assert not c.verdict and c.witness["x"] == pytest.approx(0.0)
    assert c.min_margin == pytest.approx(-0.14)


def test_a1_single_strip():
    wide = cv.StripWindow((1, 1, 0), Interval(-0.95, 0.95), None, None, 1, 0.0)
    assert cv.check_A1(None, cv.BcgStructure(0.9), [wide]).verdict


def test_horseshoe_does_not_cover():
    p = cm.horseshoe()
    certs = cv.covering_certificates(p, cv.BcgStructure(0.9), cv.compute_budgets(p))
    assert not cv.all_pass(certs)


def test_a2_a3_pass_matches_oracle():
    ws = cv.affine_windows([(0.5, 0.2 * k) for k in range(-4, 5)], BC)
    a2, a3 = cv.check_A2_A3(None, BC, ws, cv.uniform_budget(ws))
    assert a2.verdict and a3.verdict
    assert a2_a3_oracle(ws, BC, 0.0) == (True, True)


def test_a3_fails_without_left_center_strip():
    coeffs = [(0.5, 0.2 * k) for k in range(-4, 5) if k not in (-1, -2)]
    ws = cv.affine_windows(coeffs, BC)
    _, a3 = cv.check_A2_A3(None, BC, ws, cv.uniform_budget(ws))
    assert not a3.verdict
    assert a3.witness["x"] <= -0.15 and a2_a3_oracle(ws, BC, 0.0)[1] is False


def test_a2_fails_with_overlapping_centers_only():
    ws = cv.affine_windows([(0.5, -0.05), (0.5, 0.05)], BC)
    a2, _ = cv.check_A2_A3(None, BC, ws, cv.uniform_budget(ws))
    assert not a2.verdict and a2_a3_oracle(ws, BC, 0.0)[0] is False


def test_a2_a3_need_center():
    ws = cv.affine_windows([(0.5, 0.0)], cv.BcgStructure(0.9))
    with pytest.raises(ValueError):
        cv.check_A2_A3(None, cv.BcgStructure(0.9), ws, cv.uniform_budget(ws))


@settings(max_examples=150, deadline=None)
@given(st.lists(st.floats(-0.9, 0.9), min_size=2, max_size=9), st.floats(0.3, 0.6), st.floats(0.0, 0.01))
def test_a2_a3_agree_with_oracle(bs, a, w):
    ws = cv.affine_windows([(a, b) for b in sorted(bs)], BC)
    a2, a3 = cv.check_A2_A3(None, BC, ws, cv.uniform_budget(ws, delta_ss=w))
    o2, o3 = a2_a3_oracle(ws, BC, w)
    if a2.min_margin > 1e-12 or a2.min_margin < -1e-12:
        assert a2.verdict == o2
    if a3.verdict:
        assert o3
    elif a3.min_margin < -1e-3:  # the grid resolves holes wider than its spacing
        assert not o3


def test_bcg_all_pass_on_array(array_setup):
    p, bcg, b, ws, arr = array_setup
    certs = cv.check_BCG(p, bcg, ws, b, arr)
    assert [c.property for c in certs] == ["B1", "B2", "B2'", "B3", "B3'", "B4"]
    assert cv.all_pass(certs)


def test_b4_fails_when_gap_budget_too_small(array_setup):
    p, bcg, b, _, arr = array_setup
    # x_G - x_C > 9 Delta / alpha needs Delta < 0.0178 at alpha = 0.4
    bb = b.inflate(0.02)
    c = cv.check_BCG(p, bcg, cv.strip_windows(p, bcg, bb), bb, arr)
    assert not c[-1].verdict and c[-1].property == "B4"


def test_singleton_arrays_reduce_b1_to_a1(array_setup):
    p, bcg, b, ws, _ = array_setup
    b1 = cv.check_BCG(p, bcg, ws, b, cv.singleton_arrays(ws))[0]
    a1 = cv.check_A1(p, bcg, ws, b)
    assert b1.verdict == a1.verdict and b1.min_margin == pytest.approx(a1.min_margin)


def test_b_pass_implies_a1():
    rng = np.random.default_rng(3)
    for _ in range(50):
        bs = np.sort(rng.uniform(-0.9, 0.9, rng.integers(3, 10)))
        ws = cv.affine_windows([(0.4, float(x)) for x in bs], BC)
        u = cv.uniform_budget(ws)
        if cv.all_pass(cv.check_BCG(None, BC, ws, u, cv.singleton_arrays(ws))):
            assert cv.check_A1(None, BC, ws, u).verdict


@settings(max_examples=25, deadline=None)
@given(st.floats(0.0, 0.02), st.floats(0.0, 0.02))
def test_monotone_in_delta(e1, e2):
    p = cm.affine_array()
    b = cv.compute_budgets(p)
    arr = cv.ArraySet(tuple(((p.maps[i].source_id, t, i), (p.maps[j].source_id, t, j))
                            for t in p.element_ids for i, j in cm.array_slots(p)), 2)
    lo, hi = sorted((e1, e2))
    small = cv.covering_certificates(p, BC, b.inflate(lo), arr)
    big = cv.covering_certificates(p, BC, b.inflate(hi), arr)
    for s, g in zip(small, big):
        assert not (g.verdict and not s.verdict)


def test_certificates_reproducible(array_setup):
    p, bcg, b, _, arr = array_setup
    a = [c.to_json() for c in cv.covering_certificates(p, bcg, b, arr)]
    c = [c.to_json() for c in cv.covering_certificates(p, bcg, b, arr)]
    assert a == c


def test_certificate_rejects_pass_with_bad_margin():
    with pytest.raises(ValueError):
        cv.Certificate("A1", True, {"m": 0.0})


def test_cover_margin_sign():
    m, wit = cv.cover_margin(np.array([-1.0, 0.0]), np.array([0.1, 1.0]), -0.9, 0.9)
    assert m == pytest.approx(0.05, abs=1e-12) and wit is None
    m, wit = cv.cover_margin(np.array([-1.0, 0.2]), np.array([0.0, 1.0]), -0.9, 0.9)
    assert m < 0 and 0.0 <= wit <= 0.2


def test_delta_headroom_positive(affine3_setup):
    p, bcg, b, _ = affine3_setup
    h = cv.delta_headroom(p, bcg, b)
    assert h > 0
    assert not math.isinf(h)
    assert not cv.all_pass(cv.covering_certificates(p, bcg, b.inflate(2 * h + 1e-9)))
