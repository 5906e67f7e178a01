import json
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blender_lab import covering as cv
from blender_lab import crossmap as cm
from blender_lab import nabs
from blender_lab.errors import Exhausted, Inadmissible, NoAlpha, Violation


def test_plan_alpha_0045():
    plan = nabs.plan_grid(0.045, 0.9)
    assert (plan.m, plan.N) == (5, 41)
    assert plan.x_C == pytest.approx(0.9 * 9 / 41)
    assert plan.D == pytest.approx(2 * 0.9 / 41)
    lo, D, hi = plan.checks["spacing"]
    assert lo == pytest.approx(0.03161, abs=1e-5) and hi == pytest.approx(0.04939, abs=1e-5)
    assert plan.checks["separated_alpha"][1] == pytest.approx(20.5 / 184.5)
    assert plan.arity_bound == 103 and 3 * plan.N == 123


def test_plan_small_alpha():
    plan = nabs.plan_grid(0.01, 0.5)
    assert (plan.m, plan.N) == (20, 161)


def test_plan_rejects_large_alpha():
    with pytest.raises(NoAlpha):
        nabs.plan_grid(0.06, 0.9)


def grid_ok(alpha, x_B, m):
    """All four grid invariants in exact arithmetic on the binary inputs."""
    a, xb, N = Fraction(alpha), Fraction(x_B), 8 * m + 1
    xc = xb * (2 * m - 1) / N
    D, xg = 2 * xb / N, (xc + a * xb + xb) / 2
    return (Fraction(8, 5) / a < N < Fraction(9, 4) / a and xb / 9 < xc < xb / 4
            and a * (xb - xc) < D < a * (xb + xc) and xc + a * xb < xg < xb)


def test_plan_spacing_can_bind():
    # the smallest N in the window misses the upper spacing bound here
    alpha, x_B = 0.01171875, 0.5
    assert 8 / (5 * alpha) < 137 < 9 / (4 * alpha) and not grid_ok(alpha, x_B, 17)
    assert nabs.plan_grid(alpha, x_B).m == 18


@settings(max_examples=200, deadline=None)
@given(st.floats(1e-3, 0.0499), st.floats(0.05, 0.99))
def test_plan_invariants_and_minimality(alpha, x_B):
    plan = nabs.plan_grid(alpha, x_B)
    assert grid_ok(alpha, x_B, plan.m)
    assert not any(grid_ok(alpha, x_B, m) for m in range(2, plan.m))
    assert plan.x_n[0] == pytest.approx(-x_B) and plan.x_n[-1] == pytest.approx(x_B)


def test_iterate_powers():
    fam = nabs.dyadic_family(0.4)
    assert nabs.iterate_family(fam, 3).alpha == pytest.approx(0.064)
    with pytest.raises(NoAlpha):
        nabs.plan_grid(nabs.iterate_family(fam, 3).alpha, 0.9)
    assert nabs.iterate_family(fam, 4).alpha == pytest.approx(0.0256)
    assert nabs.iterate_family(fam, 1) is fam


def test_iterate_matches_map_composition():
    fam = nabs.dyadic_family(0.045)
    delta, (i, j) = 0.01, (2000, 2001)
    p = nabs.build_markov(fam, (i, j), delta)
    A, B = nabs.iterate_family(fam, 2).coefficients(delta, (i, j))
    for x in np.linspace(-0.9, 0.9, 7):
        y0 = p.boxes[0].y[0].mid
        x1, _, _ = cm.eval_forward(p.maps[0], x, y0, 0.0, check_strip=False)
        y1 = p.boxes[1].y[0].mid
        x2, _, _ = cm.eval_forward(p.maps[1], x1, y1, 0.0, check_strip=False)
        assert x2 == pytest.approx(A * x + B, abs=1e-10)


def test_build_two_elements():
    p = nabs.build_markov(nabs.dyadic_family(0.045), (2000, 2001), 0.01)
    assert len(p.element_ids) == 2
    for m in p.maps:
        cm.verify_hyperbolicity(m)
        cm.verify_partial_hyperbolicity(m)
    assert cm.verify_partition(p)
    assert nabs.markov_certificate(p).verdict


def test_build_below_threshold():
    with pytest.raises((Inadmissible, Violation)):
        nabs.build_markov(nabs.dyadic_family(0.045), (10, 11), 0.01)


def test_cu_family_inverted():
    fam = nabs.cu_family(1.8)
    p = nabs.build_markov(fam, (2000, 2001), 0.01)
    assert p.orientation == "cu"
    q = cm.invert_partition(p)
    assert q.orientation == "cs"
    want = sorted(1 / fam.coefficients(0.01, i)[0] for i in (2000, 2001))
    got = sorted({round(float(m.jac_lo[0, 0]), 12) for m in q.maps})
    assert got == pytest.approx(want, abs=1e-10)
    for m in q.maps:
        assert abs(m.jac_lo[0, 0] - 1 / 1.8) < 0.01
        cm.verify_hyperbolicity(m)


def test_gap_family_exhausted():
    fam = nabs.dyadic_family(0.045, avoid=(0.2, 0.3))
    plan = nabs.plan_grid(0.045, 0.9)
    with pytest.raises(Exhausted) as ei:
        nabs.select_indices(fam, plan, [2.0 ** -s for s in range(4, 12)])
    gp = ei.value.details["grid_point"]
    assert 0.2 - plan.D <= gp <= 0.3 + plan.D


def test_dyadic_spec_shape(dyadic):
    fam, plan, spec, p, b, ws = dyadic
    # base grid x_0..x_N, two shifted copies x_0..x_{N-1}, one extra point each
    per_family = (plan.N + 1) + 2 * (plan.N + 1)
    assert len(spec.indices) == plan.k * per_family == 2 * 126
    assert len(set(spec.indices)) == len(spec.indices)
    assert all(fam.admissible(spec.delta, i) for i in spec.indices)
    assert all(v > 0 for _, v in nabs.grid_inequalities(plan, spec.delta_tilde))


def test_dyadic_spec_certifies(dyadic):
    fam, plan, spec, p, b, ws = dyadic
    certs = nabs.certify_partition(p, plan.bcg, b, nabs.arrays_for(p, spec, plan.k),
                                   separated=True, strong_a3=True, arity=(3 * plan.N, plan.arity_bound))
    byname = {c.property: c for c in certs}
    assert {"A1", "A2", "A3", "B1", "B4", "SEPARATED", "ARRAYED"} <= set(byname)
    assert cv.all_pass(certs)
    # the grid-scan oracle agrees with the A3 verdict on the center windows
    xs = np.linspace(-plan.x_C, plan.x_C, 10_001)
    w = max(b.delta_ss.values())
    assert all(any(v.center_window.lo + w < x < v.center_window.hi - w for v in ws) for x in xs)


def test_one_shift_copy_fails_arity(dyadic):
    fam, plan, spec, _, _, _ = dyadic
    sub = spec.restrict((0,))
    p = nabs.build_markov(fam, sub)
    b = cv.compute_budgets(p, plan.alpha, nabs.grid_offsets(p, sub))
    certs = nabs.certify_partition(p, plan.bcg, b, nabs.arrays_for(p, sub, plan.k),
                                   separated=True, strong_a3=True, arity=(plan.N, plan.arity_bound))
    byname = {c.property: c for c in certs}
    assert not byname["A3"].verdict
    assert "arity" in json.dumps(byname["A3"].witness)
    assert not byname["SEPARATED"].verdict
    assert byname["ARRAYED"].verdict


def test_spec_json_round_trip(dyadic):
    _, plan, spec, _, b, _ = dyadic
    text = spec.to_json(plan, b)
    back = nabs.SpecificationPair.from_dict(json.loads(text))
    assert back == spec
    assert back.to_json(plan, b) == text


def test_select_is_deterministic(dyadic):
    fam, plan, spec, _, _, _ = dyadic
    assert nabs.select_indices(fam, plan) == spec


def test_saddle_focus_coefficients_near_target():
    gen = nabs.SaddleFocusGenerator()
    fam = nabs.saddle_focus_family(gen)
    delta = 0.01
    used = set()
    for x in np.linspace(-0.9, 0.9, 9):
        idx = fam.index_near(delta, float(x), used)
        used.add(idx)
        A, B = fam.coefficients(delta, idx)
        assert abs(A - gen.target_alpha) < 0.01
        assert fam.admissible(delta, idx)
        # the appendix formula, evaluated independently
        k, m = idx
        ref = (B - gen.c) * math.sin(k * gen.omega + gen.eta1) / math.sin(k * gen.omega + gen.eta2)
        assert A == pytest.approx(ref, rel=1e-9, abs=1e-15)
