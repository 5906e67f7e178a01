"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line."""

import math
import time
from fractions import Fraction

import numpy as np
import pytest

from blender_lab import covering as cv
from blender_lab import crossmap as cm
from blender_lab import dynamics as dy
from blender_lab import nabs
from blender_lab.errors import BadMu, BlenderError, InvariantBreach
from blender_lab.geometry import SsDisc

from conftest import pair_arrays

ALPHA = 0.045
X_B = 0.9
ARRAY_BCG = cv.BcgStructure(0.9, 0.3, 0.7)


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail
    return emit


# ---------------------------------------------------------------- oracles

def union_covers(windows, x_B, shrink=Fraction(0)):
    """Exact check that the open windows, each shrunk by ``shrink``, cover [-x_B, x_B].

    If the closed uncovered set is nonempty its least point is -x_B or some
    right endpoint, so those are the only candidates.
    """
    ws = [(lo + shrink, hi - shrink) for lo, hi in windows if hi - lo > 2 * shrink]
    cands = [-x_B] + [hi for _, hi in ws if -x_B <= hi <= x_B]
    return all(any(lo < c < hi for lo, hi in ws) for c in cands)


def series_x(p, strips):
    """Leaf x-value of a strip word from the affine coefficients alone."""
    x = 0.0
    for s in reversed(strips):
        m = p.maps[s[2]]
        x = m.spec["linear"][0][0] * x + m.spec["offset"][0]
    return x


def leaf_point(p, strips, y_top, sweeps=60):
    """Point of the unstable leaf of a strip word with top y-coordinate ``y_top``.

    The orbit is a two-point boundary problem: x and z are pushed forward from
    the deep level, y is pulled back from the top.  Alternating sweeps of the
    cross relation converge since both directions contract.
    """
    maps = [p.maps[s[2]] for s in strips]
    ys = [np.array([y_top])] + [np.array([c.mid for c in p.box(s[0]).y]) for s in strips]
    prev = None
    for _ in range(sweeps):
        x, z = 0.0, np.array([c.mid for c in maps[-1].source.z])
        for j in range(len(maps) - 1, -1, -1):
            xb, yy, zb = maps[j].cross_fn(np.array([x]), ys[j][None], z[None])
            ys[j + 1], x, z = yy[0], float(xb[0]), zb[0]
        if prev is not None and abs(x - prev) == 0.0:
            break
        prev = x
    return x, z


def contact_x(p, family, strips):
    """x of the leaf point where the family comes closest to the leaf (ternary search in t)."""
    zc = family.template.z_mid

    def gap(t):
        xl, zl = leaf_point(p, strips, float(family.y_at(t)[0]))
        xf = float(family.x_at(t)) + float(np.dot(family.template.x_slope, zl - zc))
        return (xf - xl) * (1 if family.coeffs[2] < 0 else -1), xl

    lo, hi = family.t_domain.lo, family.t_domain.hi
    for _ in range(50):
        a, c = lo + (hi - lo) / 3, hi - (hi - lo) / 3
        lo, hi = (a, hi) if gap(a)[0] < gap(c)[0] else (lo, c)
    return gap(0.5 * (lo + hi))[1]


def leaf_oracle(p, family, strips):
    if any(m.spec.get("psi") for m in p.maps):
        return contact_x(p, family, strips)
    return series_x(p, strips)


# ---------------------------------------------------------------- shared builders

def affine3_run(p):
    bcg = cv.BcgStructure(X_B)
    b = cv.compute_budgets(p)
    return p, bcg, b, cv.strip_windows(p, bcg, b)


def array_run(p):
    b = cv.compute_budgets(p)
    return p, ARRAY_BCG, b, cv.strip_windows(p, ARRAY_BCG, b), pair_arrays(p)


def dyadic_run(psi=0.0):
    fam = nabs.dyadic_family(ALPHA)
    plan = nabs.plan_grid(ALPHA, X_B, k=2)
    spec = nabs.select_indices(fam, plan)
    p = nabs.build_markov(fam, spec, psi=psi)
    b = cv.compute_budgets(p, plan.alpha, nabs.grid_offsets(p, spec))
    return fam, plan, spec, p, b, cv.strip_windows(p, plan.bcg, b)


def criterion4(p, bcg, ws, n=100):
    rng = np.random.default_rng(2024)
    worst_res, worst_depth, worst_err = 0.0, 0, 0.0
    for x0 in rng.uniform(-X_B, X_B, n):
        box = p.box(2)
        disc = SsDisc.constant(2, float(x0), [box.y[0].mid], box.z)
        r = dy.find_unstable_intersection(p, bcg, ws, disc, 1e-9)
        worst_res, worst_depth = max(worst_res, r.residual), max(worst_depth, r.depth)
        pts = dy.replay_orbit(p, r, disc, bcg)
        worst_err = max(worst_err, float(np.max(np.abs(pts[0] - np.array([r.point[0], *r.point[1], *r.point[2]])))))
        # every level sits in its element and every step satisfies the cross relation
        du = p.boxes[0].d_u
        for k, s in enumerate(r.strips):
            m = p.maps[s[2]]
            x, y, z = pts[k + 1, 0], pts[k + 1, 1:1 + du], pts[k + 1, 1 + du:]
            xb, yy, zb = m.cross_fn(np.array([x]), pts[k, 1:1 + du][None], z[None])
            err = max(abs(xb[0] - pts[k, 0]), float(np.max(np.abs(yy[0] - y))),
                      float(np.max(np.abs(zb[0] - pts[k, 1 + du:]))))
            src = p.box(m.source_id)
            gap = max(src.x.lo - x, x - src.x.hi, 0.0)
            for c, v in zip(src.y + src.z, list(y) + list(z)):
                gap = max(gap, c.lo - v, v - c.hi)
            worst_err = max(worst_err, err, gap)
    ok = worst_res <= 1e-9 and worst_depth <= 35 and worst_err <= 1e-8
    return ok, f"residual {worst_res:.2e}, depth {worst_depth}, re-evaluation error {worst_err:.1e}"


def criterion6(p, plan, b, ws, alpha):
    f = dy.folding_family(p, 1, 0.0, 0.2)
    r = dy.locate_tangency(p, plan.bcg, ws, f, 1e-8, 60, budgets=b)
    w = r.widths
    ratios = [w[i + 1] / w[i] for i in range(len(w) - 1)][4:]
    in_band = all(alpha - 0.05 <= q <= alpha + 0.05 for q in ratios)
    x = leaf_oracle(p, f, r.strips)
    ok = in_band and r.leaf.x_window.contains(x) and w[-1] <= 1e-8 and len(w) <= 60
    return ok, f"{len(w)} steps, final width {w[-1]:.2e}, ratios {[round(q, 4) for q in ratios]}, oracle inside"


def criterion7(p, bcg, b, ws, arr):
    f = dy.folding_family(p, 7, -0.7, 0.0, z_slope=0.8 * p.cone_constants.K_ss, kind="prefolding")
    boxes = dy.all_leaf_boxes(p, bcg, ws, arr, f, 5, budgets=b)
    ok = len(boxes) == 62
    for d in range(1, 6):
        ok = ok and dy.disjoint([v.x_window for k, v in boxes.items() if len(k) == d])
    root = dy.follow_prefix(p, bcg, ws, arr, f, (), budgets=b)
    ctx = dy._ctx(p, bcg, ws, b, arr)
    missed = 0
    for k, v in boxes.items():
        path = dy._follow(ctx, None, k + (1,) * (25 - len(k)), root)
        if not v.x_window.contains(leaf_oracle(p, f, [w.strip_id for w in path.strips])):
            missed += 1
    return ok and missed == 0, f"{len(boxes)} boxes, disjoint per depth, {missed} oracle misses"


# ---------------------------------------------------------------- criteria

def test_criterion_1_grid_plan(report):
    t = time.perf_counter()
    plan = nabs.plan_grid(ALPHA, X_B, k=2)
    a = Fraction(ALPHA)
    ratio = Fraction(2 * plan.m - 1, 8 * plan.m + 1)
    spacing = plan.checks["spacing"]
    ok = (plan.N == 41 and plan.m == 5 and ratio == Fraction(9, 41)
          and Fraction(1, 9) < ratio < Fraction(1, 4)
          and Fraction(8, 5) / a < 41 < Fraction(9, 4) / a
          and abs(spacing[0] - 0.9 * (1 - 9 / 41) * ALPHA) <= 1e-12
          and abs(spacing[1] - 1.8 / 41) <= 1e-12
          and abs(spacing[2] - 0.9 * (1 + 9 / 41) * ALPHA) <= 1e-12
          and spacing[0] < spacing[1] < spacing[2]
          and round(spacing[0], 5) == 0.03161 and round(spacing[1], 5) == 0.04390
          and round(spacing[2], 5) == 0.04939
          and a < Fraction(41, 2) / Fraction(369, 2)
          and 3 * plan.N == 123 and plan.arity_bound == 103
          and math.floor(Fraction(9, 10) / (a * Fraction(9, 10) * ratio)) + 2 == 103)
    dt = time.perf_counter() - t
    report(1, ok and dt < 1.0, f"N=41, m=5, x_C/x_B=9/41, spacing {spacing[0]:.5f}<{spacing[1]:.5f}<{spacing[2]:.5f}, "
                               f"3N=123>=103, {dt * 1e3:.1f} ms")


def test_criterion_2_end_to_end(report):
    t = time.perf_counter()
    fam = nabs.dyadic_family(ALPHA)
    plan = nabs.plan_grid(ALPHA, X_B, k=2)
    spec = nabs.select_indices(fam, plan)
    certs = nabs.certify_specification(fam, spec, plan)
    dt = time.perf_counter() - t
    names = {c.property for c in certs}
    need = {"MARKOV", "A1", "A2", "A3", "B1", "B2", "B2'", "B3", "B3'", "B4", "SEPARATED", "ARRAYED"}
    ok = need <= names and cv.all_pass(certs) and dt < 30.0
    report(2, ok, f"{len(certs)} certificates all PASS={cv.all_pass(certs)}, smallest margin "
                  f"{nabs.smallest_margin(certs):.2e}, {dt:.1f} s")


def test_criterion_3_covering_oracle(report):
    t = time.perf_counter()
    rng = np.random.default_rng(7)
    agree, unsound, n_pass = 0, 0, 0
    for _ in range(1000):
        x_B = float(rng.uniform(0.3, 0.95))
        bcg = cv.BcgStructure(x_B)
        k = int(rng.integers(1, 7))
        coeffs = [(float(rng.uniform(0.1, 0.9)), float(rng.uniform(-1.0, 1.0))) for _ in range(k)]
        ws = cv.affine_windows(coeffs, bcg)
        exact = [(Fraction(B) - Fraction(A) * Fraction(x_B), Fraction(B) + Fraction(A) * Fraction(x_B))
                 for A, B in coeffs]
        tool = cv.check_A1(None, bcg, ws, cv.uniform_budget(ws)).verdict
        oracle = union_covers(exact, Fraction(x_B))
        agree += tool == oracle
        n_pass += oracle
        w = float(rng.uniform(1e-4, 0.05))
        tool_d = cv.check_A1(None, bcg, ws, cv.uniform_budget(ws, delta_ss=w)).verdict
        if tool_d and not union_covers(exact, Fraction(x_B), Fraction(w)):
            unsound += 1
    dt = time.perf_counter() - t
    report(3, agree == 1000 and unsound == 0 and dt < 10.0,
           f"Delta=0 agreement {agree}/1000 ({n_pass} covering), Delta>0 unsound {unsound}, {dt:.1f} s")


def test_criterion_4_blender_property(report):
    p, bcg, _, ws = affine3_run(cm.affine3())
    ok, detail = criterion4(p, bcg, ws)
    report(4, ok, "100 discs on affine3: " + detail)


def sample_point(m, rng):
    x = rng.uniform(m.source.x.lo, m.source.x.hi)
    y = [rng.uniform(c.lo, c.hi) for c in m.ybar_box]
    z = [rng.uniform(c.lo, c.hi) for c in m.source.z]
    return np.array([x, *y, *z])


def fd_error(m, rng, n=20, h=1e-6):
    du = m.d_u
    worst = 0.0
    for _ in range(n):
        v = sample_point(m, rng)
        J = m.jac_fn(v[:1], v[None, 1:1 + du], v[None, 1 + du:])[0]
        fd = np.zeros_like(J)
        for k in range(len(v)):
            e = np.zeros(len(v))
            e[k] = h
            a = np.concatenate([np.ravel(c) for c in m.apply((v + e)[:1], (v + e)[None, 1:1 + du], (v + e)[None, 1 + du:])])
            b = np.concatenate([np.ravel(c) for c in m.apply((v - e)[:1], (v - e)[None, 1:1 + du], (v - e)[None, 1 + du:])])
            fd[:, k] = (a - b) / (2 * h)
        worst = max(worst, float(np.max(np.abs(J - fd))))
    return worst


def saddle_focus_model():
    fam = nabs.saddle_focus_family()
    used, idx = set(), []
    for x in np.linspace(-0.9, 0.9, 7):
        i = fam.index_near(0.01, float(x), used)
        used.add(i)
        idx.append(i)
    return nabs.build_markov(fam, idx, 0.01)


def test_criterion_5_cones(report):
    rng = np.random.default_rng(5)
    models = {"horseshoe": cm.horseshoe(), "affine3": cm.affine3(), "affine-array": cm.affine_array(),
              "nabs-dyadic": dyadic_run()[3], "nabs-saddlefocus": saddle_focus_model()}
    worst_margin, worst_growth, worst_fd = math.inf, math.inf, 0.0
    for name, p in models.items():
        for cone in ("u", "s", "ss"):
            # 10^3 pairs per cone and model, spread over the maps
            per = max(1, math.ceil(1000 / len(p.maps)))
            for m in p.maps:
                mg, gr = cm.cone_sample_check(m, p.cone_constants, cone, per, rng)
                worst_margin, worst_growth = min(worst_margin, mg), min(worst_growth, gr - 1.0)
        for m in p.maps[:6]:
            worst_fd = max(worst_fd, fd_error(m, rng), fd_error(cm.perturb(m, 1e-3), rng))
    ok = worst_margin >= 1e-6 and worst_growth >= 1e-6 and worst_fd <= 1e-8
    report(5, ok, f"{len(models)} models, min cone margin {worst_margin:.2e}, min growth-1 {worst_growth:.2e}, "
                  f"max |J - FD| {worst_fd:.1e}")


def test_criterion_6_tangency(report):
    _, plan, _, p, b, ws = dyadic_run()
    ok, detail = criterion6(p, plan, b, ws, ALPHA)
    report(6, ok, "nabs-dyadic: " + detail)


def test_criterion_7_array_injectivity(report):
    t = time.perf_counter()
    ok, detail = criterion7(*array_run(cm.affine_array()))
    dt = time.perf_counter() - t
    report(7, ok and dt < 20.0, f"affine-array k=2: {detail}, {dt:.1f} s")


def test_criterion_8_prefolding(report):
    p, bcg, b, ws, _ = array_run(cm.affine_array())
    n = 3
    mu0, mu1 = dy.mu_bounds(p, bcg, ws, n, element_id=7, budgets=b)
    _, x_star = dy.fixed_leaf(p, 7)
    alpha = p.maps[0].spec["linear"][0][0]
    # the strip window is shrunk by 3 Delta in the image, i.e. by 3 Delta / alpha
    # in the element the tip is pulled back into; the tip moves by mu / alpha^n
    closed = alpha ** n * (bcg.x_B - 3 * b.delta[0] / alpha - x_star)

    def bad(mu):
        try:
            dy.make_prefolding(p, bcg, "right_case", n, mu, windows=ws, element_id=7, budgets=b)
            return False
        except BadMu:
            return True
        except InvariantBreach:
            return False

    lo, hi = 0.5 * (mu0 + mu1), 2.0 * mu1
    while hi - lo > 1e-12:
        mid = 0.5 * (lo + hi)
        lo, hi = (lo, mid) if bad(mid) else (mid, hi)
    right = dy.make_prefolding(p, bcg, "right_case", n, 0.3 * mu1 + 0.7 * mu0, windows=ws, element_id=7, budgets=b)
    left = dy.make_prefolding(p, bcg, "left_case", n, 0.0, windows=ws, element_id=7, budgets=b)
    cr, cl = dy.check_prefolding(right, bcg, b.delta_tilde), dy.check_prefolding(left, bcg, b.delta_tilde)
    t1, t0, t2 = dy.marker_parameters(left)
    ok = (mu1 > 0 and bad(mu1) and not bad(mu1 * (1 - 1e-9)) and abs(hi - mu1) <= 1e-10
          and abs(mu1 - closed) <= 1e-10 and cr["ok"] and cl["ok"] and cr["side"] == "right"
          and cl["side"] == "left" and t1 < t0 < t2)
    report(8, ok, f"mu_1={mu1:.12f} (bisection {hi:.12f}, closed form {closed:.12f}), "
                  f"right/left families verified, left markers t={t1:.3f}<{t0:.3f}<{t2:.3f}")


def _psi_level(certify_at, margin, rho_hi):
    head = dy.psi_headroom(certify_at, rho_hi=rho_hi, iters=14)
    return 0.5 * min(margin, head), head


def _safe(fn):
    def at(rho):
        try:
            return fn(rho)
        except BlenderError as e:
            return [cv.Certificate("A1", False, {"error": -1.0}, {"reason": str(e)})]
    return at


def test_criterion_9_robustness(report):
    lines, ok = [], True

    a3 = cm.affine3()
    cert3 = _safe(lambda r: cv.covering_certificates(*affine3_run(cm.perturb_partition(a3, r) if r else a3)[:3]))
    rho, head = _psi_level(cert3, nabs.smallest_margin(cert3(0.0)), 0.5)
    p, bcg, _, ws = affine3_run(cm.perturb_partition(a3, rho))
    good, detail = criterion4(p, bcg, ws)
    ok &= good and rho > 0
    lines.append(f"c4 rho={rho:.3g} (headroom {head:.3g}) {good}")

    fam, plan, spec, _, _, _ = dyadic_run()
    certn = _safe(lambda r: nabs.certify_specification(fam, spec, plan, psi=r))
    rho, head = _psi_level(certn, nabs.smallest_margin(certn(0.0)), 0.01)
    _, plan, _, p, b, ws = dyadic_run(psi=rho)
    good, _ = criterion6(p, plan, b, ws, ALPHA)
    ok &= good and rho > 0 and cv.all_pass(certn(rho))
    lines.append(f"c6 rho={rho:.3g} (headroom {head:.3g}) {good}")

    aa = cm.affine_array()
    certa = _safe(lambda r: cv.covering_certificates(*array_run(cm.perturb_partition(aa, r) if r else aa)[:3],
                                                     pair_arrays(aa)))
    rho, head = _psi_level(certa, nabs.smallest_margin(certa(0.0)), 0.5)
    good, _ = criterion7(*array_run(cm.perturb_partition(aa, rho)))
    ok &= good and rho > 0
    lines.append(f"c7 rho={rho:.3g} (headroom {head:.3g}) {good}")
    report(9, ok, "; ".join(lines))
