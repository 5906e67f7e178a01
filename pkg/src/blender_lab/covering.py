"""Base/center/gap windows of vertical strips and the covering certificates.

Every predicate only looks at x-projections of ss-discs, so the checks are
exact statements about finitely many open intervals: a disc whose
x-projection has width at most ``w`` (the ss-deviation bound of the host
element) fits in an open window iff its midpoint is in the window shrunk by
``w``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .crossmap import MarkovPartition
from .errors import EmptyWindow
from .geometry import Interval, down, up


@dataclass(frozen=True)
class BcgStructure:
    """Symmetric base/center/gap coordinates shared by every element."""

    x_B: float
    x_C: float | None = None
    x_G: float | None = None

    def __post_init__(self):
        if not 0.0 < self.x_B < 1.0:
            raise ValueError(f"x_B={self.x_B} outside (0, 1)")
        if self.x_C is not None and not 0.0 < self.x_C < self.x_B:
            raise ValueError("need 0 < x_C < x_B")
        if self.x_G is not None and (self.x_C is None or not self.x_C < self.x_G < self.x_B):
            raise ValueError("need x_C < x_G < x_B")

    @property
    def base(self) -> Interval:
        return Interval(-self.x_B, self.x_B)

    @property
    def center(self) -> Interval:
        return Interval(-self.x_C, self.x_C)

    def gap_slices(self, delta_tilde: float) -> tuple[Interval, Interval]:
        """x-windows of the left and right gap slices of an element."""
        r = 3.0 * delta_tilde
        return Interval.around(-self.x_G, r), Interval.around(self.x_G, r)


@dataclass(frozen=True)
class DeviationBudget:
    delta: tuple[float, ...]  # per map
    delta_tilde: float
    delta_ss: dict[int, float]
    delta_u: dict[int, float]

    def inflate(self, eps: float) -> DeviationBudget:
        return DeviationBudget(tuple(up(d + eps) for d in self.delta), up(self.delta_tilde + eps),
                               {k: up(v + eps) for k, v in self.delta_ss.items()},
                               {k: up(v + eps) for k, v in self.delta_u.items()})


def compute_budgets(p: MarkovPartition, alpha: float | None = None,
                    grid_offsets: dict[int, float] | None = None) -> DeviationBudget:
    """Deviation budgets of every map.

    ``delta[i]`` is the max of the center-coefficient drift, the center
    deviation and the ss/u disc deviations of the source element.
    ``grid_offsets`` maps a map index to |B_i - x_n| for grid-placed strips.
    """
    if p.cone_constants is None:
        raise ValueError("partition has no cone constants")
    alpha = p.alpha if alpha is None else alpha
    K = p.cone_constants
    d_ss = {e: up(K.K_ss * max(c.width for c in b.z)) for e, b in zip(p.element_ids, p.boxes)}
    d_u = {e: up(K.K_u * max(c.width for c in b.y)) for e, b in zip(p.element_ids, p.boxes)}
    delta = []
    for m in p.maps:
        drift = up(abs(abs(m.center[0]) - alpha))
        delta.append(max(drift, m.center_deviation, d_ss[m.source_id], d_u[m.source_id]))
    offs = grid_offsets or {}
    tilde = max(up(d + offs.get(k, 0.0)) for k, d in enumerate(delta))
    return DeviationBudget(tuple(delta), tilde, d_ss, d_u)


@dataclass(frozen=True)
class StripWindow:
    strip_id: tuple[int, int, int]  # (source element, target element, map index)
    base_window: Interval
    center_window: Interval | None
    gap_windows: tuple[Interval, Interval] | None  # positional (left, right)
    orientation: int
    delta: float

    @property
    def target(self) -> int:
        return self.strip_id[1]


def strip_windows(p: MarkovPartition, bcg: BcgStructure, budgets: DeviationBudget,
                  alpha: float | None = None) -> list[StripWindow]:
    """Windows of every strip, with the 3*Delta_i safety margin and 7*Delta~ gap enclosures."""
    alpha = p.alpha if alpha is None else alpha
    out = []
    for k, m in enumerate(p.maps):
        d = budgets.delta[k]
        B = m.center[1]
        r_base = down(alpha * bcg.x_B - 3.0 * d)
        if r_base <= 2.0 * d:
            raise EmptyWindow(f"base window of map {k} consumed by its margin", map=k, radius=r_base)
        # open windows are rounded inward
        base = Interval(up(B - r_base), down(B + r_base))
        center = gaps = None
        if bcg.x_C is not None:
            r_c = down(alpha * bcg.x_C - 3.0 * d)
            if r_c <= 2.0 * d:
                raise EmptyWindow(f"center window of map {k} consumed by its margin", map=k, radius=r_c)
            center = Interval(up(B - r_c), down(B + r_c))
        if bcg.x_G is not None:
            g = 7.0 * budgets.delta_tilde
            gaps = (Interval.around(B - alpha * bcg.x_G, g), Interval.around(B + alpha * bcg.x_G, g))
        for t in m.target_ids:
            out.append(StripWindow((m.source_id, t, k), base, center, gaps, m.center_sign, d))
    return out


def affine_windows(coeffs: Sequence[tuple[float, float]], bcg: BcgStructure, alpha: float | None = None,
                   delta: float = 0.0, delta_tilde: float | None = None, target: int = 1) -> list[StripWindow]:
    """Windows of bare (A, B) strips into one target, without a partition.

    With ``alpha=None`` each strip uses its own |A| as the contraction rate.
    """
    tilde = delta if delta_tilde is None else delta_tilde
    out = []
    for k, (A, B) in enumerate(coeffs):
        a = abs(A) if alpha is None else alpha
        r = a * bcg.x_B - 3.0 * delta
        if r <= 2.0 * delta:
            raise EmptyWindow(f"base window of strip {k} consumed by its margin", map=k, radius=r)
        base = Interval(B - r, B + r)
        center = gaps = None
        if bcg.x_C is not None:
            rc = a * bcg.x_C - 3.0 * delta
            if rc <= 2.0 * delta:
                raise EmptyWindow(f"center window of strip {k} consumed by its margin", map=k, radius=rc)
            center = Interval(B - rc, B + rc)
        if bcg.x_G is not None:
            gaps = (Interval.around(B - a * bcg.x_G, 7.0 * tilde), Interval.around(B + a * bcg.x_G, 7.0 * tilde))
        out.append(StripWindow((k, target, k), base, center, gaps, 1 if A > 0 else -1, delta))
    return out


def uniform_budget(windows: Sequence[StripWindow], delta_ss: float = 0.0, delta_tilde: float = 0.0) -> DeviationBudget:
    ts = {w.target for w in windows}
    return DeviationBudget(tuple(w.delta for w in windows), delta_tilde,
                           {t: delta_ss for t in ts}, {t: 0.0 for t in ts})


@dataclass(frozen=True)
class ArraySet:
    """Vertical k-arrays: each entry lists the strip ids of one array (all in one target)."""

    arrays: tuple[tuple[tuple[int, int, int], ...], ...]
    k: int

    def __post_init__(self):
        for a in self.arrays:
            if len(a) != self.k or len({s[1] for s in a}) != 1:
                raise ValueError("every array needs k strips in a single target element")


def singleton_arrays(windows: Sequence[StripWindow]) -> ArraySet:
    return ArraySet(tuple((w.strip_id,) for w in windows), 1)


@dataclass(frozen=True)
class Certificate:
    property: str
    verdict: bool
    margins: dict[str, float] = field(default_factory=dict)
    witness: dict | None = None

    def __post_init__(self):
        if self.verdict and any(not v > 0 for v in self.margins.values()):
            raise ValueError(f"{self.property}: PASS with a nonpositive margin {self.margins}")

    @property
    def min_margin(self) -> float:
        return min(self.margins.values()) if self.margins else math.inf

    def to_dict(self) -> dict:
        d = {"property": self.property, "verdict": "PASS" if self.verdict else "FAIL",
             "margins": {k: float(v) for k, v in self.margins.items()}}
        if self.witness is not None:
            d["witness"] = self.witness
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=False)


def _cert(prop: str, margins: dict[str, float], witness=None) -> Certificate:
    ok = all(v > 0 for v in margins.values())
    return Certificate(prop, ok, margins, None if ok else witness)


# ---------------------------------------------------------------- 1-d kernels

def covers(lo: np.ndarray, hi: np.ndarray, a: float, b: float) -> bool:
    """Do the open intervals (lo_k, hi_k) cover the closed interval [a, b]?"""
    order = np.argsort(lo, kind="stable")
    lo, hi = lo[order], hi[order]
    cur, best, i, n = a, -math.inf, 0, len(lo)
    while True:
        while i < n and lo[i] < cur:
            best = max(best, hi[i])
            i += 1
        if best <= cur:
            return False
        if best > b:
            return True
        cur = best


def uncovered_witness(lo: np.ndarray, hi: np.ndarray, a: float, b: float) -> float:
    """Midpoint of the widest piece of [a, b] missed by the open intervals."""
    order = np.argsort(lo, kind="stable")
    cur, gaps = a, []
    for k in order:
        if lo[k] >= cur:
            gaps.append((cur, min(lo[k], b)))
        cur = max(cur, hi[k])
        if cur > b:
            break
    if cur <= b:
        gaps.append((cur, b))
    gaps = [g for g in gaps if g[0] <= g[1] and g[0] <= b]
    lo_g, hi_g = max(gaps, key=lambda g: g[1] - g[0])
    return float(0.5 * (lo_g + hi_g))


def cover_margin(lo, hi, a: float, b: float) -> tuple[float, float | None]:
    """Signed slack of a cover: the largest uniform shrink that keeps [a, b] covered.

    Negative values give the growth needed to close the largest hole.  The
    sign is taken from the exact test; the magnitude comes from bisection.
    """
    lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
    if len(lo) == 0:
        return -math.inf, 0.5 * (a + b)
    ok = covers(lo, hi, a, b)
    span = max(float(np.max(hi - lo)), b - a, 1e-300)
    if ok:
        good, bad = 0.0, span
        for _ in range(80):
            mid = 0.5 * (good + bad)
            if covers(lo + mid, hi - mid, a, b):
                good = mid
            else:
                bad = mid
        return (good if good > 0 else 5e-324), None
    witness = uncovered_witness(lo, hi, a, b)
    good, bad = span + (b - a), 0.0
    for _ in range(80):
        mid = 0.5 * (good + bad)
        if covers(lo - mid, hi + mid, a, b):
            good = mid
        else:
            bad = mid
    return -good, witness


def _gap(a_lo, a_hi, b_lo, b_hi):
    """Vectorized signed gap between intervals (negative on overlap)."""
    return np.maximum(b_lo - a_hi, a_lo - b_hi)


# ---------------------------------------------------------------- grouping

@dataclass
class _Group:
    targets: list[int]
    idx: np.ndarray  # window indices of the first member target, in a fixed order
    arrays: np.ndarray  # (n_arrays, k) local indices
    w: float


def _groups(windows: Sequence[StripWindow], budgets: DeviationBudget, arrays: ArraySet | None):
    by_target: dict[int, list[int]] = {}
    for n, w in enumerate(windows):
        by_target.setdefault(w.target, []).append(n)
    arr_by_target: dict[int, list[tuple]] = {}
    if arrays is not None:
        for a in arrays.arrays:
            arr_by_target.setdefault(a[0][1], []).append(a)
    groups: dict[tuple, _Group] = {}
    for t in sorted(by_target):
        idx = by_target[t]
        maps = tuple(windows[n].strip_id[2] for n in idx)
        local = {windows[n].strip_id: j for j, n in enumerate(idx)}
        arr = tuple(tuple(local[s] for s in a) for a in arr_by_target.get(t, []))
        key = (maps, budgets.delta_ss[t], arr)
        if key in groups:
            groups[key].targets.append(t)
        else:
            k = arrays.k if arrays is not None else 1
            groups[key] = _Group([t], np.array(idx), np.array(arr, dtype=int).reshape(-1, k),
                                 budgets.delta_ss[t])
    return list(groups.values())


class _Table:
    def __init__(self, windows: Sequence[StripWindow], g: _Group):
        ws = [windows[n] for n in g.idx]
        self.ids = [w.strip_id for w in ws]
        self.b_lo = np.array([w.base_window.lo for w in ws])
        self.b_hi = np.array([w.base_window.hi for w in ws])
        if ws[0].center_window is not None:
            self.c_lo = np.array([w.center_window.lo for w in ws])
            self.c_hi = np.array([w.center_window.hi for w in ws])
        if ws[0].gap_windows is not None:
            self.l_lo = np.array([w.gap_windows[0].lo for w in ws])
            self.l_hi = np.array([w.gap_windows[0].hi for w in ws])
            self.r_lo = np.array([w.gap_windows[1].lo for w in ws])
            self.r_hi = np.array([w.gap_windows[1].hi for w in ws])
        self.w = g.w
        self.arrays = g.arrays


def _shrunk(lo, hi, w):
    return np.nextafter(lo + w, np.inf), np.nextafter(hi - w, -np.inf)


def _ball(b, w, bcg):
    return np.maximum(b - w, -bcg.x_B), np.minimum(b + w, bcg.x_B)


def _worst(prop, name, per_group, margins_extra=None):
    """Fold per-group (margin, witness) pairs into one certificate."""
    best = min(per_group, key=lambda r: r[0])
    m = {name: float(best[0])}
    if margins_extra:
        m.update(margins_extra)
    return _cert(prop, m, best[1])


# ---------------------------------------------------------------- A-properties

def check_A1(p: MarkovPartition | None, bcg: BcgStructure, windows: Sequence[StripWindow],
             budgets: DeviationBudget | None = None) -> Certificate:
    """Base windows shrunk by the disc width cover [-x_B, x_B] in every element."""
    budgets = budgets or uniform_budget(windows)
    res = []
    for g in _groups(windows, budgets, None):
        t = _Table(windows, g)
        lo, hi = _shrunk(t.b_lo, t.b_hi, t.w)
        m, wit = cover_margin(lo, hi, -bcg.x_B, bcg.x_B)
        res.append((m, None if wit is None else {"element": g.targets[0], "x": wit}))
    return _worst("A1", "cover_slack", res)



def _alignment(b, valid, w, bcg, c_lo, c_hi, sep):
    """Best (containment, separation) score for each boundary position.

    ``b`` (nb,) boundary positions, ``c_lo/c_hi`` (nc,) candidate center
    windows, ``sep`` (nb, nc) separation slack already reduced by ``w``.
    """
    blo, bhi = _ball(b, w, bcg)
    contain = np.minimum(blo[:, None] - c_lo[None, :], c_hi[None, :] - bhi[:, None])
    score = np.minimum(contain, sep).max(axis=1, initial=-math.inf)
    score = np.where(valid, score, math.inf)
    return score


def check_A2_A3(p: MarkovPartition | None, bcg: BcgStructure, windows: Sequence[StripWindow],
                budgets: DeviationBudget, strong: bool = False,
                arity: tuple[int, int] | None = None) -> tuple[Certificate, Certificate]:
    """A2 alignment at every base boundary, A3 center coverage.

    ``strong`` additionally requires the centers to cover the whole base;
    ``arity`` = (card, bound) records the counting condition of that version.
    """
    if bcg.x_C is None or any(w.center_window is None for w in windows):
        raise ValueError("A2/A3 need center windows; give the structure an x_C")
    res2, res3, res3s = [], [], []
    for g in _groups(windows, budgets, None):
        t = _Table(windows, g)
        w = t.w
        b = np.concatenate([t.b_lo, t.b_hi])
        owner = np.concatenate([np.arange(len(t.b_lo))] * 2)
        valid = (b > -bcg.x_B) & (b < bcg.x_B)
        sep = _gap(t.c_lo[owner][:, None], t.c_hi[owner][:, None], t.c_lo[None, :], t.c_hi[None, :]) - w
        score = _alignment(b, valid, w, bcg, t.c_lo, t.c_hi, sep)
        k = int(np.argmin(score))
        res2.append((float(score[k]) if np.isfinite(score[k]) else 1.0,
                     {"element": g.targets[0], "x": float(b[k]), "strip": list(t.ids[owner[k]])}))
        lo, hi = _shrunk(t.c_lo, t.c_hi, w)
        m, wit = cover_margin(lo, hi, -bcg.x_C, bcg.x_C)
        res3.append((m, None if wit is None else {"element": g.targets[0], "x": float(wit)}))
        if strong:
            m, wit = cover_margin(lo, hi, -bcg.x_B, bcg.x_B)
            res3s.append((m, None if wit is None else {"element": g.targets[0], "x": wit}))
    a2 = _worst("A2", "alignment_slack", res2)
    margins = {"center_cover_slack": float(min(r[0] for r in res3))}
    witness = min(res3, key=lambda r: r[0])[1]
    if strong:
        worst = min(res3s, key=lambda r: r[0])
        margins["base_center_cover_slack"] = float(worst[0])
        if worst[0] <= 0:
            witness = worst[1]
        if arity is not None:
            card, bound = arity
            margins["arity_slack"] = float(card - bound + 1)
            if card < bound and witness is None:
                witness = {"inequality": "strengthened-A3 arity bound", "card": card, "bound": bound}
            elif card < bound:
                witness = dict(witness, inequality="strengthened-A3 arity bound", card=card, bound=bound)
    return a2, _cert("A3", margins, witness)


# ---------------------------------------------------------------- B-properties

def _array_views(t: _Table):
    a = t.arrays
    common_b_lo, common_b_hi = t.b_lo[a].max(axis=1), t.b_hi[a].min(axis=1)
    common_c_lo, common_c_hi = t.c_lo[a].max(axis=1), t.c_hi[a].min(axis=1)
    hull_b_lo, hull_b_hi = t.b_lo[a].min(axis=1), t.b_hi[a].max(axis=1)
    admissible = (common_b_hi - common_b_lo) > 2.0 * t.w
    return common_b_lo, common_b_hi, common_c_lo, common_c_hi, hull_b_lo, hull_b_hi, admissible


def check_BCG(p: MarkovPartition | None, bcg: BcgStructure, windows: Sequence[StripWindow],
              budgets: DeviationBudget, arrays: ArraySet) -> list[Certificate]:
    """B1, B2, B2', B3, B3', B4 over the declared arrays."""
    if bcg.x_C is None or bcg.x_G is None:
        raise ValueError("BCG checks need x_C and x_G")
    piL, piR = bcg.gap_slices(budgets.delta_tilde)
    out = {name: [] for name in ("B1", "B2", "B2'", "B3", "B3'")}
    b4 = {"gap_slice_center": [], "strip_gap_center": [], "strip_gap_boundary": []}
    b4_witness = None
    for g in _groups(windows, budgets, arrays):
        t = _Table(windows, g)
        w, el = t.w, g.targets[0]
        if len(t.arrays) == 0:
            for name in out:
                out[name].append((-math.inf, {"element": el, "reason": "no arrays"}))
            continue
        cb_lo, cb_hi, cc_lo, cc_hi, hb_lo, hb_hi, adm = _array_views(t)
        # B1
        lo, hi = _shrunk(cb_lo[adm], cb_hi[adm], w)
        m, wit = cover_margin(lo, hi, -bcg.x_B, bcg.x_B)
        out["B1"].append((m, None if wit is None else {"element": el, "x": wit}))
        cand_lo = np.where(adm, cc_lo, math.inf)
        cand_hi = np.where(adm, cc_hi, -math.inf)
        # B2 / B2': boundaries of every strip of every array
        for name, bnd, glo, ghi in (("B2", t.b_hi, t.l_lo, t.l_hi), ("B2'", t.b_lo, t.r_lo, t.r_hi)):
            a = t.arrays
            b = bnd[a].ravel()
            owner = np.repeat(np.arange(len(a)), a.shape[1])
            gap_lo, gap_hi = glo[a].min(axis=1), ghi[a].max(axis=1)
            valid = (b > -bcg.x_B) & (b < bcg.x_B)
            sep = _gap(gap_lo[owner][:, None], gap_hi[owner][:, None], hb_lo[None, :], hb_hi[None, :]) - w
            score = _alignment(b, valid, w, bcg, cand_lo, cand_hi, sep)
            k = int(np.argmin(score))
            out[name].append((float(score[k]) if np.isfinite(score[k]) else 1.0,
                              {"element": el, "x": float(b[k])}))
        # B3 / B3'
        for name, x0, sl in (("B3", -bcg.x_C, piL), ("B3'", bcg.x_C, piR)):
            sep = (_gap(hb_lo, hb_hi, sl.lo, sl.hi) - w)[None, :]
            score = _alignment(np.array([x0]), np.array([True]), w, bcg, cand_lo, cand_hi, sep)
            out[name].append((float(score[0]), {"element": el, "x": x0}))
        # B4
        for sl in (piL, piR):
            b4["gap_slice_center"].append(float(_gap(sl.lo, sl.hi, -bcg.x_C, bcg.x_C)) - w)
        s1 = min(float(np.min(_gap(t.l_lo, t.l_hi, t.c_lo, t.c_hi))),
                 float(np.min(_gap(t.r_lo, t.r_hi, t.c_lo, t.c_hi)))) - w
        s2 = min(float(np.min(_gap(t.l_lo, t.l_hi, t.b_lo, t.b_lo))),
                 float(np.min(_gap(t.r_lo, t.r_hi, t.b_hi, t.b_hi)))) - w
        b4["strip_gap_center"].append(s1)
        b4["strip_gap_boundary"].append(s2)
        if b4_witness is None and min(s1, s2) <= 0:
            b4_witness = {"element": el}
    certs = [_worst(name, {"B1": "array_cover_slack", "B2": "right_boundary_slack",
                           "B2'": "left_boundary_slack", "B3": "left_center_edge_slack",
                           "B3'": "right_center_edge_slack"}[name], out[name])
             for name in ("B1", "B2", "B2'", "B3", "B3'")]
    m4 = {k: float(min(v)) for k, v in b4.items()}
    if b4_witness is None and m4["gap_slice_center"] <= 0:
        b4_witness = {"reason": "gap slice meets the center"}
    certs.append(_cert("B4", m4, b4_witness))
    return certs


# ---------------------------------------------------------------- bundles

def covering_certificates(p: MarkovPartition, bcg: BcgStructure, budgets: DeviationBudget,
                          arrays: ArraySet | None = None, separated: bool = False,
                          strong_a3: bool = False, arity: tuple[int, int] | None = None,
                          alpha: float | None = None) -> list[Certificate]:
    """A1 always; A2/A3 when ``separated``; B1-B4 when arrays are given."""
    try:
        windows = strip_windows(p, bcg, budgets, alpha)
    except EmptyWindow as e:
        return [Certificate("A1", False, {"window_radius": float(e.details.get("radius", 0.0))},
                            {"reason": str(e)})]
    certs = [check_A1(p, bcg, windows, budgets)]
    if separated:
        certs.extend(check_A2_A3(p, bcg, windows, budgets, strong=strong_a3, arity=arity))
    if arrays is not None:
        certs.extend(check_BCG(p, bcg, windows, budgets, arrays))
    return certs


def all_pass(certs: Sequence[Certificate]) -> bool:
    return all(c.verdict for c in certs)


def delta_headroom(p: MarkovPartition, bcg: BcgStructure, budgets: DeviationBudget,
                   arrays: ArraySet | None = None, separated: bool = False, strong_a3: bool = False,
                   arity=None, iters: int = 40) -> float:
    """Largest uniform increase of every Delta that keeps all covering certificates PASS."""
    def ok(eps):
        return all_pass(covering_certificates(p, bcg, budgets.inflate(eps), arrays, separated, strong_a3, arity))

    if not ok(0.0):
        return 0.0
    lo, hi = 0.0, bcg.x_B
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if ok(mid):
            lo = mid
        else:
            hi = mid
    return lo
