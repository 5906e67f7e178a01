"""Backward-refinement engines on a certified Markov partition.

All engines work with x-projections of ss-discs.  A disc is pulled back
through a strip by solving the cross relation pointwise and refitting an
affine core; the fit residual and the propagated deviation go into the pad.
Forward-image nests are interval enclosures built from the global Jacobian
bounds of each map, swept back and forth until the windows stop shrinking.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .covering import ArraySet, BcgStructure, DeviationBudget, StripWindow, compute_budgets
from .crossmap import CrossMap, MarkovPartition, image_enclosure
from .errors import BadMu, InvariantBreach, MaxDepth, NotCrossing, Stuck
from .geometry import (Coding, ConeConstants, FoldingFamily, Interval, SsDisc, crosses, down,
                       up, x_projection)

TANGENCY_TOL = 1e-10
FIT_SAMPLES = 33
CHAIN_SAMPLES = 17
FAMILY_Z_SAMPLES = 9
SOLVE_TOL = 1e-15
SOLVE_MAX = 200
NEST_ROUNDS = 60


# ---------------------------------------------------------------- result types

@dataclass(frozen=True)
class IntersectionResult:
    point: tuple[float, tuple[float, ...], tuple[float, ...]]
    coding: Coding
    depth: int
    residual: float
    element_id: int = 0
    strips: tuple[tuple[int, int, int], ...] = ()


@dataclass(frozen=True)
class LeafBox:
    element_id: int
    x_window: Interval
    coding_prefix: Coding


@dataclass(frozen=True)
class TangencyResult:
    leaf: LeafBox
    parameter: float
    point: tuple[Interval, tuple[Interval, ...], tuple[Interval, ...]]
    tangent_margin: float
    widths: tuple[float, ...] = ()
    strips: tuple[tuple[int, int, int], ...] = ()
    family: FoldingFamily | None = None


@dataclass(frozen=True)
class TangencyFound:
    """The alternative branch of the folding step: a leaf touches the family."""

    parameter: float
    leaf_x: float
    family: FoldingFamily


@dataclass(frozen=True)
class FoldingArray:
    """A family together with the k-array it folds over.

    ``slots[j]`` is the parameter interval of the folding manifold related
    to the j-th strip and ``leaves[j]`` the x-value of its marker leaf.
    ``side`` is +1 when the tip points right.
    """

    family: FoldingFamily
    array: tuple[StripWindow, ...]
    slots: tuple[tuple[float, float], ...]
    leaves: tuple[float, ...]
    side: int
    exact: bool = False


TRACE_COLUMNS = ("step", "element", "strip", "x_lo", "x_hi", "width", "kind")


def _row(trace, step, element, strip, window: Interval, kind):
    if trace is not None:
        trace.append((step, element, "-" if strip is None else "/".join(map(str, strip)),
                      window.lo, window.hi, window.width, kind))


# ---------------------------------------------------------------- context

@dataclass(eq=False)
class _Ctx:
    p: MarkovPartition
    bcg: BcgStructure
    windows: Sequence[StripWindow]
    budgets: DeviationBudget
    arrays: ArraySet | None = None
    by_target: dict = field(default_factory=dict)
    by_id: dict = field(default_factory=dict)

    def __post_init__(self):
        for w in self.windows:
            self.by_target.setdefault(w.target, []).append(w)
            self.by_id[w.strip_id] = w

    @property
    def K(self) -> ConeConstants:
        return self.p.cone_constants

    def map_of(self, w: StripWindow) -> CrossMap:
        return self.p.maps[w.strip_id[2]]

    def w_ss(self, element: int) -> float:
        return self.budgets.delta_ss.get(element, 0.0)


def _ctx(p, bcg, windows, budgets=None, arrays=None) -> _Ctx:
    return _Ctx(p, bcg, windows, budgets if budgets is not None else compute_budgets(p), arrays)


# ---------------------------------------------------------------- preimages

def _z_samples(box: Sequence[Interval], n: int) -> np.ndarray:
    if len(box) == 1:
        return np.linspace(box[0].lo, box[0].hi, n)[:, None]
    per = max(2, int(round(n ** (1.0 / len(box)))))
    grids = np.meshgrid(*[np.linspace(c.lo, c.hi, per) for c in box], indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1)


def _solve_preimage(m: CrossMap, x_off, x_slope, y_off, y_slope, z):
    """Source points over ``z`` whose images lie on target discs.

    Row r solves xbar = x_off[r] + x_slope . zbar, ybar = y_off[r] + y_slope @ zbar
    for the source x and the image zbar.  Returns (x, y, zbar).
    """
    N = len(z)
    x_slope = np.asarray(x_slope, dtype=float)
    y_slope = np.asarray(y_slope, dtype=float).reshape(m.d_u, m.d_ss)
    A, B = m.center
    x = (np.asarray(x_off, dtype=float) - B) / A
    zb = np.tile([c.mid for c in m.targets[0].z], (N, 1))
    for _ in range(SOLVE_MAX):
        yb = y_off + zb @ y_slope.T
        g1, _, g3 = m.cross_fn(x, yb, z)
        r = x_off + zb @ x_slope - g1
        dz = g3 - zb
        x = x + r / A
        zb = g3
        if max(np.max(np.abs(r)), np.max(np.abs(dz))) <= SOLVE_TOL * (1.0 + np.max(np.abs(x))):
            break
    yb = y_off + zb @ y_slope.T
    g1, g2, g3 = m.cross_fn(x, yb, z)
    return x, g2, g3


def _fit(z: np.ndarray, v: np.ndarray, zc: np.ndarray):
    """Least-squares affine fit v ~ a + b.(z - zc); returns (a, b, max residual) per column."""
    D = np.concatenate([np.ones((len(z), 1)), z - zc], axis=1)
    coef, *_ = np.linalg.lstsq(D, v, rcond=None)
    res = np.max(np.abs(D @ coef - v), axis=0)
    return coef[0], coef[1:], res


def _pad_transfer(m: CrossMap, disc: SsDisc, zb_off: float):
    """Propagate a target disc's deviation budgets to the source disc."""
    J = m.jac_mag
    xs, ys, zs = m.blocks()
    a_min = min(abs(m.jac_lo[0, 0]), abs(m.jac_hi[0, 0]))
    cz = max(float(np.sum(J[r, zs])) for r in zs)
    jxy = float(np.sum(J[0, ys]))
    jyx = max(float(J[r, 0]) for r in ys)
    jyy = max(float(np.sum(J[r, ys])) for r in ys)
    dev_t = disc.pad + max(disc.lipschitz_x, disc.lipschitz_y) * zb_off
    pad_x = (dev_t + jxy * dev_t) / a_min
    pad_y = jyx * pad_x + jyy * dev_t
    lip_x = (disc.lipschitz_x + jxy * disc.lipschitz_y) * cz / a_min
    lip_y = jyx * lip_x + jyy * disc.lipschitz_y * cz
    return pad_x, pad_y, lip_x, lip_y


def _samples_for(m: CrossMap) -> int:
    return 3 if m.is_affine else FIT_SAMPLES


def preimage_disc(m: CrossMap, disc: SsDisc, window: Interval | None = None,
                  constants: ConeConstants | None = None) -> SsDisc:
    """Pull an ss-disc back through the strip of ``m`` that lands in ``disc.element_id``.

    ``window`` is the strip's base window; without it the x-image enclosure of
    the whole map is used.  Raises NotCrossing unless the disc crosses it.
    """
    if disc.element_id not in m.target_ids:
        raise NotCrossing(f"map of element {m.source_id} does not reach element {disc.element_id}")
    if window is None:
        window = image_enclosure(m)[0]
    if not crosses(disc, window):
        raise NotCrossing("disc does not cross the strip's base window",
                          window=window.to_list(), projection=x_projection(disc).to_list())
    z = _z_samples(m.source.z, _samples_for(m))
    n = len(z)
    x, y, zb = _solve_preimage(m, np.full(n, disc.x_offset), disc.x_slope,
                               np.tile(disc.y_offset, (n, 1)), disc.y_slope, z)
    zc = np.array([c.mid for c in m.source.z])
    a, b, res = _fit(z, np.concatenate([x[:, None], y], axis=1), zc)
    tmid = disc.z_mid
    zb_off = float(np.max(np.abs(zb - tmid)))
    pad_x, pad_y, lip_x, lip_y = _pad_transfer(m, disc, zb_off)
    pad = up(max(pad_x + res[0], pad_y + float(np.max(res[1:]))) + 4e-16 * (1.0 + abs(a[0])))
    out = SsDisc(m.source_id, tuple(m.source.z), float(a[0] - b[:, 0] @ zc), tuple(float(v) for v in b[:, 0]),
                 tuple(float(a[1 + k] - b[:, 1 + k] @ zc) for k in range(m.d_u)),
                 tuple(tuple(float(v) for v in b[:, 1 + k]) for k in range(m.d_u)),
                 pad, up(lip_x), up(lip_y))
    if constants is not None and out.total_slope() > constants.K_ss:
        raise InvariantBreach("preimage disc leaves the ss-cone", slope=out.total_slope(), K_ss=constants.K_ss)
    return out


def _level_y(maps: Sequence[CrossMap], top: int) -> list[np.ndarray]:
    boxes = [maps[0].target_box(top)] + [m.source for m in maps]
    return [np.array([c.mid for c in b.y]) for b in boxes]


def _chain_solve(maps: Sequence[CrossMap], top: int, x_off, x_slope, y_off, y_slope, z, x_init):
    """Points over level-n ``z`` whose orbit along ``maps`` ends on level-0 discs.

    Row r's level-0 disc is x = x_off[r] + x_slope[r] . z0, y = y_off[r] + y_slope[r] @ z0.
    Solving against level 0 directly, instead of step by step, keeps the
    error at rounding level times the inverse contraction of the chain.
    Returns (x_n, y_n, precision).
    """
    n = len(maps)
    N = len(z)
    P = float(np.prod([m.center[0] for m in maps]))
    xn = np.array(x_init, dtype=float)
    ys = [np.tile(v, (N, 1)) for v in _level_y(maps, top)]
    best, stale = math.inf, 0
    prev = None
    for _ in range(SOLVE_MAX):
        xs, zs = [None] * (n + 1), [None] * (n + 1)
        xs[n], zs[n] = xn, z
        for k in range(n, 0, -1):
            g1, _, g3 = maps[k - 1].cross_fn(xs[k], ys[k - 1], zs[k])
            xs[k - 1], zs[k - 1] = g1, g3
        ys[0] = y_off + np.einsum("rij,rj->ri", y_slope, zs[0])
        for k in range(1, n + 1):
            ys[k] = maps[k - 1].cross_fn(xs[k], ys[k - 1], zs[k])[1]
        f = xs[0] - x_off - np.einsum("rj,rj->r", x_slope, zs[0])
        err = float(np.max(np.abs(f)))
        slope = np.full(N, P)
        if prev is not None:
            dx = xn - prev[0]
            with np.errstate(divide="ignore", invalid="ignore"):
                sec = (f - prev[1]) / dx
            ok = (dx != 0) & (sec / P > 0.5) & (sec / P < 2.0)
            slope = np.where(ok, sec, P)
        prev = (xn, f)
        xn = xn - f / slope
        floor = 4e-16 * (1.0 + float(np.max(np.abs(xs[0]))))
        if err <= floor:
            break
        stale = stale + 1 if err >= best else 0
        if stale >= 5:
            break
        best = min(best, err)
    return xn, ys[n], max(min(err, best), floor) / abs(P)


def _chain_rate(maps: Sequence[CrossMap]) -> float:
    return float(np.prod([min(abs(m.jac_lo[0, 0]), abs(m.jac_hi[0, 0])) for m in maps]))


def _grid_step(box: Sequence[Interval], n: int) -> float:
    per = n if len(box) == 1 else max(2, int(round(n ** (1.0 / len(box)))))
    return max(c.width for c in box) / (per - 1)


def _chain_disc(maps: Sequence[CrossMap], disc0: SsDisc, guess: SsDisc, constants: ConeConstants) -> SsDisc:
    """The preimage of ``disc0`` along ``maps``, sampled exactly and refitted."""
    m = maps[-1]
    z = _z_samples(m.source.z, CHAIN_SAMPLES)
    N = len(z)
    ds = m.d_ss
    x, y, prec = _chain_solve(maps, disc0.element_id, np.full(N, disc0.x_offset),
                              np.tile(disc0.x_slope, (N, 1)), np.tile(disc0.y_offset, (N, 1)),
                              np.tile(np.asarray(disc0.y_slope).reshape(1, m.d_u, ds), (N, 1, 1)),
                              z, guess.core_x(z))
    zc = np.array([c.mid for c in m.source.z])
    a, b, res = _fit(z, np.concatenate([x[:, None], y], axis=1), zc)
    # between grid nodes the true graph moves at most K_ss per unit z
    lip = constants.K_ss + float(np.max(np.sum(np.abs(b), axis=0)))
    pad = up(float(np.max(res)) + 0.5 * lip * _grid_step(m.source.z, CHAIN_SAMPLES) + prec
             + disc0.deviation() / _chain_rate(maps))
    out = SsDisc(m.source_id, tuple(m.source.z), float(a[0] - b[:, 0] @ zc), tuple(float(v) for v in b[:, 0]),
                 tuple(float(a[1 + k] - b[:, 1 + k] @ zc) for k in range(m.d_u)),
                 tuple(tuple(float(v) for v in b[:, 1 + k]) for k in range(m.d_u)), pad)
    if out.total_slope() > constants.K_ss:
        raise InvariantBreach("preimage disc leaves the ss-cone", slope=out.total_slope(), K_ss=constants.K_ss)
    return out


def _affine_chain(maps: Sequence[CrossMap]) -> bool:
    return all(m.is_affine for m in maps)


# ---------------------------------------------------------------- forward nests

def _box_arrays(box):
    lo = np.array([box.x.lo] + [c.lo for c in box.y] + [c.lo for c in box.z])
    hi = np.array([box.x.hi] + [c.hi for c in box.y] + [c.hi for c in box.z])
    return lo, hi


def forward_nest(p: MarkovPartition, maps: Sequence[CrossMap], top: int, deep_x: Interval,
                 disc: SsDisc | None = None, rounds: int = NEST_ROUNDS,
                 top_box: Sequence[Interval | None] | None = None):
    """Interval enclosures of the points whose backward orbit follows ``maps``.

    Level 0 lives in element ``top``; ``maps[k-1]`` carries level k onto
    level k-1.  The deepest x is confined to ``deep_x``, level 0 to ``disc``
    and to ``top_box`` (per coordinate, None = free) when given.  Each round
    pushes the boxes forward by mean-value enclosures and pulls them back by
    interval Newton on the diagonal of each map.  Returns (lo, hi) arrays of
    shape (n+1, d) in (x, y, z) order.
    """
    n = len(maps)
    elems = [top] + [m.source_id for m in maps]
    boxes = [_box_arrays(p.box(e)) for e in elems]
    lo = np.array([b[0] for b in boxes])
    hi = np.array([b[1] for b in boxes])
    lo[n, 0], hi[n, 0] = max(lo[n, 0], deep_x.lo), min(hi[n, 0], deep_x.hi)
    for j, iv in enumerate(top_box or ()):
        if iv is not None:
            lo[0, j], hi[0, j] = max(lo[0, j], iv.lo), min(hi[0, j], iv.hi)
            if lo[0, j] > hi[0, j]:
                raise InvariantBreach("level-0 constraint misses the element", coordinate=j)
    if n == 0 and disc is None:
        return lo, hi
    du = p.boxes[0].d_u
    ys = slice(1, 1 + du)
    zs = slice(1 + du, None)

    def clip(k, sl, nlo, nhi):
        a = np.maximum(lo[k, sl], nlo)
        b = np.minimum(hi[k, sl], nhi)
        bad = a > b
        if np.any(bad):
            scale = 1e-12 * (1.0 + np.abs(a) + np.abs(b))
            if np.any((a - b)[bad] > scale[bad]):
                raise InvariantBreach("forward nest became empty", level=k)
            c = 0.5 * (a + b)
            a = np.where(bad, c, a)
            b = np.where(bad, c, b)
        lo[k, sl], hi[k, sl] = a, b

    # variable j of map k: (level, column) of its input and of its paired output
    d = lo.shape[1]
    in_lvl = [0] + [-1] * du + [0] * (d - 1 - du)
    out_lvl = [-1] + [0] * du + [-1] * (d - 1 - du)

    def gather(k, lvls):
        idx = np.array([k + v for v in lvls])
        cols = np.arange(d)
        return lo[idx, cols], hi[idx, cols]

    def scatter(k, lvls, nlo, nhi):
        for j in range(d):
            clip(k + lvls[j], slice(j, j + 1), nlo[j:j + 1], nhi[j:j + 1])

    def step(k):
        m = maps[k - 1]
        J = m.jac_mag
        jlo, jhi = np.diag(m.jac_lo), np.diag(m.jac_hi)
        il, ih = gather(k, in_lvl)
        c = 0.5 * (il + ih)
        r = 0.5 * (ih - il)
        g1, g2, g3 = m.cross_fn(c[:1], c[None, ys], c[None, zs])
        g = np.concatenate([g1, g2[0], g3[0]])
        slack = 4e-16 * (1.0 + np.abs(g))
        s_all = (J @ r) * (1.0 + 1e-12) + slack
        scatter(k, out_lvl, g - s_all, g + s_all)
        # interval Newton on the diagonal: solve each output for its paired input
        ol, oh = gather(k, out_lvl)
        s_off = (J @ r - np.diag(J) * r) * (1.0 + 1e-12) + slack
        num_lo, num_hi = ol - (g + s_off), oh - (g - s_off)
        definite = (jlo > 0) | (jhi < 0)
        if not np.any(definite):
            return
        with np.errstate(divide="ignore", invalid="ignore"):
            q = np.stack([num_lo / jlo, num_lo / jhi, num_hi / jlo, num_hi / jhi])
        qlo, qhi = np.min(q, axis=0), np.max(q, axis=0)
        pad = 1e-12 * np.abs(qhi - qlo) + 4e-16 * (1.0 + np.abs(c))
        nlo = np.where(definite, c + qlo - pad, -np.inf)
        nhi = np.where(definite, c + qhi + pad, np.inf)
        scatter(k, in_lvl, nlo, nhi)

    def top_constraint():
        if disc is None:
            return
        zl, zh = lo[0, zs], hi[0, zs]
        xl, xh = _affine_range_arr(disc.x_offset, disc.x_slope, zl, zh)
        dev = disc.pad + max(disc.lipschitz_x, disc.lipschitz_y) * disc.z_rad
        clip(0, slice(0, 1), np.array([xl - dev]), np.array([xh + dev]))
        for k in range(du):
            yl, yh = _affine_range_arr(disc.y_offset[k], disc.y_slope[k], zl, zh)
            clip(0, slice(1 + k, 2 + k), np.array([yl - dev]), np.array([yh + dev]))

    prev = None
    for _ in range(rounds):
        for k in range(n, 0, -1):
            step(k)
        top_constraint()
        for k in range(1, n + 1):
            step(k)
        w = float(np.sum(hi - lo))
        if prev is not None and prev - w <= 1e-9 * prev:
            break
        prev = w
    return lo, hi


def _affine_range_arr(off, slope, zl, zh):
    a = np.asarray(slope, dtype=float) * zl
    b = np.asarray(slope, dtype=float) * zh
    return off + float(np.sum(np.minimum(a, b))), off + float(np.sum(np.maximum(a, b)))


def nest_window(p: MarkovPartition, maps: Sequence[CrossMap], top: int, deep_x: Interval,
                disc: SsDisc | None = None, top_box: Sequence[Interval | None] | None = None) -> Interval:
    lo, hi = forward_nest(p, maps, top, deep_x, disc, top_box=top_box)
    return Interval(down(lo[0, 0]), up(hi[0, 0]))


# ---------------------------------------------------------------- orbits

def _sweep(maps, disc: SsDisc, xn: float, zn: np.ndarray, ys: np.ndarray):
    n = len(maps)
    d_ss = len(zn)
    pts = np.zeros((n + 1, 1 + ys.shape[1] + d_ss))
    for _ in range(SOLVE_MAX):
        x, z = np.array([xn]), zn[None, :]
        xs_, zs_ = [None] * (n + 1), [None] * (n + 1)
        xs_[n], zs_[n] = x, z
        for k in range(n, 0, -1):
            g1, _, g3 = maps[k - 1].cross_fn(xs_[k], ys[k - 1][None, :], zs_[k])
            xs_[k - 1], zs_[k - 1] = g1, g3
        new = ys.copy()
        new[0] = disc.core_y(zs_[0])[0]
        for k in range(1, n + 1):
            _, g2, _ = maps[k - 1].cross_fn(xs_[k], new[k - 1][None, :], zs_[k])
            new[k] = g2[0]
        change = float(np.max(np.abs(new - ys)))
        ys = new
        if change <= SOLVE_TOL:
            break
    for k in range(n + 1):
        pts[k, 0] = xs_[k][0]
        pts[k, 1:1 + ys.shape[1]] = ys[k]
        pts[k, 1 + ys.shape[1]:] = zs_[k][0]
    f = pts[0, 0] - float(disc.core_x(pts[None, 0, 1 + ys.shape[1]:])[0])
    return pts, f, ys


def orbit_point(p: MarkovPartition, maps: Sequence[CrossMap], disc: SsDisc, deep_x: Interval,
                nest=None) -> np.ndarray:
    """A point of ``disc`` whose backward orbit follows ``maps``; rows are the orbit levels."""
    n = len(maps)
    if nest is None:
        nest = forward_nest(p, maps, disc.element_id, deep_x, disc)
    lo, hi = nest
    du = p.boxes[0].d_u
    ys = 0.5 * (lo[:, 1:1 + du] + hi[:, 1:1 + du])
    zn = 0.5 * (lo[n, 1 + du:] + hi[n, 1 + du:])
    a, b = lo[n, 0], hi[n, 0]
    pa, fa, ys = _sweep(maps, disc, a, zn, ys)
    pb, fb, ys = _sweep(maps, disc, b, zn, ys)
    best = pa if abs(fa) <= abs(fb) else pb
    if fa * fb > 0:
        return best
    side = 0
    for _ in range(100):
        c = b - fb * (b - a) / (fb - fa) if fb != fa else 0.5 * (a + b)
        if not a < c < b and not b < c < a:
            c = 0.5 * (a + b)
        pc, fc, ys = _sweep(maps, disc, c, zn, ys)
        best = pc
        if fc == 0.0 or abs(b - a) <= 1e-16 * (1.0 + abs(c)) or abs(fc) <= 1e-17:
            break
        # Illinois variant of regula falsi
        if fc * fb < 0:
            a, fa = b, fb
            if side == -1:
                fa *= 0.5
            side = -1
        else:
            fa *= 0.5 if side == 1 else 1.0
            side = 1
        b, fb = c, fc
    return best


# ---------------------------------------------------------------- intersections

def _choose(cands: list[StripWindow], proj: Interval, use_center: bool) -> StripWindow:
    def key(w):
        win = w.center_window if use_center else w.base_window
        return (abs(win.mid - proj.mid), w.strip_id)
    return min(cands, key=key)


def _candidates(ctx: _Ctx, element: int, proj: Interval, use_center: bool) -> list[StripWindow]:
    out = []
    for w in ctx.by_target.get(element, ()):
        win = w.center_window if use_center else w.base_window
        if win is not None and win.strictly_contains(proj):
            out.append(w)
    return out


def _rate(m: CrossMap) -> float:
    return float(m.jac_mag[0, 0])


def find_unstable_intersection(partition: MarkovPartition, bcg: BcgStructure, windows: Sequence[StripWindow],
                               disc: SsDisc, tol: float = 1e-9, *, mode: str = "base", max_depth: int = 200,
                               first_strip: StripWindow | None = None, budgets: DeviationBudget | None = None,
                               trace: list | None = None) -> IntersectionResult:
    """Greedy backward refinement: a point of ``disc`` on the unstable lamination.

    ``mode="center"`` restricts every choice to center windows, so the leaf
    found stays in the family used by folding manifolds.
    """
    if mode not in ("base", "center"):
        raise ValueError(f"unknown mode {mode!r}")
    ctx = _ctx(partition, bcg, windows, budgets)
    use_center = mode == "center"
    cur = disc
    maps: list[CrossMap] = []
    strips: list[tuple[int, int, int]] = []
    est = 2.0 * bcg.x_B
    residual = math.inf
    while True:
        proj = x_projection(cur)
        if first_strip is not None and not maps:
            w = first_strip
        else:
            cands = _candidates(ctx, cur.element_id, proj, use_center)
            if not cands:
                raise Stuck("no strip window contains the disc projection", element=cur.element_id,
                            projection=proj.to_list(), depth=len(maps))
            w = _choose(cands, proj, use_center)
        m = ctx.map_of(w)
        cur = preimage_disc(m, cur, w.base_window, ctx.K)
        maps.append(m)
        if not _affine_chain(maps):
            cur = _chain_disc(maps, disc, cur, ctx.K)
        strips.append(w.strip_id)
        est *= _rate(m)
        _row(trace, len(maps), cur.element_id, w.strip_id, x_projection(cur), "preimage")
        if est <= tol:
            lo, hi = forward_nest(partition, maps, disc.element_id, bcg.base, disc)
            residual = float(np.max(hi[0] - lo[0]))
            _row(trace, len(maps), disc.element_id, None, Interval(lo[0, 0], hi[0, 0]), "nest")
            if residual <= tol:
                break
            est = residual
        if len(maps) >= max_depth:
            raise MaxDepth(f"residual {residual} above {tol} after {max_depth} steps", width=residual)
    pts = orbit_point(partition, maps, disc, bcg.base, (lo, hi))
    du = partition.boxes[0].d_u
    point = (float(pts[0, 0]), tuple(float(v) for v in pts[0, 1:1 + du]),
             tuple(float(v) for v in pts[0, 1 + du:]))
    return IntersectionResult(point, Coding(tuple(m.source_id for m in maps)), len(maps), residual,
                              disc.element_id, tuple(strips))


def replay_orbit(partition: MarkovPartition, result: IntersectionResult, disc: SsDisc,
                 bcg: BcgStructure) -> np.ndarray:
    """Recompute the orbit of an intersection result along its strips."""
    maps = [partition.maps[s[2]] for s in result.strips]
    return orbit_point(partition, maps, disc, bcg.base)


# ---------------------------------------------------------------- folding families

def detect_cu_tangent(family: FoldingFamily, constants: ConeConstants) -> float | None:
    """A parameter where the center curve's tangent enters the cu-cone, or None.

    x'(t) is affine in t, so the point of smallest |x'| is found by bisection
    on its sign over the t-domain.
    """
    lo, hi = family.t_domain.lo, family.t_domain.hi
    d = family.dx_at
    a, b = float(d(lo)), float(d(hi))
    if a == 0.0:
        t = lo
    elif b == 0.0 or a * b > 0:
        t = lo if abs(a) <= abs(b) else hi
    else:
        l, h = lo, hi
        for _ in range(200):
            mid = 0.5 * (l + h)
            if mid <= l or mid >= h:
                break
            if (float(d(mid)) > 0) == (a > 0):
                l = mid
            else:
                h = mid
        t = l if abs(float(d(l))) <= abs(float(d(h))) else h
    if abs(float(d(t))) <= constants.K_u * float(np.sum(np.abs(family.y1))):
        return float(t)
    return None


def tangent_margin(family: FoldingFamily, t: float, constants: ConeConstants) -> float:
    return constants.K_u * float(np.sum(np.abs(family.y1))) - abs(float(family.dx_at(t)))


def _roots(family: FoldingFamily, v: float) -> list[float]:
    """Parameters in the t-domain where the x-core equals ``v``, ascending."""
    c0, c1, c2 = family.coeffs
    c0 = c0 - v
    lo, hi = family.t_domain.lo, family.t_domain.hi
    if c2 == 0.0:
        r = [] if c1 == 0.0 else [-c0 / c1]
    else:
        disc = c1 * c1 - 4.0 * c2 * c0
        if disc < 0.0:
            return []
        s = math.sqrt(disc)
        q = -0.5 * (c1 + math.copysign(s, c1))
        r = [q / c2] + ([c0 / q] if q != 0.0 else [])
    eps = 1e-12 * (hi - lo)
    return sorted(min(max(t, lo), hi) for t in r if lo - eps <= t <= hi + eps)


def restrict(family: FoldingFamily, ta: float, tb: float, markers=None, kind: str | None = None) -> FoldingFamily:
    """Sub-family over [ta, tb], reparametrized onto [0, 1] with the change recorded."""
    h = tb - ta
    if not h > 0:
        raise InvariantBreach("empty parameter interval", ta=ta, tb=tb)
    c0, c1, c2 = family.coeffs
    x0 = c0 + c1 * ta + c2 * ta * ta
    coeffs = (float(x0), float((c1 + 2.0 * c2 * ta) * h), float(c2 * h * h))
    y0 = tuple(float(v) for v in family.y_at(ta))
    y1 = tuple(float(v) * h for v in family.y1)
    if markers is None:
        markers = tuple(((t - ta) / h, x) for t, x in family.markers if ta <= t <= tb)
    return replace(family, coeffs=coeffs, y0=y0, y1=y1, markers=tuple(markers),
                   kind=family.kind if kind is None else kind, t_domain=Interval(0.0, 1.0),
                   t_scale=family.t_scale * h, t_shift=family.t_scale * ta + family.t_shift)


def tip(family: FoldingFamily) -> tuple[float, float]:
    """(parameter, x) of the extreme fiber of the center curve."""
    v = family.vertex
    lo, hi = family.t_domain.lo, family.t_domain.hi
    if v is not None and lo <= v <= hi:
        return v, float(family.x_at(v))
    a, b = float(family.x_at(lo)), float(family.x_at(hi))
    side = -1.0 if family.coeffs[2] > 0 else 1.0
    return (lo, a) if side * a >= side * b else (hi, b)


def side_of(family: FoldingFamily) -> int:
    """+1 when the family's tip points right (opens to the left)."""
    return 1 if family.coeffs[2] < 0 else -1


def _spread(family: FoldingFamily) -> float:
    t = 0.5 * (family.t_domain.lo + family.t_domain.hi)
    return x_projection(family.fiber(t)).hi - float(family.x_at(t))


@dataclass(frozen=True)
class Lineage:
    """Where a family came from: the starting family and the maps pulled back through.

    ``origin`` has t_scale 1 and t_shift 0, so ``to_original_t`` of any
    descendant lands in its parameter.
    """

    origin: FoldingFamily
    maps: tuple[CrossMap, ...] = ()

    def extend(self, m: CrossMap) -> Lineage:
        return Lineage(self.origin, self.maps + (m,))


def _refit(m: CrossMap, ts: np.ndarray, z: np.ndarray, x: np.ndarray, y: np.ndarray):
    """Fit fibers (affine in z) and curves (quadratic x, linear y in t) to sampled preimages."""
    nt, nz = len(ts), len(z)
    zc = np.array([c.mid for c in m.source.z])
    D = np.concatenate([np.ones((nz, 1)), z - zc], axis=1)
    V = np.concatenate([x.reshape(nt, nz, 1), y.reshape(nt, nz, m.d_u)], axis=2)
    coef = np.einsum("ij,tjk->tik", np.linalg.pinv(D), V)
    zres = float(np.max(np.abs(np.einsum("ij,tjk->tik", D, coef) - V)))
    cores = coef[:, 0, :]
    slopes = coef[:, 1:, :]
    slope = slopes.mean(axis=0)
    sres = float(np.max(np.abs(slopes - slope))) * max(c.rad for c in m.source.z) * m.d_ss
    Tq = np.stack([np.ones(nt), ts, ts * ts], axis=1)
    qx, *_ = np.linalg.lstsq(Tq, cores[:, 0], rcond=None)
    qres = float(np.max(np.abs(Tq @ qx - cores[:, 0])))
    ly, *_ = np.linalg.lstsq(Tq[:, :2], cores[:, 1:], rcond=None)
    lres = float(np.max(np.abs(Tq[:, :2] @ ly - cores[:, 1:])))
    return qx, ly, slope, zres + sres, qres, lres


def _assemble(m: CrossMap, family: FoldingFamily, qx, ly, slope, pad, lx, lyy, constants, kind) -> FoldingFamily:
    tmpl = SsDisc(m.source_id, tuple(m.source.z), 0.0, tuple(float(v) for v in slope[:, 0]),
                  tuple(0.0 for _ in range(m.d_u)),
                  tuple(tuple(float(v) for v in slope[:, 1 + k]) for k in range(m.d_u)),
                  up(pad), up(lx), up(lyy))
    if constants is not None and tmpl.total_slope() > constants.K_ss:
        raise InvariantBreach("transported fibers leave the ss-cone", slope=tmpl.total_slope())
    new = replace(family, element_id=m.source_id, coeffs=tuple(float(v) for v in qx),
                  y0=tuple(float(v) for v in ly[0]), y1=tuple(float(v) for v in ly[1]),
                  template=tmpl, kind=family.kind if kind is None else kind)
    return replace(new, markers=tuple((t, float(new.x_at(t))) for t, _ in family.markers))


def transport(m: CrossMap, family: FoldingFamily, window: Interval | None = None,
              constants: ConeConstants | None = None, kind: str | None = None,
              lineage: Lineage | None = None) -> FoldingFamily:
    """Preimage of a whole family through one strip, refitted as a quadratic family.

    Each sampled fiber is pulled back pointwise; the x-core at the source
    z-center is refitted by a quadratic in t and the y-core by a line, with
    every fit residual added to the pad.  Without ``lineage`` the target's
    pad is propagated through the derivative bounds.  With it, and a
    nonlinear chain, the samples are solved against the starting family.
    That way only the current fit residual enters the pad.
    """
    if window is None:
        window = image_enclosure(m)[0]
    if family.element_id not in m.target_ids:
        raise NotCrossing(f"map of element {m.source_id} does not reach element {family.element_id}")
    if not window.strictly_contains(family.x_hull()):
        raise NotCrossing("family does not cross the strip's base window",
                          window=window.to_list(), hull=family.x_hull().to_list())
    nt = _samples_for(m) + (2 if m.is_affine else 0)
    ts = np.linspace(family.t_domain.lo, family.t_domain.hi, nt)
    z = _z_samples(m.source.z, _samples_for(m) if m.is_affine else FAMILY_Z_SAMPLES)
    nz = len(z)
    tmpl = family.template
    zt = tmpl.z_mid
    xs = np.asarray(tmpl.x_slope)
    ysl = np.asarray(tmpl.y_slope).reshape(m.d_u, -1)
    x_off = np.repeat(family.x_at(ts) - xs @ zt, nz)
    y_off = np.repeat(family.y_at(ts) - (ysl @ zt)[None, :], nz, axis=0)
    zz = np.tile(z, (nt, 1))
    x, y, zb = _solve_preimage(m, x_off, xs, y_off, ysl, zz)
    chain = lineage is not None and not _affine_chain(lineage.maps + (m,))
    if not chain:
        qx, ly, slope, fres, qres, lres = _refit(m, ts, z, x, y)
        zb_off = float(np.max(np.abs(zb - tmpl.z_mid)))
        px, py, lx, lyy = _pad_transfer(m, tmpl, zb_off)
        pad = max(px + qres, py + lres) + fres + 4e-16 * (1.0 + abs(qx[0]))
        return _assemble(m, family, qx, ly, slope, pad, lx, lyy, constants, kind)
    maps = lineage.maps + (m,)
    o = lineage.origin
    ot = o.template
    oxs = np.asarray(ot.x_slope)
    oys = np.asarray(ot.y_slope).reshape(m.d_u, -1)
    t0 = family.to_original_t(ts)
    N = nt * nz
    xo, yo, prec = _chain_solve(maps, o.element_id, np.repeat(o.x_at(t0) - oxs @ ot.z_mid, nz),
                                np.tile(oxs, (N, 1)),
                                np.repeat(o.y_at(t0) - (oys @ ot.z_mid)[None, :], nz, axis=0),
                                np.tile(oys[None], (N, 1, 1)), zz, x)
    qx, ly, slope, fres, qres, lres = _refit(m, ts, z, xo, yo)
    K_ss = constants.K_ss if constants is not None else 1.0
    lip = K_ss + float(np.max(np.sum(np.abs(slope), axis=0)))
    pad = (max(qres, lres) + fres + prec + 0.5 * lip * _grid_step(m.source.z, FAMILY_Z_SAMPLES)
           + ot.deviation() / _chain_rate(maps))
    return _assemble(m, family, qx, ly, slope, pad, 0.0, 0.0, constants, kind)


def _marker_tangent(family: FoldingFamily, constants: ConeConstants, tol: float) -> float | None:
    for t, leaf in family.markers:
        if abs(float(family.x_at(t)) - leaf) <= tol and \
                abs(float(family.dx_at(t))) <= constants.K_u * float(np.sum(np.abs(family.y1))):
            return t
    return None


# ---------------------------------------------------------------- separated engine

def _marker_strip(ctx: _Ctx, family: FoldingFamily) -> StripWindow:
    """First strip of the marker leaf: greedy center choice from the marker fiber."""
    t = family.markers[0][0]
    proj = x_projection(family.fiber(t))
    cands = _candidates(ctx, family.element_id, proj, use_center=True)
    if not cands:
        raise InvariantBreach("marker leaf lies in no center window (A3 absent)", element=family.element_id,
                              projection=proj.to_list())
    return _choose(cands, proj, True)


def _a2_replacement(ctx: _Ctx, element: int, r: float, v0: StripWindow, w: float) -> StripWindow:
    ball = Interval.around(r, w)
    cands = []
    for v in ctx.by_target.get(element, ()):
        c = v.center_window
        if c is None or not c.strictly_contains(ball):
            continue
        if v0.center_window is not None and not (c.lo - v0.center_window.hi > w or v0.center_window.lo - c.hi > w):
            continue
        cands.append(v)
    if not cands:
        raise InvariantBreach("no A2 replacement strip at the base boundary", element=element, boundary=r)
    return min(cands, key=lambda v: (abs(v.center_window.mid - r), v.strip_id))


def _separated_step(ctx: _Ctx, family: FoldingFamily, forced: StripWindow | None,
                    tangency_tol: float, trace=None, step=0, lineage: Lineage | None = None):
    """One reproduction: returns (TangencyFound, None) or (new family, strip used)."""
    K = ctx.K
    for _ in range(10_000):
        t_m = _marker_tangent(family, K, tangency_tol)
        if t_m is not None:
            return TangencyFound(family.to_original_t(t_m), float(family.x_at(t_m)), family), None
        v0 = forced if forced is not None else _marker_strip(ctx, family)
        hull = family.x_hull()
        if v0.base_window.strictly_contains(hull):
            new = transport(ctx.map_of(v0), family, v0.base_window, K, lineage=lineage)
            _row(trace, step, new.element_id, v0.strip_id, new.x_hull(), "case1")
            return new, v0
        t_tip, x_tip = tip(family)
        leaf = family.markers[0][1]
        side = 1 if x_tip > leaf else -1
        r = v0.base_window.hi if side > 0 else v0.base_window.lo
        spread = _spread(family)
        if side * (x_tip - r) <= max(tangency_tol, spread):
            return TangencyFound(family.to_original_t(t_tip), r, family), None
        v1 = _a2_replacement(ctx, family.element_id, r, v0, max(ctx.w_ss(family.element_id), spread))
        roots = _roots(family, r)
        if len(roots) < 2:
            raise InvariantBreach("replacement leaf does not cut the family twice", boundary=r)
        family = restrict(family, roots[0], roots[-1], markers=((0.0, r), (1.0, r)))
        forced = v1
        _row(trace, step, family.element_id, v1.strip_id, family.x_hull(), "case2")
    raise InvariantBreach("case-2 repetition did not terminate")


def reproduce_folding(partition: MarkovPartition, bcg: BcgStructure, windows: Sequence[StripWindow],
                      arrays: ArraySet | None, family, *, slot: int | None = None,
                      budgets: DeviationBudget | None = None, tangency_tol: float = TANGENCY_TOL):
    """One reproduction step of a folding family.

    With a FoldingFamily (separated mode) the result is the preimage folding
    family or a TangencyFound.  With a FoldingArray (arrayed mode) ``slot``
    picks the strip; the result is the exact folding array in the source
    element.
    """
    ctx = _ctx(partition, bcg, windows, budgets, arrays)
    if isinstance(family, FoldingArray):
        if slot is None:
            raise ValueError("arrayed mode needs a slot")
        return _array_step(ctx, family, slot)
    if not family.markers:
        raise InvariantBreach("folding family has no marker leaf")
    res, _ = _separated_step(ctx, family, None, tangency_tol)
    return res


def _family_y_box(start: FoldingFamily, cur: FoldingFamily) -> tuple[Interval | None, ...]:
    """Level-0 y range of ``start`` over the original parameters still carried by ``cur``.

    The tangency sits on the family, so its y is pinned far tighter than the
    element's y-box; without this the x-window stalls at (dx/dy bound) * (y width).
    """
    tmpl = start.template
    tilt = np.sum(np.abs(np.asarray(tmpl.y_slope, dtype=float).reshape(len(start.y0), -1)), axis=1)
    dev = tmpl.pad + (tilt + max(tmpl.lipschitz_x, tmpl.lipschitz_y)) * tmpl.z_rad
    ta, tb = cur.to_original_t(cur.t_domain.lo), cur.to_original_t(cur.t_domain.hi)
    ya, yb = start.y_at(ta), start.y_at(tb)
    ys = tuple(Interval(down(min(a, b) - d), up(max(a, b) + d)) for a, b, d in zip(ya, yb, dev))
    return (None,) + ys + (None,) * len(tmpl.z_box)


def locate_tangency(partition: MarkovPartition, bcg: BcgStructure, windows: Sequence[StripWindow],
                    family: FoldingFamily, tol: float = 1e-8, max_depth: int = 60, *,
                    budgets: DeviationBudget | None = None, tangency_tol: float = TANGENCY_TOL,
                    trace: list | None = None) -> TangencyResult:
    """Iterate the separated reproduction until the leaf window is below ``tol``."""
    ctx = _ctx(partition, bcg, windows, budgets)
    top = family.element_id
    start = replace(family, t_scale=1.0, t_shift=0.0)
    cur, forced = start, None
    maps: list[CrossMap] = []
    strips: list[tuple[int, int, int]] = []
    widths: list[float] = []
    window = bcg.base
    found = None
    for step in range(1, max_depth + 1):
        res, used = _separated_step(ctx, cur, forced, tangency_tol, trace, step, Lineage(start, tuple(maps)))
        if isinstance(res, TangencyFound):
            found = res
            sp = _spread(res.family)
            window = nest_window(partition, maps, top, Interval.around(res.leaf_x, sp + tangency_tol),
                                 top_box=_family_y_box(start, res.family))
            widths.append(window.width)
            cur = res.family
            break
        cur, forced = res, None
        maps.append(ctx.map_of(used))
        strips.append(used.strip_id)
        window = nest_window(partition, maps, top, bcg.base, top_box=_family_y_box(start, cur))
        widths.append(window.width)
        _row(trace, step, top, used.strip_id, window, "leaf")
        if window.width <= tol:
            break
    else:
        raise MaxDepth(f"leaf window width {window.width} above {tol}", width=window.width)
    t_deep = detect_cu_tangent(cur, ctx.K)
    if found is not None:
        t0 = found.parameter
        t_deep = (t0 - cur.t_shift) / cur.t_scale
    if t_deep is None:
        t_deep = tip(cur)[0]
    margin = tangent_margin(cur, t_deep, ctx.K)
    t0 = cur.to_original_t(t_deep)
    y = start.y_at(t0)
    ypad = start.template.deviation()
    point = (window, tuple(Interval.around(float(v), ypad) for v in y), tuple(start.template.z_box))
    leaf = LeafBox(top, window, Coding(tuple(m.source_id for m in maps)))
    return TangencyResult(leaf, float(t0), point, float(margin), tuple(widths), tuple(strips), cur)


def folding_family(partition: MarkovPartition, element_id: int, leaf_x: float, tip_x: float,
                   z_slope: float = 0.0, y_frac: float = 0.5, kind: str = "plain") -> FoldingFamily:
    """Quadratic family hanging on the leaf at ``leaf_x`` with its tip at ``tip_x``.

    x(t) = leaf + 4 (tip - leaf) t (1 - t); the y-core runs across ``y_frac``
    of the element's y-band.
    """
    box = partition.box(element_id)
    h = tip_x - leaf_x
    yc = [c.mid for c in box.y]
    yr = [c.rad * y_frac for c in box.y]
    ds = box.d_ss
    tmpl = SsDisc(element_id, tuple(box.z), 0.0, (float(z_slope),) + (0.0,) * (ds - 1),
                  tuple(0.0 for _ in yc), tuple((0.0,) * ds for _ in yc))
    return FoldingFamily(element_id, (float(leaf_x), 4.0 * h, -4.0 * h),
                         tuple(c - r for c, r in zip(yc, yr)), tuple(2.0 * r for r in yr), tmpl,
                         ((0.0, float(leaf_x)), (1.0, float(leaf_x))), kind)


# ---------------------------------------------------------------- arrayed engine

def _common(ws: Sequence[Interval | None]) -> Interval | None:
    out = ws[0]
    for w in ws[1:]:
        if out is None or w is None:
            return None
        out = out.intersect(w)
    return out


def _gap_of(v: StripWindow, side: int) -> Interval:
    """Positional gap on the marker side: left gap for right-pointing families."""
    if v.gap_windows is None:
        raise InvariantBreach("strip has no gap windows (BCG structure absent)", strip=v.strip_id)
    return v.gap_windows[0] if side > 0 else v.gap_windows[1]


def _pick_array(ctx: _Ctx, element: int, x0: float, avoid: Interval, w: float, rule: str) -> tuple[StripWindow, ...]:
    """Array whose common center holds a ball around x0 and whose common base avoids ``avoid``."""
    if ctx.arrays is None:
        raise InvariantBreach("arrayed mode needs an ArraySet")
    ball = Interval.around(x0, w)
    best = None
    for idx, arr in enumerate(ctx.arrays.arrays):
        if arr[0][1] != element:
            continue
        vs = [ctx.by_id[s] for s in arr]
        cc = _common([v.center_window for v in vs])
        cb = _common([v.base_window for v in vs])
        if cc is None or cb is None or not cc.strictly_contains(ball):
            continue
        if not (cb.lo - avoid.hi > w or avoid.lo - cb.hi > w):
            continue
        key = (abs(cc.mid - x0), idx)
        if best is None or key < best[0]:
            best = (key, tuple(vs))
    if best is None:
        raise InvariantBreach(f"no array realizes {rule} at x={x0}", element=element, x=x0)
    return best[1]


def _fold_over(family: FoldingFamily, array: tuple[StripWindow, ...], x0: float, side: int) -> FoldingArray:
    """Steps 1-5 of the extraction: per strip, the sub-family between two crossings of a gap leaf."""
    r0 = _roots(family, x0)
    t_tip = tip(family)[0]
    before = [t for t in r0 if t <= t_tip]
    if not before:
        raise InvariantBreach("family does not reach the array center", x=x0)
    t0 = before[0]
    slots, leaves = [], []
    for v in array:
        leaf = _gap_of(v, side).mid
        rs = _roots(family, leaf)
        lo_r = [t for t in rs if t < t0]
        hi_r = [t for t in rs if t > t0]
        if not lo_r or not hi_r:
            raise InvariantBreach("gap leaf does not cut the family on both sides", strip=v.strip_id, leaf=leaf)
        slots.append((max(lo_r), min(hi_r)))
        leaves.append(leaf)
    return FoldingArray(family, array, tuple(slots), tuple(leaves), side)


def _slot_family(fa: FoldingArray, j: int) -> FoldingFamily:
    ta, tb = fa.slots[j]
    leaf = fa.leaves[j]
    return restrict(fa.family, ta, tb, markers=((0.0, leaf), (1.0, leaf)), kind="exact" if fa.exact else "plain")


def check_prefolding(family: FoldingFamily, bcg: BcgStructure, delta_tilde: float) -> dict:
    """Machine check of the two prefolding bullets plus containment in the base."""
    side = side_of(family)
    slice_ = bcg.gap_slices(delta_tilde)[0 if side > 0 else 1]
    spread = _spread(family)
    marker_ok = bool(family.markers) and all(
        slice_.strictly_contains(Interval.around(x, spread)) for _, x in family.markers) and all(
        abs(float(family.x_at(t)) - x) <= max(spread, 1e-12) for t, x in family.markers)
    x_c = -side * bcg.x_C
    rs = _roots(family, x_c)
    t_tip, x_tip = tip(family)
    center_t = None
    if side * (x_tip - x_c) > spread:
        inner = [t for t in rs if (t < t_tip)]
        center_t = float(0.5 * (inner[0] + t_tip)) if inner else float(t_tip)
    in_base = bcg.base.strictly_contains(family.x_hull())
    return {"side": "right" if side > 0 else "left", "marker_in_gap": marker_ok, "center_t": center_t,
            "in_base": in_base, "ok": marker_ok and center_t is not None and in_base}


def _exactify(ctx: _Ctx, fa: FoldingArray) -> FoldingArray:
    """B2-driven shrinking until every slot's family crosses its strip's base."""
    side = fa.side
    for _ in range(4 * (len(ctx.arrays.arrays) if ctx.arrays else 1) + 8):
        bad = None
        for j, v in enumerate(fa.array):
            sub = _slot_family(fa, j)
            if not v.base_window.strictly_contains(sub.x_hull()):
                bad = (j, v, sub)
                break
        if bad is None:
            return replace(fa, exact=True, family=replace(fa.family, kind="exact"))
        j, v, sub = bad
        r = v.base_window.hi if side > 0 else v.base_window.lo
        x_tip = tip(sub)[1]
        if side * (x_tip - r) <= _spread(sub):
            # core stops inside the pad around the edge: fold where the core still turns
            r = x_tip - 2.0 * side * _spread(sub)
        e = sub.element_id
        new_arr = _pick_array(ctx, e, r, _gap_of(v, side), max(ctx.w_ss(e), _spread(sub)),
                              "B2" if side > 0 else "B2'")
        fa = _fold_over(sub, new_arr, r, side)
    raise InvariantBreach("exactification did not terminate")


def exact_folding_array(partition: MarkovPartition, bcg: BcgStructure, windows: Sequence[StripWindow],
                        arrays: ArraySet, family: FoldingFamily,
                        budgets: DeviationBudget | None = None) -> FoldingArray:
    """Exact folding array inside a prefolding family (B3 extraction, then B2 exactification)."""
    ctx = _ctx(partition, bcg, windows, budgets, arrays)
    return _from_prefolding(ctx, family)


def _from_prefolding(ctx: _Ctx, family: FoldingFamily) -> FoldingArray:
    chk = check_prefolding(family, ctx.bcg, ctx.budgets.delta_tilde)
    if not chk["ok"]:
        raise InvariantBreach("family is not a prefolding manifold", **chk)
    side = side_of(family)
    x0 = -side * ctx.bcg.x_C
    e = family.element_id
    avoid = ctx.bcg.gap_slices(ctx.budgets.delta_tilde)[0 if side > 0 else 1]
    arr = _pick_array(ctx, e, x0, avoid, max(ctx.w_ss(e), _spread(family)), "B3" if side > 0 else "B3'")
    return _exactify(ctx, _fold_over(family, arr, x0, side))


def _array_step(ctx: _Ctx, fa: FoldingArray, slot: int, lineage: Lineage | None = None) -> FoldingArray:
    if not fa.exact:
        raise InvariantBreach("arrayed reproduction needs an exact folding array")
    j = slot - 1
    v = fa.array[j]
    sub = _slot_family(fa, j)
    pre = transport(ctx.map_of(v), sub, v.base_window, ctx.K, kind="prefolding", lineage=lineage)
    return _from_prefolding(ctx, pre)


@dataclass(frozen=True)
class ArrayPath:
    start: FoldingFamily
    states: tuple[FoldingArray, ...]
    strips: tuple[StripWindow, ...]


def follow_prefix(partition: MarkovPartition, bcg: BcgStructure, windows: Sequence[StripWindow],
                  arrays: ArraySet, family, prefix: Sequence[int],
                  budgets: DeviationBudget | None = None) -> ArrayPath:
    """Run the arrayed reproduction along a slot prefix from a prefolding family or exact array."""
    ctx = _ctx(partition, bcg, windows, budgets, arrays)
    return _follow(ctx, family, prefix)


def _follow(ctx: _Ctx, family, prefix, path: ArrayPath | None = None) -> ArrayPath:
    if path is None:
        if isinstance(family, FoldingArray):
            start = family.family
            fa = family
        else:
            start = replace(family, t_scale=1.0, t_shift=0.0)
            fa = _from_prefolding(ctx, start)
        states, strips = [fa], []
    else:
        start, states, strips = path.start, list(path.states), list(path.strips)
        fa = states[-1]
    k = len(fa.array)
    for s in prefix:
        if not 1 <= s <= k:
            raise ValueError(f"slot {s} outside 1..{k}")
        fa = _array_step(ctx, fa, s, Lineage(start, tuple(ctx.map_of(v) for v in strips)))
        strips.append(states[-1].array[s - 1])
        states.append(fa)
    return ArrayPath(start, tuple(states), tuple(strips))


def _cone_range(family: FoldingFamily, K: ConeConstants) -> tuple[float, float]:
    t_tip = tip(family)[0]
    c2 = family.coeffs[2]
    half = K.K_u * float(np.sum(np.abs(family.y1))) / (2.0 * abs(c2)) if c2 else 0.0
    lo = max(family.t_domain.lo, t_tip - half)
    hi = min(family.t_domain.hi, t_tip + half)
    return lo, hi


def path_leaf_box(ctx: _Ctx, path: ArrayPath) -> Interval:
    """x-enclosure of the tangency point singled out by the path's prefix."""
    start = path.start
    if not path.strips:
        return _common([v.base_window for v in path.states[0].array])
    maps = [ctx.map_of(v) for v in path.strips]
    lo, hi = forward_nest(ctx.p, maps, start.element_id, ctx.bcg.base)
    du = ctx.p.boxes[0].d_u
    deep = path.states[-1].family
    ta, tb = _cone_range(deep, ctx.K)
    t0 = sorted((deep.to_original_t(ta), deep.to_original_t(tb)))
    ts = [t0[0], t0[1]]
    v = start.vertex
    if v is not None and t0[0] < v < t0[1]:
        ts.append(v)
    xc = [float(start.x_at(t)) for t in ts]
    tm = start.template
    zl, zh = lo[0, 1 + du:], hi[0, 1 + du:]
    zc = tm.z_mid
    sl, sh = _affine_range_arr(0.0, tm.x_slope, zl - zc, zh - zc)
    dev = tm.pad + tm.lipschitz_x * float(np.max(np.maximum(np.abs(zl - zc), np.abs(zh - zc))))
    box = Interval(down(min(xc) + sl - dev), up(max(xc) + sh + dev))
    nest_x = Interval(down(lo[0, 0]), up(hi[0, 0]))
    out = box.intersect(nest_x)
    if out is None:
        raise InvariantBreach("tangency enclosure misses the leaf nest", box=box.to_list(), nest=nest_x.to_list())
    return out


def coding_to_tangency(partition: MarkovPartition, bcg: BcgStructure, windows: Sequence[StripWindow],
                       arrays: ArraySet, family, prefix: Sequence[int], tol: float | None = None,
                       budgets: DeviationBudget | None = None) -> LeafBox:
    """LeafBox of the tangency leaf selected by a slot prefix."""
    ctx = _ctx(partition, bcg, windows, budgets, arrays)
    path = _follow(ctx, family, prefix)
    box = path_leaf_box(ctx, path)
    if tol is not None and box.width > tol:
        raise MaxDepth(f"leaf box width {box.width} above {tol}", width=box.width)
    return LeafBox(path.start.element_id, box, Coding(tuple(int(s) for s in prefix), "array_slot", arrays.k))


def all_leaf_boxes(partition: MarkovPartition, bcg: BcgStructure, windows: Sequence[StripWindow],
                   arrays: ArraySet, family, depth: int,
                   budgets: DeviationBudget | None = None) -> dict[tuple[int, ...], LeafBox]:
    """LeafBoxes of every slot prefix of length 1..depth, sharing the common path prefixes."""
    ctx = _ctx(partition, bcg, windows, budgets, arrays)
    root = _follow(ctx, family, ())
    k = arrays.k
    out: dict[tuple[int, ...], LeafBox] = {}
    frontier = {(): root}
    for _ in range(depth):
        nxt = {}
        for pre, path in frontier.items():
            for s in range(1, k + 1):
                q = pre + (s,)
                pq = _follow(ctx, None, (s,), path)
                nxt[q] = pq
                out[q] = LeafBox(root.start.element_id, path_leaf_box(ctx, pq), Coding(q, "array_slot", k))
        frontier = nxt
    return out


def disjoint(boxes: Sequence[Interval]) -> bool:
    s = sorted(boxes, key=lambda b: b.lo)
    return all(a.hi < b.lo for a, b in zip(s, s[1:]))


# ---------------------------------------------------------------- prefolding scenarios

def fixed_leaf(partition: MarkovPartition, element_id: int) -> tuple[int, float]:
    """Map index and x of the fixed leaf of the strip of ``element_id`` into itself (affine center)."""
    for k, m in enumerate(partition.maps):
        if m.source_id == element_id and element_id in m.target_ids:
            A, B = m.center
            return k, B / (1.0 - A)
    raise InvariantBreach(f"element {element_id} has no strip into itself")


def _window_for(windows: Sequence[StripWindow], k: int, element: int) -> StripWindow:
    for w in windows:
        if w.strip_id[2] == k and w.target == element:
            return w
    raise InvariantBreach(f"no window for map {k} into {element}")


def _right_family(partition, element, x_star, mu, curvature, z_slope) -> FoldingFamily:
    box = partition.box(element)
    yc = [c.mid for c in box.y]
    yr = [0.5 * c.rad for c in box.y]
    ds = box.d_ss
    tmpl = SsDisc(element, tuple(box.z), 0.0, (float(z_slope),) + (0.0,) * (ds - 1),
                  tuple(0.0 for _ in yc), tuple((0.0,) * ds for _ in yc))
    c = curvature
    # x* + mu - c (t - 1/2)^2 on [0, 1]
    return FoldingFamily(element, (x_star + mu - 0.25 * c, c, -c), tuple(v - r for v, r in zip(yc, yr)),
                         tuple(2.0 * r for r in yr), tmpl, (), "plain")


def _transport_n(partition, windows, fam, k, element, n, K, origin):
    w = _window_for(windows, k, element)
    m = partition.maps[k]
    lin = Lineage(origin)
    for _ in range(n):
        fam = transport(m, fam, w.base_window, K, lineage=lin)
        lin = lin.extend(m)
    return fam


def mu_bounds(partition: MarkovPartition, bcg: BcgStructure, windows: Sequence[StripWindow], n_period: int,
              *, element_id: int, curvature: float = 1.0, z_slope: float = 0.0,
              budgets: DeviationBudget | None = None, iters: int = 200) -> tuple[float, float]:
    """(mu_0, mu_1): the displaced family reaches the center for mu > mu_0 and leaves the base at mu_1."""
    budgets = budgets if budgets is not None else compute_budgets(partition)
    k, x_star = fixed_leaf(partition, element_id)
    K = partition.cone_constants

    def hull(mu):
        f0 = _right_family(partition, element_id, x_star, mu, curvature, z_slope)
        rs = _roots(f0, x_star)
        f = restrict(f0, rs[0], rs[-1], markers=((0.0, x_star), (1.0, x_star)))
        try:
            g = _transport_n(partition, windows, f, k, element_id, n_period, K, f0)
        except NotCrossing:
            return None
        return g

    def inside(mu):
        g = hull(mu)
        return g is not None and bcg.base.strictly_contains(g.x_hull())

    def reaches(mu):
        g = hull(mu)
        return g is not None and tip(g)[1] - _spread(g) > -bcg.x_C

    hi = 0.25 * curvature
    lo = 0.0
    if inside(hi):
        mu1 = hi
    else:
        a, b = lo, hi
        while not inside(0.5 * b) and b > 1e-300:
            b *= 0.5
        a = 0.5 * b
        for _ in range(iters):
            mid = 0.5 * (a + b)
            if mid <= a or mid >= b:
                break
            if inside(mid):
                a = mid
            else:
                b = mid
        mu1 = b
    a, b = 0.0, mu1
    for _ in range(iters):
        mid = 0.5 * (a + b)
        if mid <= a or mid >= b:
            break
        if reaches(mid):
            b = mid
        else:
            a = mid
    return b, mu1


def make_prefolding(partition: MarkovPartition, bcg: BcgStructure, scenario: str, n_period: int = 3,
                    mu: float = 0.0, *, windows: Sequence[StripWindow], element_id: int,
                    curvature: float = 1.0, z_slope: float = 0.0, budgets: DeviationBudget | None = None,
                    max_steps: int = 200) -> FoldingFamily:
    """Prefolding family produced by unfolding (right case) or transporting (left case) a tangency.

    The tangency sits on the fixed leaf of ``element_id``'s strip into itself
    (period one).  Right case: the tip is pushed right by ``mu`` and the part
    between the two marker crossings is carried back ``n_period`` times.
    Left case: the undisplaced family is carried back until it reaches the
    leaf in the right gap slice.
    """
    budgets = budgets if budgets is not None else compute_budgets(partition)
    K = partition.cone_constants
    k, x_star = fixed_leaf(partition, element_id)
    w = _window_for(windows, k, element_id)
    m = partition.maps[k]
    if scenario == "right_case":
        mu0, mu1 = mu_bounds(partition, bcg, windows, n_period, element_id=element_id, curvature=curvature,
                             z_slope=z_slope, budgets=budgets)
        if not 0.0 < mu < mu1:
            raise BadMu(mu, mu1, f"mu={mu!r} outside the admissible interval (0, {mu1!r})")
        if mu <= mu0:
            raise InvariantBreach(f"mu={mu!r} too small to reach the center in {n_period} periods",
                                  mu=mu, mu_reach=mu0, n_period=n_period)
        f0 = _right_family(partition, element_id, x_star, mu, curvature, z_slope)
        rs = _roots(f0, x_star)
        f = restrict(f0, rs[0], rs[-1], markers=((0.0, x_star), (1.0, x_star)))
        f = replace(_transport_n(partition, windows, f, k, element_id, n_period, K, f0), kind="prefolding")
    elif scenario == "left_case":
        res = find_unstable_intersection(partition, bcg, windows,
                                         SsDisc.constant(element_id, bcg.x_G, [c.mid for c in partition.box(element_id).y],
                                                         partition.box(element_id).z), tol=1e-13, mode="base",
                                         budgets=budgets)
        leaf = res.point[0]
        f = _right_family(partition, element_id, x_star, 0.0, curvature, z_slope)
        f = replace(f, coeffs=tuple(-c for c in f.coeffs))
        f = replace(f, coeffs=(f.coeffs[0] + 2.0 * x_star, f.coeffs[1], f.coeffs[2]))
        lin = Lineage(f)
        for _ in range(max_steps):
            if float(np.max(f.x_at(np.array([f.t_domain.lo, f.t_domain.hi])))) > leaf + _spread(f):
                break
            edge = w.base_window.hi - 2.0 * _spread(f) - 1e-12
            rs = _roots(f, edge)
            if len(rs) == 2:
                f = restrict(f, rs[0], rs[1])
            f = transport(m, f, w.base_window, K, lineage=lin)
            lin = lin.extend(m)
        else:
            raise InvariantBreach("left case never reached the right gap leaf")
        rs = _roots(f, leaf)
        t0 = tip(f)[0]
        lo_r = [t for t in rs if t < t0]
        hi_r = [t for t in rs if t > t0]
        if not lo_r or not hi_r:
            raise InvariantBreach("left case: marker leaf not crossed on both sides")
        f = restrict(f, max(lo_r), min(hi_r), markers=((0.0, leaf), (1.0, leaf)), kind="prefolding")
    else:
        raise ValueError(f"unknown scenario {scenario!r}")
    chk = check_prefolding(f, bcg, budgets.delta_tilde)
    if not chk["ok"]:
        raise InvariantBreach("constructed family fails the prefolding check", **chk)
    return f


def marker_parameters(family: FoldingFamily) -> tuple[float, float, float]:
    """(t1, t0, t2) in the starting parameter: the two marker fibers around the tip."""
    t0 = tip(family)[0]
    ts = sorted(t for t, _ in family.markers)
    return family.to_original_t(ts[0]), family.to_original_t(t0), family.to_original_t(ts[-1])


def psi_headroom(certify_at, rho_hi: float = 0.5, iters: int = 30) -> float:
    """Largest perturbation size (bisection) at which ``certify_at(rho)`` is all-PASS."""
    from .covering import all_pass

    if not all_pass(certify_at(0.0)):
        return 0.0
    lo, hi = 0.0, rho_hi
    if all_pass(certify_at(hi)):
        return hi
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if all_pass(certify_at(mid)):
            lo = mid
        else:
            hi = mid
    return lo
