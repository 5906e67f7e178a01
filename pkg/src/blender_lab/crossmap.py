"""Cross-form map elements, Markov partitions and their certified checks.

A cross map sends (x, ybar, z) to (xbar, y, zbar): the center x and the
stable z are pushed forward while the unstable y is pulled back, so every
component is a contraction.  Interval Jacobian bounds over the whole domain
drive the hyperbolicity checks and the cone constants.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .errors import Degenerate, NoCone, NoConvergence, NotInStrip, Violation
from .geometry import BoxXYZ, ConeConstants, Interval, down, up

PICARD_TOL = 1e-12
PICARD_MAX = 100
DEFAULT_CONE_FLOOR = 0.05
CONE_MARGIN = 1e-6


@dataclass(frozen=True)
class Psi:
    """A smooth perturbation term added to one output component.

    ``wave``: amplitude * sin(x + sum(ybar) + sum(z) + phase)
    ``sin_xy``: amplitude * sin(x * ybar[0])
    """

    component: int
    kind: str
    amplitude: float
    phase: float = 0.0

    def value(self, x, yb, z):
        if self.kind == "wave":
            return self.amplitude * np.sin(x + yb.sum(axis=1) + z.sum(axis=1) + self.phase)
        if self.kind == "sin_xy":
            return self.amplitude * np.sin(x * yb[:, 0])
        raise ValueError(f"unknown psi kind {self.kind!r}")

    def gradient(self, x, yb, z):
        """(S, d) array of partials with respect to (x, ybar, z)."""
        S, du, ds = len(x), yb.shape[1], z.shape[1]
        g = np.zeros((S, 1 + du + ds))
        if self.kind == "wave":
            c = self.amplitude * np.cos(x + yb.sum(axis=1) + z.sum(axis=1) + self.phase)
            g[:] = c[:, None]
        else:
            c = self.amplitude * np.cos(x * yb[:, 0])
            g[:, 0] = c * yb[:, 0]
            g[:, 1] = c * x
        return g

    def gradient_bound(self, x_mag: float, yb_mag: float, d: int) -> np.ndarray:
        a = abs(self.amplitude)
        if self.kind == "wave":
            return np.full(d, a)
        b = np.zeros(d)
        b[0] = a * yb_mag
        b[1] = a * x_mag
        return b


@dataclass(frozen=True, eq=False)
class CrossMap:
    source_id: int
    target_ids: tuple[int, ...]
    source: BoxXYZ
    targets: tuple[BoxXYZ, ...]
    ybar_box: tuple[Interval, ...]
    cross_fn: Callable
    jac_fn: Callable
    jac_lo: np.ndarray
    jac_hi: np.ndarray
    center: tuple[float, float]
    center_deviation: float
    orientation: str = "cs"
    spec: dict = field(default_factory=dict)

    @property
    def d_u(self) -> int:
        return self.source.d_u

    @property
    def d_ss(self) -> int:
        return self.source.d_ss

    @property
    def dim(self) -> int:
        return 1 + self.d_u + self.d_ss

    @property
    def center_sign(self) -> int:
        return 1 if self.center[0] > 0 else -1

    @property
    def jac_mag(self) -> np.ndarray:
        return np.maximum(np.abs(self.jac_lo), np.abs(self.jac_hi))

    @property
    def is_affine(self) -> bool:
        return bool(self.spec.get("affine", False))

    def blocks(self):
        """Index lists (x, y, z) shared by rows and columns."""
        du, ds = self.d_u, self.d_ss
        return [0], list(range(1, 1 + du)), list(range(1 + du, 1 + du + ds))

    def apply(self, x, ybar, z):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        ybar = np.asarray(ybar, dtype=float).reshape(len(x), self.d_u)
        z = np.asarray(z, dtype=float).reshape(len(x), self.d_ss)
        return self.cross_fn(x, ybar, z)

    def target_box(self, target_id: int) -> BoxXYZ:
        return self.targets[self.target_ids.index(target_id)]


def _interval_domain(source: BoxXYZ, ybar_box):
    lo = np.array([source.x.lo] + [c.lo for c in ybar_box] + [c.lo for c in source.z])
    hi = np.array([source.x.hi] + [c.hi for c in ybar_box] + [c.hi for c in source.z])
    return lo, hi


def make_linear_map(source_id: int, target_ids: Sequence[int], source: BoxXYZ, targets: Sequence[BoxXYZ],
                    linear, offset, psi: Sequence[Psi] = (), ybar_box=None, orientation: str = "cs") -> CrossMap:
    """Cross map ``L @ (x, ybar, z) + offset + sum(psi)`` with closed-form derivative bounds."""
    L = np.array(linear, dtype=float)
    off = np.array(offset, dtype=float)
    d = 1 + source.d_u + source.d_ss
    if L.shape != (d, d) or off.shape != (d,):
        raise ValueError(f"linear part must be {d}x{d} with a length-{d} offset")
    psi = tuple(psi)
    if ybar_box is None:
        ybar_box = tuple(Interval(min(t.y[k].lo for t in targets), max(t.y[k].hi for t in targets))
                         for k in range(source.d_u))
    du = source.d_u
    lo_d, hi_d = _interval_domain(source, ybar_box)
    x_mag = max(abs(source.x.lo), abs(source.x.hi))
    yb_mag = max(abs(ybar_box[0].lo), abs(ybar_box[0].hi))

    def fn(x, yb, z):
        v = np.concatenate([x[:, None], yb, z], axis=1) @ L.T + off
        for p in psi:
            v[:, p.component] += p.value(x, yb, z)
        return v[:, 0], v[:, 1:1 + du], v[:, 1 + du:]

    def jac(x, yb, z):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        yb = np.asarray(yb, dtype=float).reshape(len(x), du)
        z = np.asarray(z, dtype=float).reshape(len(x), source.d_ss)
        J = np.broadcast_to(L, (len(x), d, d)).copy()
        for p in psi:
            J[:, p.component, :] += p.gradient(x, yb, z)
        return J

    slack = np.zeros((d, d))
    for p in psi:
        slack[p.component] += p.gradient_bound(x_mag, yb_mag, d)
    jac_lo = np.vectorize(down)(L - slack)
    jac_hi = np.vectorize(up)(L + slack)

    A, B = float(L[0, 0]), float(off[0])
    mags = np.maximum(np.abs(lo_d), np.abs(hi_d))
    dev = math.fsum(abs(L[0, k]) * mags[k] for k in range(1, d))
    dev += math.fsum(abs(p.amplitude) for p in psi if p.component == 0)
    spec = {"affine": not psi, "linear": L.tolist(), "offset": off.tolist(),
            "psi": [[p.component, p.kind, p.amplitude, p.phase] for p in psi]}
    return CrossMap(source_id, tuple(target_ids), source, tuple(targets), tuple(ybar_box), fn, jac,
                    jac_lo, jac_hi, (A, B), up(dev) if dev else 0.0, orientation, spec)


def perturb(m: CrossMap, rho: float, seed_phase: float = 0.0) -> CrossMap:
    """Add a ``wave`` term of amplitude ``rho`` to every component of a linear map.

    The added perturbation has C^1 norm ``rho``: sup |psi| and every sup |d psi| equal rho.
    """
    if "linear" not in m.spec:
        raise ValueError("only linear-form maps can be perturbed")
    psi = [Psi(*p) for p in m.spec["psi"]]
    psi += [Psi(k, "wave", rho, seed_phase + 0.7 * k + 0.3 * m.source_id) for k in range(m.dim)]
    return make_linear_map(m.source_id, m.target_ids, m.source, m.targets, m.spec["linear"],
                           m.spec["offset"], psi, m.ybar_box, m.orientation)


# ---------------------------------------------------------------- evaluation

def _block(M, rows, cols):
    return M[np.ix_(rows, cols)]


def eval_forward(m: CrossMap, x: float, y, z, *, check_strip: bool = True):
    """Solve the cross relation for the image of the source point (x, y, z).

    Returns ``(xbar, ybar, zbar)``.
    """
    xs, ys, zs = m.blocks()
    y = np.asarray(y, dtype=float).reshape(1, m.d_u)
    z = np.asarray(z, dtype=float).reshape(1, m.d_ss)
    xa = np.array([float(x)])
    S0 = _block(0.5 * (m.jac_lo + m.jac_hi), ys, ys)
    S0inv = np.linalg.inv(S0)
    yb = np.array([[c.mid for c in m.ybar_box]])
    for _ in range(PICARD_MAX):
        _, g2, _ = m.cross_fn(xa, yb, z)
        step = (y - g2) @ S0inv.T
        yb = yb + step
        if np.max(np.abs(step)) <= PICARD_TOL and np.max(np.abs(y - m.cross_fn(xa, yb, z)[1])) <= PICARD_TOL:
            break
    else:
        raise NoConvergence("ybar iteration did not settle", residual=float(np.max(np.abs(step))))
    if check_strip and not any(all(c.lo - 1e-12 <= v <= c.hi + 1e-12 for c, v in zip(t.y, yb[0]))
                               for t in m.targets):
        raise NotInStrip(f"ybar={yb[0].tolist()} outside every target y-box", ybar=yb[0].tolist())
    xb, _, zb = m.cross_fn(xa, yb, z)
    return float(xb[0]), yb[0].copy(), zb[0].copy()


def eval_backward(m: CrossMap, xbar: float, ybar, zbar, *, check_strip: bool = True):
    """Preimage of a target point: solve for (x, z), then read off y."""
    xs, ys, zs = m.blocks()
    xz = xs + zs
    M = _block(0.5 * (m.jac_lo + m.jac_hi), xz, xz)
    Minv = np.linalg.inv(M)
    yb = np.asarray(ybar, dtype=float).reshape(1, m.d_u)
    want = np.concatenate([[float(xbar)], np.asarray(zbar, dtype=float).ravel()])
    w = np.array([m.source.x.mid] + [c.mid for c in m.source.z])
    for _ in range(PICARD_MAX):
        g1, _, g3 = m.cross_fn(w[:1], yb, w[None, 1:])
        r = want - np.concatenate([g1, g3[0]])
        step = Minv @ r
        w = w + step
        if np.max(np.abs(step)) <= PICARD_TOL:
            break
    else:
        raise NoConvergence("(x, z) iteration did not settle", residual=float(np.max(np.abs(step))))
    x, z = float(w[0]), w[1:].copy()
    _, y, _ = m.cross_fn(np.array([x]), yb, z[None, :])
    if check_strip and not m.source.contains_point(x, y[0], z, slack=1e-12):
        raise NotInStrip("point is not in the vertical strip of this map", x=x)
    return x, y[0].copy(), z


# ---------------------------------------------------------------- verification

@dataclass(frozen=True)
class CrossMapBounds:
    mu: float | None = None
    nu: float | None = None
    margin_mu: float | None = None
    margin_nu: float | None = None


def row_sum_norm(mag: np.ndarray, rows, cols) -> float:
    if not rows or not cols:
        return 0.0
    return up(max(math.fsum(mag[r, c] for c in cols) for r in rows))


def image_enclosure(m: CrossMap) -> tuple[Interval, tuple[Interval, ...], tuple[Interval, ...]]:
    """Mean-value enclosure of the image of the whole domain."""
    lo_d, hi_d = _interval_domain(m.source, m.ybar_box)
    c = 0.5 * (lo_d + hi_d)
    r = np.vectorize(up)(0.5 * (hi_d - lo_d))
    gx, gy, gz = m.apply(c[:1], c[None, 1:1 + m.d_u], c[None, 1 + m.d_u:])
    gc = np.concatenate([gx, gy[0], gz[0]])
    spread = m.jac_mag @ r
    ivs = [Interval(down(gc[k] - up(spread[k] * (1 + 1e-15))), up(gc[k] + up(spread[k] * (1 + 1e-15))))
           for k in range(m.dim)]
    return ivs[0], tuple(ivs[1:1 + m.d_u]), tuple(ivs[1 + m.d_u:])


def image_excess(m: CrossMap) -> float:
    """Largest amount by which the image enclosure pokes out of the target interiors (<= 0 is fine)."""
    ex, ey, ez = image_enclosure(m)
    worst = -math.inf
    for t in m.targets:
        worst = max(worst, ex.hi - t.x.hi, t.x.lo - ex.lo)
        for e, c in zip(ez, t.z):
            worst = max(worst, e.hi - c.hi, c.lo - e.lo)
    for e, c in zip(ey, m.source.y):
        worst = max(worst, e.hi - c.hi, c.lo - e.lo)
    return worst


def verify_hyperbolicity(m: CrossMap) -> CrossMapBounds:
    """Row-sum certificate of both contraction sums; raises Violation on failure."""
    mag = m.jac_mag
    xs, ys, zs = m.blocks()
    first = up(row_sum_norm(mag, xs + zs, xs + zs) + row_sum_norm(mag, xs + zs, ys))
    second = up(row_sum_norm(mag, ys, xs + zs) + row_sum_norm(mag, ys, ys))
    if first >= 1.0:
        raise Violation("|d(xbar,zbar)/d(x,z)| + |d(xbar,zbar)/dybar| < 1", first)
    if second >= 1.0:
        raise Violation("|dy/d(x,z)| + |dy/dybar| < 1", second)
    excess = image_excess(m)
    if excess >= 0.0:
        raise Violation("image inside target interior", excess)
    mu = up(max(first, second))
    return CrossMapBounds(mu=mu, margin_mu=down(1.0 - mu))


def _imul(alo, ahi, blo, bhi):
    c = np.stack([alo * blo, alo * bhi, ahi * blo, ahi * bhi])
    return np.nextafter(c.min(axis=0), -np.inf), np.nextafter(c.max(axis=0), np.inf)


def _iadd(alo, ahi, blo, bhi):
    return np.nextafter(alo + blo, -np.inf), np.nextafter(ahi + bhi, np.inf)


def tilde_bounds(m: CrossMap) -> tuple[np.ndarray, np.ndarray]:
    """Interval Jacobian of the map with its first coordinate inverted.

    Rows are (x, y, zbar), columns (xbar, ybar, z).
    """
    lo, hi = m.jac_lo, m.jac_hi
    alo, ahi = lo[0, 0], hi[0, 0]
    if alo <= 0.0 <= ahi:
        raise Degenerate("center derivative interval contains 0", lo=float(alo), hi=float(ahi))
    inv_lo, inv_hi = sorted((down(1.0 / ahi), up(1.0 / alo))) if alo > 0 else sorted((down(1.0 / alo), up(1.0 / ahi)))
    # note for negative a: 1/a ranges over [1/alo, 1/ahi]
    if alo < 0:
        inv_lo, inv_hi = down(1.0 / alo), up(1.0 / ahi)
        inv_lo, inv_hi = min(inv_lo, inv_hi), max(inv_lo, inv_hi)
    d = m.dim
    tlo, thi = np.zeros((d, d)), np.zeros((d, d))
    tlo[0, 0], thi[0, 0] = inv_lo, inv_hi
    # d x / d w = -(d g1 / d w) / a
    g1w_lo, g1w_hi = -hi[0, 1:], -lo[0, 1:]
    tlo[0, 1:], thi[0, 1:] = _imul(g1w_lo, g1w_hi, np.full(d - 1, inv_lo), np.full(d - 1, inv_hi))
    for k in range(1, d):
        gkx_lo, gkx_hi = lo[k, 0], hi[k, 0]
        klo, khi = _imul(np.array([gkx_lo]), np.array([gkx_hi]), np.array([inv_lo]), np.array([inv_hi]))
        tlo[k, 0], thi[k, 0] = klo[0], khi[0]
        plo, phi = _imul(np.full(d - 1, gkx_lo), np.full(d - 1, gkx_hi), tlo[0, 1:], thi[0, 1:])
        tlo[k, 1:], thi[k, 1:] = _iadd(plo, phi, lo[k, 1:], hi[k, 1:])
    return tlo, thi


def tilde_point(J: np.ndarray) -> np.ndarray:
    """Pointwise version of :func:`tilde_bounds` for a stack of Jacobians (S, d, d)."""
    a = J[:, 0, 0]
    T = np.empty_like(J)
    T[:, 0, 0] = 1.0 / a
    T[:, 0, 1:] = -J[:, 0, 1:] / a[:, None]
    T[:, 1:, 0] = J[:, 1:, 0] / a[:, None]
    T[:, 1:, 1:] = J[:, 1:, 0][:, :, None] * T[:, 0, 1:][:, None, :] + J[:, 1:, 1:]
    return T


def verify_partial_hyperbolicity(m: CrossMap) -> CrossMapBounds:
    alo, ahi = m.jac_lo[0, 0], m.jac_hi[0, 0]
    if alo <= 0.0 <= ahi:
        raise Degenerate("center derivative interval contains 0", lo=float(alo), hi=float(ahi))
    amax = max(abs(alo), abs(ahi))
    if amax >= 1.0:
        raise Violation("|dxbar/dx| < 1", amax)
    tlo, thi = tilde_bounds(m)
    mag = np.maximum(np.abs(tlo), np.abs(thi))
    xs, ys, zs = m.blocks()
    s_t = row_sum_norm(mag, zs, zs)
    r_t = row_sum_norm(mag, zs, xs + ys)
    p_t = row_sum_norm(mag, xs + ys, xs + ys)
    q_t = row_sum_norm(mag, xs + ys, zs)
    line1 = up(s_t + r_t)
    if line1 >= 1.0:
        raise Violation("|dzbar/dz| + |dzbar/d(xbar,ybar)| < 1 (inverted form)", line1)
    line2 = up(up(p_t * s_t / down(1.0 - r_t)) + q_t)
    if line2 >= 1.0:
        raise Violation("shear bound of the inverted form < 1", line2)
    nu = max(line2, 5e-324)
    return CrossMapBounds(nu=nu, margin_nu=down(min(1.0 - line1, 1.0 - nu)))


def certify_map(m: CrossMap) -> CrossMapBounds:
    h = verify_hyperbolicity(m)
    p = verify_partial_hyperbolicity(m)
    return CrossMapBounds(h.mu, p.nu, h.margin_mu, p.margin_nu)


# ---------------------------------------------------------------- cone fields

def _group_norm(mag, rows, cols, in_sum: bool, out_sum: bool) -> float:
    """Operator norm bound between block norms.

    A 'sum' block norm is |first coordinate| + max|other coordinates|; a plain
    block norm is the max-norm.  The first entry of ``rows``/``cols`` is the
    lead coordinate of a sum block.
    """
    if not rows or not cols:
        return 0.0
    rb = []
    for r in rows:
        row = [mag[r, c] for c in cols]
        if in_sum:
            rb.append(max(row[0], math.fsum(row[1:])))
        else:
            rb.append(math.fsum(row))
    if out_sum:
        return up(rb[0] + max(rb[1:], default=0.0))
    return up(max(rb))


@dataclass(frozen=True)
class ConeBlocks:
    """Block norms (p, q, r, s) feeding one cone-transfer map T(K) = a K / (1 - b K) + c."""

    a: float
    b: float
    c: float
    growth_num: float  # the 'b' of the growth factor (1 - b K) / growth_den
    growth_den: float

    def transfer(self, K: float) -> float:
        return self.a * K / (1.0 - self.b * K) + self.c

    def growth(self, K: float) -> float:
        return (1.0 - self.growth_num * K) / self.growth_den if self.growth_den > 0 else math.inf

    def roots(self) -> tuple[float, float] | None:
        a, b, c = self.a, self.b, self.c
        if b == 0.0:
            return (c / (1.0 - a), math.inf) if a < 1.0 else None
        B = a - c * b - 1.0
        disc = B * B - 4.0 * b * c
        if disc < 0.0 or B >= 0.0:
            return None
        sq = math.sqrt(disc)
        return 2.0 * c / (-B + sq), (-B + sq) / (2.0 * b)


def cone_blocks(m: CrossMap) -> dict[str, ConeBlocks]:
    mag = m.jac_mag
    xs, ys, zs = m.blocks()
    p = _group_norm(mag, xs + zs, xs + zs, True, True)
    q = _group_norm(mag, xs + zs, ys, False, True)
    r = _group_norm(mag, ys, xs + zs, True, False)
    s = _group_norm(mag, ys, ys, False, False)
    tlo, thi = tilde_bounds(m)
    tmag = np.maximum(np.abs(tlo), np.abs(thi))
    pt = _group_norm(tmag, xs + ys, xs + ys, True, True)
    qt = _group_norm(tmag, xs + ys, zs, False, True)
    rt = _group_norm(tmag, zs, xs + ys, True, False)
    st = _group_norm(tmag, zs, zs, False, False)
    return {
        "u": ConeBlocks(p * s, r, q, r, s),
        "s": ConeBlocks(s * p, q, r, q, p),
        "ss": ConeBlocks(pt * st, rt, qt, rt, st),
    }


def _choose_K(cb: ConeBlocks, floor: float) -> float | None:
    rts = cb.roots()
    if rts is None or rts[0] >= 1.0:
        return None
    k0, k1 = rts
    top = min(k1, 1.0)
    k = min(2.0 * k0, k0 + 0.25 * (top - k0)) if k0 > 0.0 else 0.0
    return max(k, floor)


def _cone_ok(cb: ConeBlocks, K: float) -> bool:
    if not 0.0 < K < 1.0 or cb.b * K >= 1.0:
        return False
    return cb.transfer(K) <= K * (1.0 - CONE_MARGIN) and cb.growth(K) >= 1.0 + CONE_MARGIN


def cone_constants_for(maps: Sequence[CrossMap], floor: float = DEFAULT_CONE_FLOOR) -> ConeConstants:
    """Common cone constants for a set of maps, from the scalar cone-transfer fixed points."""
    blocks = [cone_blocks(m) for m in maps]
    out = {}
    for cone in ("u", "s", "ss"):
        ks = []
        for cb in blocks:
            k = _choose_K(cb[cone], floor)
            if k is None:
                raise NoCone(f"{cone}-cone transfer has no fixed point below 1", cone=cone)
            ks.append(k)
        K = max(ks)
        for cb in blocks:
            if not _cone_ok(cb[cone], K):
                raise NoCone(f"{cone}-cone constant {K} not invariant for every map", cone=cone, K=K)
        out[cone] = K
    return ConeConstants(out["u"], out["s"], out["ss"])


def _sum_norm(v):
    return np.abs(v[:, 0]) + np.max(np.abs(v[:, 1:]), axis=1, initial=0.0)


def cone_sample_check(m: CrossMap, constants: ConeConstants, cone: str, n: int = 1000,
                      rng: np.random.Generator | None = None) -> tuple[float, float]:
    """Sample points and cone vectors; return (min relative margin, min growth factor)."""
    rng = rng or np.random.default_rng(0)
    du, ds = m.d_u, m.d_ss
    lo_d, hi_d = _interval_domain(m.source, m.ybar_box)
    pts = lo_d + (hi_d - lo_d) * rng.random((n, m.dim))
    J = m.jac_fn(pts[:, 0], pts[:, 1:1 + du], pts[:, 1 + du:])
    xs, ys, zs = m.blocks()
    xz = xs + zs
    P, Q = J[:, xz][:, :, xz], J[:, xz][:, :, ys]
    R, S = J[:, ys][:, :, xz], J[:, ys][:, :, ys]

    def unit(k):
        v = rng.uniform(-1, 1, (n, k))
        return v / np.max(np.abs(v), axis=1, keepdims=True)

    frac = np.where(rng.random(n) < 0.5, 1.0, rng.random(n))[:, None]
    K = getattr(constants, {"u": "K_u", "s": "K_s", "ss": "K_ss"}[cone])
    if cone == "u":
        dy = unit(du)
        w = unit(1 + ds)
        w = w / _sum_norm(w)[:, None] * K * frac
        dyb = np.linalg.solve(S, (dy - np.einsum("nij,nj->ni", R, w))[:, :, None])[:, :, 0]
        wb = np.einsum("nij,nj->ni", P, w) + np.einsum("nij,nj->ni", Q, dyb)
        big = K * np.max(np.abs(dyb), axis=1)
        margin = (big - _sum_norm(wb)) / big
        growth = np.max(np.abs(dyb), axis=1) / np.max(np.abs(dy), axis=1)
    elif cone == "s":
        wb = unit(1 + ds)
        wb = wb / _sum_norm(wb)[:, None]
        dyb = unit(du) * K * frac
        w = np.linalg.solve(P, (wb - np.einsum("nij,nj->ni", Q, dyb))[:, :, None])[:, :, 0]
        dy = np.einsum("nij,nj->ni", R, w) + np.einsum("nij,nj->ni", S, dyb)
        big = K * _sum_norm(w)
        margin = (big - np.max(np.abs(dy), axis=1)) / big
        growth = _sum_norm(w) / _sum_norm(wb)
    elif cone == "ss":
        dzb = unit(ds)
        u = unit(1 + du)
        u = u / _sum_norm(u)[:, None] * K * frac
        dxb, dyb = u[:, :1], u[:, 1:]
        rhs = np.concatenate([dxb, dzb], axis=1) - np.einsum("nij,nj->ni", Q, dyb)
        w = np.linalg.solve(P, rhs[:, :, None])[:, :, 0]
        dy = np.einsum("nij,nj->ni", R, w) + np.einsum("nij,nj->ni", S, dyb)
        dx, dz = w[:, :1], w[:, 1:]
        big = K * np.max(np.abs(dz), axis=1)
        margin = (big - (np.abs(dx[:, 0]) + np.max(np.abs(dy), axis=1))) / big
        growth = np.max(np.abs(dz), axis=1) / np.max(np.abs(dzb), axis=1)
    else:
        raise ValueError(f"unknown cone {cone!r}")
    return float(np.min(margin)), float(np.min(growth))


# ---------------------------------------------------------------- partitions

@dataclass(frozen=True, eq=False)
class MarkovPartition:
    element_ids: tuple[int, ...]
    boxes: tuple[BoxXYZ, ...]
    maps: tuple[CrossMap, ...]
    cone_constants: ConeConstants | None = None
    orientation: str = "cs"
    alpha: float | None = None
    name: str = ""

    def box(self, element_id: int) -> BoxXYZ:
        return self.boxes[self.element_ids.index(element_id)]

    def maps_from(self, source_id: int) -> list[CrossMap]:
        return [m for m in self.maps if m.source_id == source_id]

    def maps_into(self, target_id: int) -> list[CrossMap]:
        return [m for m in self.maps if target_id in m.target_ids]

    def with_maps(self, maps, cone_floor: float | None = None) -> MarkovPartition:
        maps = tuple(maps)
        cc = self.cone_constants
        if cone_floor is not None:
            cc = cone_constants_for(maps, cone_floor)
        return replace(self, maps=maps, cone_constants=cc)


def is_transitive(p: MarkovPartition) -> bool:
    adj = {i: set() for i in p.element_ids}
    for m in p.maps:
        adj[m.source_id].update(m.target_ids)
    for start in p.element_ids:
        seen, todo = {start}, [start]
        while todo:
            for j in adj[todo.pop()]:
                if j not in seen:
                    seen.add(j)
                    todo.append(j)
        if len(seen) != len(p.element_ids):
            return False
    return True


def elements_disjoint(p: MarkovPartition) -> bool:
    for a in range(len(p.boxes)):
        for b in range(a + 1, len(p.boxes)):
            A, B = p.boxes[a], p.boxes[b]
            pairs = [(A.x, B.x)] + list(zip(A.y, B.y)) + list(zip(A.z, B.z))
            if all(u.intersect(v) is not None for u, v in pairs):
                return False
    return True


def verify_partition(p: MarkovPartition) -> dict[int, CrossMapBounds]:
    """Certify every map (through the inverse for cu partitions)."""
    q = invert_partition(p) if p.orientation == "cu" else p
    return {k: certify_map(m) for k, m in enumerate(q.maps)}


def _inverse_map(m: CrossMap, target_id: int) -> CrossMap:
    """Inverse of ``m`` on the strip landing in ``target_id``, with y and z relabelled."""
    du, ds = m.d_u, m.d_ss
    tbox = m.target_box(target_id)
    a_mid = 0.5 * (m.jac_lo[0, 0] + m.jac_hi[0, 0])
    xs, ys, zs = m.blocks()
    # new coordinates: (x, y', z') = (x, z, y)
    perm = xs + zs + ys

    def solve_x(xb, yb, z):
        x = np.full(len(xb), m.source.x.mid)
        for _ in range(PICARD_MAX):
            g1, _, _ = m.cross_fn(x, yb, z)
            step = (xb - g1) / a_mid
            x = x + step
            if np.max(np.abs(step)) <= PICARD_TOL:
                return x
        raise NoConvergence("center inversion did not settle")

    def fn(xb, zz, yy):
        # inputs: center xbar, new-ybar = z of the image point, new-z = ybar
        x = solve_x(xb, yy, zz)
        _, y, zb = m.cross_fn(x, yy, zz)
        return x, zb, y

    def jac(xb, zz, yy):
        xb = np.atleast_1d(np.asarray(xb, dtype=float))
        zz = np.asarray(zz, dtype=float).reshape(len(xb), ds)
        yy = np.asarray(yy, dtype=float).reshape(len(xb), du)
        x = solve_x(xb, yy, zz)
        T = tilde_point(m.jac_fn(x, yy, zz))
        return T[:, perm][:, :, perm]

    tlo, thi = tilde_bounds(m)
    A, B = m.center
    amin = min(abs(m.jac_lo[0, 0]), abs(m.jac_hi[0, 0]))
    spec = {"inverse_of": m.spec}
    return CrossMap(target_id, (m.source_id,), tbox.swap_yz(), (m.source.swap_yz(),), m.source.z,
                    fn, jac, tlo[np.ix_(perm, perm)], thi[np.ix_(perm, perm)], (1.0 / A, -B / A),
                    up(m.center_deviation / amin) if m.center_deviation else 0.0,
                    "cu" if m.orientation == "cs" else "cs", spec)


def invert_partition(p: MarkovPartition, cone_floor: float | None = None) -> MarkovPartition:
    """Inverse partition: same elements with y and z relabelled, one inverse map per strip."""
    maps = tuple(_inverse_map(m, t) for m in p.maps for t in m.target_ids)
    orientation = "cu" if p.orientation == "cs" else "cs"
    cc = None
    if orientation == "cs":
        cc = cone_constants_for(maps, cone_floor if cone_floor is not None else DEFAULT_CONE_FLOOR)
    alpha = 1.0 / p.alpha if p.alpha else None
    return MarkovPartition(p.element_ids, tuple(b.swap_yz() for b in p.boxes), maps, cc, orientation,
                           alpha, p.name + "^-1")


# ---------------------------------------------------------------- builtins

def _band(center: float, half: float) -> Interval:
    return Interval(center - half, center + half)


def horseshoe(cone_floor: float = DEFAULT_CONE_FLOOR) -> MarkovPartition:
    """Two-branch affine horseshoe; the second branch reverses y."""
    X, Z = Interval(-1.0, 1.0), (Interval(-1.0, 1.0),)
    half = 1.0 / 3.0 + 0.05
    boxes = (BoxXYZ(X, (_band(-0.5, half),), Z), BoxXYZ(X, (_band(0.5, half),), Z))
    ids = (1, 2)
    maps = []
    for i, (b, sy, e) in zip(ids, ((-0.5, 1.0 / 3.0, -0.5), (0.5, -1.0 / 3.0, 0.5))):
        L = [[0.4, 0.0, 0.0], [0.0, sy, 0.0], [0.0, 0.0, 0.1]]
        maps.append(make_linear_map(i, ids, boxes[i - 1], boxes, L, [b, e, 0.0]))
    return MarkovPartition(ids, boxes, tuple(maps), cone_constants_for(maps, cone_floor), "cs", 0.4, "horseshoe")


AFFINE3_OFFSETS = (-0.6, 0.0, 0.6)


def affine3(cone_floor: float = 0.01) -> MarkovPartition:
    """Three affine branches x -> x/2 + B with B in {-0.6, 0, 0.6}, ids 1..3."""
    X, Z = Interval(-1.5, 1.5), (Interval(-1.0, 1.0),)
    boxes = tuple(BoxXYZ(X, (_band(e, 0.27),), Z) for e in AFFINE3_OFFSETS)
    ids = (1, 2, 3)
    maps = []
    for i, b in zip(ids, AFFINE3_OFFSETS):
        L = [[0.5, 0.0, 0.0], [0.0, 0.25, 0.0], [0.0, 0.0, 0.1]]
        maps.append(make_linear_map(i, ids, boxes[i - 1], boxes, L, [b, b, 0.0]))
    return MarkovPartition(ids, boxes, tuple(maps), cone_constants_for(maps, cone_floor), "cs", 0.5, "affine3")


def perturb_partition(p: MarkovPartition, rho: float, cone_floor: float | None = None) -> MarkovPartition:
    maps = tuple(perturb(m, rho) for m in p.maps)
    floor = cone_floor if cone_floor is not None else (p.cone_constants.K_u if p.cone_constants else DEFAULT_CONE_FLOOR)
    return replace(p, maps=maps, cone_constants=cone_constants_for(maps, floor), name=p.name + f"+psi({rho:g})")


ARRAY_CENTERS = (-0.9, -0.72, -0.58, -0.42, -0.24, -0.08, 0.08, 0.24, 0.42, 0.58, 0.72, 0.9)
ARRAY_ZETA = (-0.5, 0.5)


def affine_array(cone_floor: float = 0.001) -> MarkovPartition:
    """Desk-scale 2-arrayed affine model with center rate 0.4 and z-rate 0.1.

    Twelve array positions B each carry two elements that share B and differ in
    their z-offset, so the two strips of an array are disjoint in z.  Element
    ids are 2*a + s + 1 for array a and slot s.  The arrays at B = -0.42 and
    B = 0.42 have fixed points at -0.7 and 0.7, the gap positions of the
    intended structure (x_B, x_C, x_G) = (0.9, 0.3, 0.7).
    """
    X, Z = Interval(-1.6, 1.6), (Interval(-1.0, 1.0),)
    M = 2 * len(ARRAY_CENTERS)
    e = [-1.0 + (2 * p + 1) / M for p in range(M)]
    boxes = tuple(BoxXYZ(X, (_band(e[p], 0.035),), Z) for p in range(M))
    ids = tuple(range(1, M + 1))
    maps = []
    for a, B in enumerate(ARRAY_CENTERS):
        for s, zeta in enumerate(ARRAY_ZETA):
            p = 2 * a + s
            L = [[0.4, 0.0, 0.0], [0.0, 0.03, 0.0], [0.0, 0.0, 0.1]]
            maps.append(make_linear_map(ids[p], ids, boxes[p], boxes, L, [B, e[p], zeta]))
    return MarkovPartition(ids, boxes, tuple(maps), cone_constants_for(maps, cone_floor), "cs", 0.4,
                           "affine-array")


def array_slots(p: MarkovPartition) -> list[tuple[int, int]]:
    """Map index pairs (slot 0, slot 1) of the arrays of an affine_array-shaped partition."""
    return [(2 * a, 2 * a + 1) for a in range(len(p.maps) // 2)]
