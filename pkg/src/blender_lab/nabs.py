"""Nearly-affine blender systems: coefficient families, grid plans and specifications."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from . import crossmap as cm
from .covering import (ArraySet, BcgStructure, Certificate, DeviationBudget, all_pass, check_A1,
                       check_A2_A3, check_BCG, compute_budgets, strip_windows)
from .errors import (BlenderError, EmptyWindow, Exhausted, Inadmissible, NoAlpha, NoN)
from .geometry import BoxXYZ, Interval

ALPHA_MAX = 1.0 / 20.0


# ---------------------------------------------------------------- families

@dataclass(frozen=True)
class NabsFamily:
    """A delta-indexed family of center maps x -> A x + B plus contraction rates.

    ``coefficients(delta, idx)`` gives (A, B); ``rate(delta, idx)`` is the
    y/z contraction used by the builder and also the declared envelope of
    |A - alpha|; ``threshold(delta)`` is the admissibility bound N_delta and
    ``index_near(delta, x, used)`` returns an admissible unused index whose B
    is close to x.
    """

    name: str
    alpha: float
    coefficients: Callable
    rate: Callable
    threshold: Callable
    index_near: Callable
    admissible: Callable
    dense_interval: Interval = Interval(-1.0, 1.0)
    psi_bound: Callable = lambda delta, idx: 0.0
    orientation: str = "cs"
    power: int = 1

    def envelope(self, delta: float, idx) -> float:
        """Declared bound on every deviation term of the map with index ``idx``."""
        return self.rate(delta, idx) + self.psi_bound(delta, idx)


def dyadic_threshold(delta: float) -> int:
    return math.ceil(delta ** -1.5)


def dyadic_B(i: int) -> float:
    level = i.bit_length() - 1
    j = i - (1 << level)
    return -1.0 + (2 * j + 1) / float(1 << level)


def dyadic_family(alpha: float = 0.045, avoid: tuple[float, float] | None = None) -> NabsFamily:
    """A_i = alpha + 0.5/(delta i), B_i running through the dyadic rationals of [-1, 1] level by level.

    ``avoid`` removes every index whose B falls in the open interval, which
    breaks density on purpose.
    """

    def ok_B(b):
        return avoid is None or not avoid[0] < b < avoid[1]

    def coefficients(delta, i):
        return alpha + 0.5 / (delta * i), dyadic_B(i)

    def rate(delta, i):
        return 0.5 / (delta * i)

    def admissible(delta, i):
        return i > dyadic_threshold(delta) and ok_B(dyadic_B(i))

    def index_near(delta, x, used):
        level = dyadic_threshold(delta).bit_length()
        size = 1 << level

        def B_of(j):
            return -1.0 + (2 * j + 1) / size

        def j_of(b):
            return (b + 1.0) * size / 2.0 - 0.5

        def walk(j, step):
            # next usable j in one direction, jumping over the avoided range
            while 0 <= j < size:
                if not ok_B(B_of(j)):
                    # always advance: near 2**53 the edge estimate can round back inside
                    j = min(math.floor(j_of(avoid[0])), j - 1) if step < 0 else max(math.ceil(j_of(avoid[1])), j + 1)
                    continue
                if size + j not in used:
                    return j
                j += step
            return None

        j0 = min(max(int(round(j_of(x))), 0), size - 1)
        cands = [j for j in (walk(j0, -1), walk(j0, 1)) if j is not None]
        if not cands:
            raise Exhausted("no admissible index left", x=x)
        return size + min(cands, key=lambda j: (abs(B_of(j) - x), j))

    name = "nabs-dyadic" if avoid is None else f"nabs-dyadic-avoid{avoid}"
    return NabsFamily(name, alpha, coefficients, rate, dyadic_threshold, index_near, admissible)


@dataclass(frozen=True)
class SaddleFocusGenerator:
    """Coefficients A = (B - c) sin(k w + eta1) / sin(k w + eta2) on a lattice of B values."""

    omega: float = math.pi * (math.sqrt(5.0) - 1.0)
    eta1: float = 0.3
    eta2: float = 1.2
    c: float = 0.0
    target_alpha: float = 0.045
    lattice: float = 2.0 ** -20
    min_sine: float = 0.05

    def ratio(self, k):
        k = np.asarray(k, dtype=float)
        return np.sin(k * self.omega + self.eta1) / np.sin(k * self.omega + self.eta2)

    def B(self, m: int) -> float:
        return self.c + m * self.lattice

    def A(self, k: int, m: int) -> float:
        return float((self.B(m) - self.c) * self.ratio(k))

    def select(self, x: float, k_lo: int, span: int = 100_000, used=()) -> tuple[int, int]:
        """Index (k, m) with B near x and A as close to the target as the scan allows."""
        # |A| <= |B - c| / min_sine, so B must keep a minimal distance from c
        floor_b = 2.0 * self.target_alpha * self.min_sine
        b = x - self.c
        if abs(b) < floor_b:
            b = math.copysign(floor_b, b if b else 1.0)
        m = int(round(b / self.lattice))
        ks = np.arange(k_lo, k_lo + span)
        denom = np.sin(ks * self.omega + self.eta2)
        err = np.abs((self.B(m) - self.c) * self.ratio(ks) - self.target_alpha)
        err[np.abs(denom) < self.min_sine] = np.inf
        for k in ks[np.argsort(err, kind="stable")]:
            if (int(k), m) not in used:
                return int(k), m
        raise Exhausted("saddle-focus scan exhausted", x=x)


def saddle_focus_family(gen: SaddleFocusGenerator | None = None) -> NabsFamily:
    gen = gen or SaddleFocusGenerator()

    def coefficients(delta, idx):
        k, m = idx
        return gen.A(k, m), gen.B(m)

    def rate(delta, idx):
        # contraction envelope, plus the actual drift of A from the target
        k, m = idx
        return max(0.5 / (delta * k), abs(gen.A(k, m) - gen.target_alpha))

    def admissible(delta, idx):
        k, m = idx
        return k > dyadic_threshold(delta) and abs(math.sin(k * gen.omega + gen.eta2)) >= gen.min_sine

    def index_near(delta, x, used):
        return gen.select(x, dyadic_threshold(delta) + 1, used=used)

    return NabsFamily("nabs-saddlefocus", gen.target_alpha, coefficients, rate, dyadic_threshold,
                      index_near, admissible)


def iterate_family(family: NabsFamily, n: int) -> NabsFamily:
    """Family of n-fold compositions; indices become words applied left to right."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if n == 1:
        return family

    def compose(delta, word):
        A, B = 1.0, 0.0
        for i in word:
            a, b = family.coefficients(delta, i)
            A, B = a * A, a * B + b
        return A, B

    alpha = family.alpha ** n

    def rate(delta, word):
        A, _ = compose(delta, word)
        return max(math.prod(family.rate(delta, i) for i in word), abs(abs(A) - alpha))

    def admissible(delta, word):
        return len(word) == n and all(family.admissible(delta, i) for i in word)

    def index_near(delta, x, used):
        # fix the leading letters near 0 and steer with the last one
        head, taken = [], set()
        for _ in range(n - 1):
            i = family.index_near(delta, 0.0, taken)
            head.append(i)
            taken.add(i)
        A, B = compose(delta, tuple(head))
        letters = set()
        while True:
            a_last = family.alpha
            last = family.index_near(delta, x - a_last * B, letters)
            word = tuple(head) + (last,)
            if word not in used:
                return word
            letters.add(last)

    return NabsFamily(f"{family.name}^{n}", alpha, compose, rate, family.threshold, index_near,
                      admissible, family.dense_interval, family.psi_bound, family.orientation,
                      family.power * n)


# ---------------------------------------------------------------- grid plans

@dataclass(frozen=True)
class GridPlan:
    alpha: float
    m: int
    N: int
    x_B: float
    x_C: float
    x_G: float
    D: float
    k: int
    x_n: tuple[float, ...]
    shifts: tuple[float, ...]
    extras: tuple[float, float]
    checks: dict = field(default_factory=dict)

    @property
    def bcg(self) -> BcgStructure:
        return BcgStructure(self.x_B, self.x_C, self.x_G)

    @property
    def arity_bound(self) -> int:
        return math.floor(self.x_B / (self.alpha * self.x_C)) + 2

    def roles(self, triplicate: bool = True) -> list[tuple[float, int, int]]:
        """Grid targets as (position, copy, n); copy 0 is the base grid."""
        out = [(x, 0, n) for n, x in enumerate(self.x_n)]
        if triplicate:
            for c in (1, 2):
                out += [(x + self.shifts[c], c, n) for n, x in enumerate(self.x_n[:-1])]
            out += [(self.extras[0], 1, -1), (self.extras[1], 2, -1)]
        return out

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "x_B": self.x_B, "m": self.m, "N": self.N, "x_C": self.x_C,
                "x_G": self.x_G, "D": self.D, "k": self.k, "shifts": list(self.shifts),
                "extras": list(self.extras), "checks": self.checks}


def plan_grid(alpha: float, x_B: float, k: int = 1) -> GridPlan:
    """Smallest grid N = 8m+1 (m >= 2) compatible with the contraction alpha."""
    if not 0.0 < alpha < ALPHA_MAX:
        raise NoAlpha(f"alpha={alpha} is not below 1/20; iterate the family first", alpha=alpha)
    if not 0.0 < x_B < 1.0:
        raise ValueError("x_B must lie in (0, 1)")
    lo, hi = 8.0 / (5.0 * alpha), 9.0 / (4.0 * alpha)
    # exact rational test of the strict invariants on the given binary floats;
    # the smallest N in the window can still miss the spacing bound by alpha/8
    a, xb = Fraction(alpha), Fraction(x_B)

    def valid(m):
        N = 8 * m + 1
        xc = xb * Fraction(2 * m - 1, N)
        D = 2 * xb / N
        xg = (xc + a * xb + xb) / 2
        return (Fraction(8) / (5 * a) < N < Fraction(9) / (4 * a)
                and Fraction(1, 9) < xc / xb < Fraction(1, 4)
                and a * (xb - xc) < D < a * (xb + xc) and xc + a * xb < xg < xb)

    m = 2
    while 8 * m + 1 <= lo or not valid(m):
        if 8 * m + 1 >= hi:
            raise NoN(f"no N = 8m+1 in ({lo}, {hi}) meets every grid invariant", window=(lo, hi))
        m += 1
    N = 8 * m + 1
    x_C = x_B * (2 * m - 1) / (8 * m + 1)
    x_G = 0.5 * (x_C + alpha * x_B + x_B)
    D = 2.0 * x_B / N
    x_n = tuple(x_B * (2.0 * n / N - 1.0) for n in range(N + 1))
    sep_bound = (4 * m + 0.5) / ((8 * m + 1) * (m - 0.5))
    checks = {
        "N_window": [lo, N, hi],
        "x_C_ratio": [1 / 9, (2 * m - 1) / (8 * m + 1), 1 / 4],
        "spacing": [alpha * (x_B - x_C), D, alpha * (x_B + x_C)],
        "gap_position": [x_C + alpha * x_B, x_G, x_B],
        "separated_alpha": [alpha, sep_bound],
        "arity": [3 * N, math.floor(x_B / (alpha * x_C)) + 2],
    }
    return GridPlan(alpha, m, N, x_B, x_C, x_G, D, k, x_n, (0.0, D / 3.0, 2.0 * D / 3.0),
                    (x_n[0] - 2.0 * D / 3.0, x_n[0] - D / 3.0), checks)


def grid_inequalities(plan: GridPlan, delta_tilde: float, separated: bool = True) -> list[tuple[str, float]]:
    """Slack of every sufficient inequality tying Delta~ to the grid (positive = satisfied)."""
    a, xB, xC, xG, D, t = plan.alpha, plan.x_B, plan.x_C, plan.x_G, plan.D, delta_tilde
    out = [
        ("gap width x_G - x_C > 9 Delta/alpha", xG - xC - 9.0 * t / a),
        ("center radius 2 alpha x_C > 8 Delta", 2.0 * a * xC - 8.0 * t),
        ("gap position x_G - x_C - alpha x_B > 7 Delta", xG - xC - a * xB - 7.0 * t),
        ("spacing lower bound", D - a * (xB - xC) - 7.0 * t),
        ("spacing upper bound", a * (xB + xC) - 7.0 * t - D),
        ("gap clearance D + alpha (x_G - x_B) > 10 Delta", D + a * (xG - xB) - 10.0 * t),
        ("base overlap D < 2 alpha x_B - 8 Delta", 2.0 * a * xB - 8.0 * t - D),
    ]
    if separated:
        out += [
            ("separated spacing D > 2 alpha x_C + 7 Delta", D - 2.0 * a * xC - 7.0 * t),
            ("strengthened center cover D/3 < 2 alpha x_C - 8 Delta", 2.0 * a * xC - 8.0 * t - D / 3.0),
            ("strengthened-A3 arity bound", 3 * plan.N - plan.arity_bound + 0.5),
        ]
    return out


# ---------------------------------------------------------------- specifications

@dataclass(frozen=True)
class SpecificationPair:
    delta: float
    indices: tuple
    roles: tuple  # per index: (grid point, family copy, shift copy, n)
    delta_tilde: float
    family: str = ""
    s: int | None = None

    def __post_init__(self):
        if len(self.indices) != len(self.roles):
            raise ValueError("indices and roles differ in length")

    def to_dict(self, plan: GridPlan | None = None, budgets: DeviationBudget | None = None) -> dict:
        d = {}
        if plan is not None:
            d.update({"alpha": plan.alpha, "x_B": plan.x_B, "m": plan.m, "N": plan.N, "x_C": plan.x_C,
                      "x_G": plan.x_G, "k": plan.k, "shifts": list(plan.shifts)})
        d["family"] = self.family
        d["indices"] = [{"i": list(i) if isinstance(i, tuple) else i, "grid_point": r[0], "family_copy": r[1],
                         "copy": r[2], "n": r[3]} for i, r in zip(self.indices, self.roles)]
        d["delta"] = self.delta
        d["s"] = self.s
        d["delta_tilde"] = self.delta_tilde
        if budgets is not None:
            d["budgets"] = {"delta": list(budgets.delta), "delta_tilde": budgets.delta_tilde}
        return d

    def to_json(self, plan: GridPlan | None = None, budgets: DeviationBudget | None = None) -> str:
        return json.dumps(self.to_dict(plan, budgets))

    @staticmethod
    def from_dict(d: dict) -> SpecificationPair:
        idx = tuple(tuple(e["i"]) if isinstance(e["i"], list) else e["i"] for e in d["indices"])
        roles = tuple((e["grid_point"], e["family_copy"], e["copy"], e["n"]) for e in d["indices"])
        return SpecificationPair(d["delta"], idx, roles, d["delta_tilde"], d.get("family", ""), d.get("s"))

    def restrict(self, copies: Sequence[int]) -> SpecificationPair:
        keep = [k for k, r in enumerate(self.roles) if r[2] in copies]
        return SpecificationPair(self.delta, tuple(self.indices[k] for k in keep),
                                 tuple(self.roles[k] for k in keep), self.delta_tilde, self.family, self.s)


def _assign(family: NabsFamily, plan: GridPlan, delta: float, triplicate: bool):
    used, indices, roles = set(), [], []
    for f in range(plan.k):
        for x, c, n in plan.roles(triplicate):
            i = family.index_near(delta, x, used)
            used.add(i)
            indices.append(i)
            roles.append((x, f, c, n))
    return indices, roles


def estimate_delta_tilde(family: NabsFamily, delta: float, indices, roles) -> tuple[float, int]:
    """Declared envelopes plus achieved grid offsets; returns the value and the worst position."""
    worst, arg = -1.0, 0
    for k, (i, r) in enumerate(zip(indices, roles)):
        _, B = family.coefficients(delta, i)
        v = family.envelope(delta, i) + abs(B - r[0])
        if v > worst:
            worst, arg = v, k
    return worst, arg


def select_indices(family: NabsFamily, plan: GridPlan, delta_schedule: Sequence[float] | None = None,
                   triplicate: bool = True) -> SpecificationPair:
    """Walk down the delta schedule until every grid inequality holds for the estimated Delta~."""
    schedule = list(delta_schedule) if delta_schedule is not None else [2.0 ** -s for s in range(1, 41)]
    binding = None
    for s, delta in enumerate(schedule, start=1):
        try:
            indices, roles = _assign(family, plan, delta, triplicate)
        except Exhausted as e:
            binding = ("index supply", e.details.get("x"), math.inf)
            continue
        tilde, arg = estimate_delta_tilde(family, delta, indices, roles)
        slacks = grid_inequalities(plan, tilde, separated=triplicate)
        failing = [(name, v) for name, v in slacks if not v > 0]
        if not failing:
            return SpecificationPair(delta, tuple(indices), tuple(roles), tilde, family.name, s)
        binding = (failing[0][0], roles[arg][0], tilde)
    raise Exhausted(f"schedule ended; binding inequality: {binding[0]}", inequality=binding[0],
                    grid_point=binding[1], delta_tilde=binding[2])


# ---------------------------------------------------------------- builder

def build_markov(family: NabsFamily, spec: SpecificationPair | Sequence, delta: float | None = None,
                 psi: float = 0.0) -> cm.MarkovPartition:
    """Markov partition of the selected indices, ids 1..M in index order.

    Element boxes are X = Z = [-1, 1] with disjoint y-bands; each map is
    x -> A x + B, y = eps ybar + e, zbar = eps z + zeta with per-element
    chart offsets e and zeta.  ``psi`` adds a wave perturbation of that C^1 size.
    """
    if isinstance(spec, SpecificationPair):
        indices, delta = spec.indices, spec.delta
    else:
        indices = tuple(spec)
    if delta is None:
        raise ValueError("delta is required")
    bad = [i for i in indices if not family.admissible(delta, i)]
    if bad:
        raise Inadmissible(f"indices below the admissibility threshold: {bad[:5]}",
                           threshold=family.threshold(delta), indices=bad)
    if family.orientation == "cu":
        return _build_cu(family, indices, delta)
    M = len(indices)
    coeffs = [family.coefficients(delta, i) for i in indices]
    eps = [family.rate(delta, i) for i in indices]
    X, Z = Interval(-1.0, 1.0), (Interval(-1.0, 1.0),)
    e = [-1.0 + (2 * p + 1) / M for p in range(M)]
    zeta = [-0.5 + (p + 0.5) / M for p in range(M)]
    boxes = tuple(BoxXYZ(X, (Interval(e[p] - 1.25 * eps[p], e[p] + 1.25 * eps[p]),), Z) for p in range(M))
    ids = tuple(range(1, M + 1))
    ybar = (Interval(boxes[0].y[0].lo, boxes[-1].y[0].hi),)
    maps = []
    for p, ((A, B), ep) in enumerate(zip(coeffs, eps)):
        L = [[A, 0.0, 0.0], [0.0, ep, 0.0], [0.0, 0.0, ep]]
        m = cm.make_linear_map(ids[p], ids, boxes[p], boxes, L, [B, e[p], zeta[p]], ybar_box=ybar)
        if psi:
            m = cm.perturb(m, psi)
        maps.append(m)
    floor = max(eps) / 4.0 + psi
    cc = cm.cone_constants_for(maps, floor)
    return cm.MarkovPartition(ids, boxes, tuple(maps), cc, "cs", family.alpha, family.name)


def _build_cu(family: NabsFamily, indices, delta) -> cm.MarkovPartition:
    """Expanding-center family: build the contracting inverse, then invert it."""
    inv = NabsFamily(family.name + "^-1", 1.0 / family.alpha,
                     lambda d, i: (1.0 / family.coefficients(d, i)[0],
                                   -family.coefficients(d, i)[1] / family.coefficients(d, i)[0]),
                     family.rate, family.threshold, family.index_near, family.admissible,
                     family.dense_interval, family.psi_bound, "cs", family.power)
    # each inverse branch maps into every element, so invert_partition yields one map per strip
    return cm.invert_partition(build_markov(inv, indices, delta))


def cu_family(alpha: float = 1.8) -> NabsFamily:
    """Expanding center: A_i = alpha + 0.5/(delta i), B_i = small dyadic offsets."""
    base = dyadic_family(1.0 / alpha)

    def coefficients(delta, i):
        return alpha + 0.5 / (delta * i), 0.1 * dyadic_B(i)

    return NabsFamily("nabs-cu", alpha, coefficients, base.rate, base.threshold, base.index_near,
                      base.admissible, orientation="cu")


def arrays_for(p: cm.MarkovPartition, spec: SpecificationPair, k: int) -> ArraySet:
    """Group strips into k-arrays: one strip per family copy at every grid role, in every target."""
    by_role: dict[tuple, list[int]] = {}
    for pos, (x, f, c, n) in enumerate(spec.roles):
        by_role.setdefault((c, n), [None] * k)[f] = pos
    arrays = []
    for t in p.element_ids:
        for key in sorted(by_role):
            members = by_role[key]
            if None in members:
                continue
            arrays.append(tuple((p.maps[pos].source_id, t, pos) for pos in members))
    return ArraySet(tuple(arrays), k)


def grid_offsets(p: cm.MarkovPartition, spec: SpecificationPair) -> dict[int, float]:
    return {k: abs(m.center[1] - r[0]) for k, (m, r) in enumerate(zip(p.maps, spec.roles))}


def markov_certificate(p: cm.MarkovPartition) -> Certificate:
    try:
        bounds = cm.verify_partition(p)
    except BlenderError as e:
        return Certificate("MARKOV", False, {"margin": -1.0}, {"reason": str(e)})
    mu = min(b.margin_mu for b in bounds.values())
    nu = min(b.margin_nu for b in bounds.values())
    return Certificate("MARKOV", mu > 0 and nu > 0, {"hyperbolicity": mu, "partial_hyperbolicity": nu})


def certify_partition(p: cm.MarkovPartition, bcg: BcgStructure, budgets: DeviationBudget,
                      arrays: ArraySet | None, separated: bool, strong_a3: bool = False,
                      arity: tuple[int, int] | None = None) -> list[Certificate]:
    """Full bundle: Markov inequalities, A1-A3, B1-B4 and the two aggregates."""
    certs = [markov_certificate(p)]
    try:
        windows = strip_windows(p, bcg, budgets)
    except EmptyWindow as e:
        return certs + [Certificate("A1", False, {"window_radius": float(e.details.get("radius", 0.0))},
                                    {"reason": str(e)})]
    certs.append(check_A1(p, bcg, windows, budgets))
    if separated:
        certs.extend(check_A2_A3(p, bcg, windows, budgets, strong=strong_a3, arity=arity))
    if arrays is not None:
        certs.extend(check_BCG(p, bcg, windows, budgets, arrays))

    def agg(name, members):
        sub = [c for c in certs if c.property in members]
        margins = {c.property: c.min_margin for c in sub}
        bad = next((c for c in sub if not c.verdict), None)
        return Certificate(name, all(c.verdict for c in sub), margins,
                           None if bad is None else {"property": bad.property, **(bad.witness or {})})

    if separated:
        certs.append(agg("SEPARATED", {"MARKOV", "A1", "A2", "A3"}))
    if arrays is not None:
        certs.append(agg("ARRAYED", {"MARKOV", "B1", "B2", "B2'", "B3", "B3'", "B4"}))
    return certs


def certify_specification(family: NabsFamily, spec: SpecificationPair, plan: GridPlan,
                          psi: float = 0.0) -> list[Certificate]:
    """Build the partition of ``spec`` and run every certificate the construction claims."""
    p = build_markov(family, spec, psi=psi)
    budgets = compute_budgets(p, plan.alpha, grid_offsets(p, spec))
    arrays = arrays_for(p, spec, plan.k)
    card = len({r[2] for r in spec.roles}) * plan.N
    return certify_partition(p, plan.bcg, budgets, arrays, separated=True, strong_a3=True,
                             arity=(card, plan.arity_bound))


def smallest_margin(certs: Sequence[Certificate]) -> float:
    return min(c.min_margin for c in certs if c.property not in ("SEPARATED", "ARRAYED"))
