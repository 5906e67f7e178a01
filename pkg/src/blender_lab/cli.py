"""Command-line entry point.

Exit codes: 0 when every emitted certificate is PASS and every engine reached
its tolerance, 2 on a FAIL certificate or an engine error, 3 on invalid input
(unreadable or malformed model JSON, schema violations, bad flags).

Outputs (only the ones a command produces) land in ``--out-dir``:
certificates.json, spec.json, plan.json, trace.csv and result.json.  JSON key
order is the insertion order used below and the trace columns are
``dynamics.TRACE_COLUMNS``, so identical inputs give byte-identical files.

Model JSON schema::

    {
      "name": "my-model",                       # optional
      "dims": [1, d_u, d_ss],                   # center dimension is always 1
      "alpha": 0.5,                             # optional common center rate
      "orientation": "cs",                      # optional
      "cone_floor": 0.01,                       # optional
      "elements": [{"id": 1, "x": [lo, hi], "y": [[lo, hi], ...], "z": [[lo, hi], ...]}, ...],
      "maps": [{"source": 1, "targets": [1, 2],
                "linear": [[...], ...],         # (1+d_u+d_ss) square block on (x, ybar, z)
                "offset": [...],
                "psi": [{"family": "wave", "amplitude": 1e-4, "component": 0, "phase": 0.0}]}],
      "derivative_bounds": {"mu": 0.9, "nu": 0.9},   # optional declared bounds
      "bcg": {"x_B": 0.9, "x_C": 0.3, "x_G": 0.7},   # optional, x_B defaults to 0.9
      "checks": ["A1", "A2", "A3", "B"],             # optional covering checks for verify
      "arrays": {"k": 2, "maps": [[0, 1], [2, 3]]},  # optional, map indices per array
      "prefolding": {"element": 7, "leaf_x": -0.7, "tip_x": 0.0, "z_slope": 0.0}
    }
"""

from __future__ import annotations

import argparse
import bisect
import csv
import io
import json
import json.scanner
import math
import os
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import crossmap as cm
from . import dynamics as dy
from . import nabs
from .covering import (ArraySet, BcgStructure, Certificate, DeviationBudget, all_pass, compute_budgets,
                       covering_certificates, strip_windows)
from .errors import BlenderError, NoCone, Violation
from .geometry import BoxXYZ, Interval, SsDisc

COMMANDS = ("verify", "plan", "build", "certify", "intersect", "tangency", "array", "prefold")
BUILTINS = ("horseshoe", "affine3", "affine-array", "nabs-dyadic", "nabs-saddlefocus")
DEFAULT_MODEL = {"verify": "builtin:horseshoe", "build": "builtin:nabs-dyadic", "certify": "builtin:nabs-dyadic",
                 "intersect": "builtin:affine3", "tangency": "builtin:nabs-dyadic", "array": "builtin:affine-array",
                 "prefold": "builtin:affine-array", "plan": None}
COVERING_CHECKS = ("A1", "A2", "A3", "B")
PSI_FAMILIES = ("wave", "sin_xy")
EXIT_OK, EXIT_FAIL, EXIT_INPUT = 0, 2, 3


class ModelError(BlenderError):
    """Invalid model file or configuration; ``line`` is 0 when unknown."""

    code = "BAD_MODEL"

    def __init__(self, message, path="", line=0):
        super().__init__(message, path=path, line=line)
        self.path = path
        self.line = line


@dataclass(frozen=True)
class RunConfig:
    command: str
    model_path: str | None = None
    out_dir: Path = Path(".")
    tol: float = 1e-9
    max_depth: int = 200
    seed: int = 0
    k: int = 2
    alpha: float | None = None
    x_B: float = 0.9
    iterate: int = 1
    spec_path: str | None = None
    checks: tuple[str, ...] | None = None
    disc_x: float = 0.2
    element: int | None = None
    leaf_x: float | None = None
    tip_x: float | None = None
    mode: str = "base"
    depth: int = 3
    scenario: str = "right_case"
    mu: float | None = None
    n_period: int = 3

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise ModelError(f"unknown command {self.command!r}")
        if not self.tol > 0:
            raise ModelError(f"--tol must be positive, got {self.tol}")
        if self.max_depth < 1:
            raise ModelError(f"--max-depth must be >= 1, got {self.max_depth}")
        if self.k < 1 or self.iterate < 1 or self.depth < 1 or self.n_period < 1:
            raise ModelError("--k, --iterate, --depth and --n-period must be >= 1")
        if self.checks is not None and set(self.checks) - set(COVERING_CHECKS):
            raise ModelError(f"unknown covering checks {sorted(set(self.checks) - set(COVERING_CHECKS))}")
        if self.scenario not in ("right_case", "left_case"):
            raise ModelError(f"unknown scenario {self.scenario!r}")


@dataclass(frozen=True)
class Model:
    name: str
    partition: cm.MarkovPartition | None = None
    bcg: BcgStructure | None = None
    checks: tuple[str, ...] = ("A1",)
    arrays: ArraySet | None = None
    family: nabs.NabsFamily | None = None
    declared: dict = field(default_factory=dict)
    prefolding: dict | None = None
    cone_error: str | None = None


@dataclass(frozen=True)
class Setup:
    """Everything an engine needs: partition, structure, budgets and windows."""

    partition: cm.MarkovPartition
    bcg: BcgStructure
    budgets: DeviationBudget
    arrays: ArraySet | None
    plan: nabs.GridPlan | None = None
    spec: nabs.SpecificationPair | None = None

    @property
    def arity(self):
        if self.spec is None:
            return None
        return len({r[2] for r in self.spec.roles}) * self.plan.N, self.plan.arity_bound

    def certificates(self, separated=False, arrays=False) -> list[Certificate]:
        return nabs.certify_partition(self.partition, self.bcg, self.budgets, self.arrays if arrays else None,
                                      separated, strong_a3=self.spec is not None, arity=self.arity)


# ---------------------------------------------------------------- model loading

def _pair_arrays(p: cm.MarkovPartition, groups: Sequence[Sequence[int]], k: int) -> ArraySet:
    return ArraySet(tuple(tuple((p.maps[i].source_id, t, i) for i in g) for t in p.element_ids for g in groups), k)


def builtin_model(name: str) -> Model:
    if name == "horseshoe":
        # two branches at rate 0.4 cannot cover the base, so no covering check by default
        return Model(name, cm.horseshoe(), BcgStructure(0.9), checks=())
    if name == "affine3":
        return Model(name, cm.affine3(), BcgStructure(0.9))
    if name == "affine-array":
        p = cm.affine_array()
        return Model(name, p, BcgStructure(0.9, 0.3, 0.7), ("A1", "B"), _pair_arrays(p, cm.array_slots(p), 2),
                     prefolding={"element": 7, "leaf_x": -0.7, "tip_x": 0.0,
                                 "z_slope": 0.8 * p.cone_constants.K_ss})
    if name == "nabs-dyadic":
        return Model(name, family=nabs.dyadic_family(0.045), checks=("A1", "A2", "A3", "B"),
                     prefolding={"element": 1, "leaf_x": 0.0, "tip_x": 0.2, "z_slope": 0.0})
    if name == "nabs-saddlefocus":
        return Model(name, family=nabs.saddle_focus_family(), checks=("A1", "A2", "A3", "B"),
                     prefolding={"element": 1, "leaf_x": 0.0, "tip_x": 0.2, "z_slope": 0.0})
    raise ModelError(f"unknown builtin model {name!r}; choose from {', '.join(BUILTINS)}")


class _LineDict(dict):
    """A decoded JSON object that remembers the line of its opening brace."""

    line = 0


def _decode(text: str):
    """json.loads that tags every object with its source line."""
    breaks = [i for i, ch in enumerate(text) if ch == "\n"]
    dec = json.JSONDecoder()

    def parse_object(s_and_end, strict, scan_once, object_hook, object_pairs_hook, memo=None):
        obj, end = json.decoder.JSONObject(s_and_end, strict, scan_once, object_hook, object_pairs_hook, memo)
        out = _LineDict(obj)
        out.line = bisect.bisect_left(breaks, s_and_end[1]) + 1
        return out, end

    dec.parse_object = parse_object
    dec.scan_once = json.scanner.py_make_scanner(dec)
    return dec.decode(text)


class _Schema:
    def __init__(self):
        self.line = 0

    def fail(self, path: str, message: str):
        raise ModelError(f"{path}: {message}", path, self.line)

    def get(self, obj: dict, key: str, path: str, kind, required=True, default=None):
        self.line = getattr(obj, "line", self.line)
        if key not in obj:
            if required:
                self.fail(f"{path}.{key}".lstrip("."), "missing required field")
            return default
        v = obj[key]
        ok = isinstance(v, kind) and not (kind in (int, float, (int, float)) and isinstance(v, bool))
        if not ok:
            self.fail(f"{path}.{key}".lstrip("."), f"expected {getattr(kind, '__name__', 'number')}, "
                                                   f"got {type(v).__name__}")
        return v

    def number(self, v, path: str) -> float:
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            self.fail(path, f"expected a finite number, got {v!r}")
        return float(v)

    def interval(self, v, path: str) -> Interval:
        if not isinstance(v, list) or len(v) != 2:
            self.fail(path, "expected [lo, hi]")
        lo, hi = self.number(v[0], path), self.number(v[1], path)
        if not lo < hi:
            self.fail(path, f"empty interval [{lo}, {hi}]")
        return Interval(lo, hi)

    def matrix(self, v, rows: int, cols: int, path: str) -> list[list[float]]:
        if not isinstance(v, list) or len(v) != rows or any(not isinstance(r, list) or len(r) != cols for r in v):
            self.fail(path, f"expected a {rows}x{cols} matrix")
        return [[self.number(c, f"{path}[{i}][{j}]") for j, c in enumerate(r)] for i, r in enumerate(v)]


def parse_model(text: str, source: str = "<model>") -> Model:
    """Validate a model JSON document and build its partition."""
    try:
        doc = _decode(text)
    except json.JSONDecodeError as e:
        raise ModelError(f"malformed JSON: {e.msg} (column {e.colno})", "", e.lineno) from None
    s = _Schema()
    if not isinstance(doc, dict):
        s.fail("$", "top level must be an object")
    dims = s.get(doc, "dims", "", list)
    if len(dims) != 3 or any(isinstance(d, bool) or not isinstance(d, int) or d < 1 for d in dims) or dims[0] != 1:
        s.fail("dims", "expected [1, d_u, d_ss] with positive integers")
    _, du, ds = dims
    d = 1 + du + ds
    boxes, ids = [], []
    elements = s.get(doc, "elements", "", list)
    if not elements:
        s.fail("elements", "at least one element is required")
    for i, el in enumerate(elements):
        p = f"elements[{i}]"
        if not isinstance(el, dict):
            s.fail(p, "expected an object")
        eid = s.get(el, "id", p, int)
        if eid in ids:
            s.fail(f"{p}.id", f"duplicate element id {eid}")
        x = s.interval(s.get(el, "x", p, list), f"{p}.x")
        y = s.get(el, "y", p, list)
        z = s.get(el, "z", p, list)
        if len(y) != du or len(z) != ds:
            s.fail(p, f"y needs {du} and z needs {ds} intervals")
        ids.append(eid)
        boxes.append(BoxXYZ(x, tuple(s.interval(c, f"{p}.y[{j}]") for j, c in enumerate(y)),
                            tuple(s.interval(c, f"{p}.z[{j}]") for j, c in enumerate(z))))
    by_id = dict(zip(ids, boxes))
    maps = []
    for i, mp in enumerate(s.get(doc, "maps", "", list)):
        p = f"maps[{i}]"
        if not isinstance(mp, dict):
            s.fail(p, "expected an object")
        src = s.get(mp, "source", p, int)
        if src not in by_id:
            s.fail(f"{p}.source", f"unknown element {src}")
        tgts = s.get(mp, "targets", p, list)
        if not tgts or any(t not in by_id for t in tgts):
            s.fail(f"{p}.targets", f"targets must be known element ids, got {tgts}")
        L = s.matrix(s.get(mp, "linear", p, list), d, d, f"{p}.linear")
        off = s.get(mp, "offset", p, list)
        if len(off) != d:
            s.fail(f"{p}.offset", f"expected {d} numbers")
        off = [s.number(v, f"{p}.offset[{j}]") for j, v in enumerate(off)]
        psis = []
        for j, ps in enumerate(s.get(mp, "psi", p, list, required=False, default=[])):
            q = f"{p}.psi[{j}]"
            if not isinstance(ps, dict):
                s.fail(q, "expected an object")
            fam = s.get(ps, "family", q, str)
            if fam not in PSI_FAMILIES:
                s.fail(f"{q}.family", f"unknown perturbation family {fam!r}; known: {', '.join(PSI_FAMILIES)}")
            comp = s.get(ps, "component", q, int, required=False, default=0)
            if not 0 <= comp < d:
                s.fail(f"{q}.component", f"component must lie in [0, {d})")
            amp = s.number(s.get(ps, "amplitude", q, (int, float)), f"{q}.amplitude")
            phase = s.number(s.get(ps, "phase", q, (int, float), required=False, default=0.0), f"{q}.phase")
            psis.append(cm.Psi(comp, fam, amp, phase))
        orient = s.get(doc, "orientation", "", str, required=False, default="cs")
        maps.append(cm.make_linear_map(src, tgts, by_id[src], [by_id[t] for t in tgts], L, off, psis,
                                       orientation=orient))
    if not maps:
        s.fail("maps", "at least one map is required")
    alpha = doc.get("alpha")
    alpha = s.number(alpha, "alpha") if alpha is not None else max(abs(m.center[0]) for m in maps)
    floor = s.number(doc.get("cone_floor", cm.DEFAULT_CONE_FLOOR), "cone_floor")
    cone_error = None
    try:
        cones = cm.cone_constants_for(maps, floor)
    except NoCone as e:
        cones, cone_error = None, str(e)
    name = s.get(doc, "name", "", str, required=False, default=Path(source).stem)
    part = cm.MarkovPartition(tuple(ids), tuple(boxes), tuple(maps), cones,
                              doc.get("orientation", "cs"), alpha, name)
    declared = {}
    db = s.get(doc, "derivative_bounds", "", dict, required=False, default={})
    for key in ("mu", "nu"):
        if key in db:
            declared[key] = s.number(db[key], f"derivative_bounds.{key}")
    b = s.get(doc, "bcg", "", dict, required=False, default={})
    try:
        bcg = BcgStructure(s.number(b.get("x_B", 0.9), "bcg.x_B"),
                           s.number(b["x_C"], "bcg.x_C") if "x_C" in b else None,
                           s.number(b["x_G"], "bcg.x_G") if "x_G" in b else None)
    except ValueError as e:
        s.fail("bcg", str(e))
    checks = tuple(s.get(doc, "checks", "", list, required=False, default=["A1"]))
    if any(not isinstance(c, str) for c in checks) or set(checks) - set(COVERING_CHECKS):
        s.fail("checks", f"unknown checks {sorted(set(checks) - set(COVERING_CHECKS))}")
    arrays = None
    if "arrays" in doc:
        a = s.get(doc, "arrays", "", dict)
        k = s.get(a, "k", "arrays", int)
        groups = s.get(a, "maps", "arrays", list)
        for j, g in enumerate(groups):
            if not isinstance(g, list) or len(g) != k or any(not isinstance(v, int) or not 0 <= v < len(maps)
                                                              for v in g):
                s.fail(f"arrays.maps[{j}]", f"expected {k} map indices")
        arrays = _pair_arrays(part, groups, k)
    pre = s.get(doc, "prefolding", "", dict, required=False, default=None)
    if pre is not None:
        pre = {"element": s.get(pre, "element", "prefolding", int),
               "leaf_x": s.number(s.get(pre, "leaf_x", "prefolding", (int, float)), "prefolding.leaf_x"),
               "tip_x": s.number(s.get(pre, "tip_x", "prefolding", (int, float)), "prefolding.tip_x"),
               "z_slope": s.number(pre.get("z_slope", 0.0), "prefolding.z_slope")}
    return Model(name, part, bcg, checks, arrays, None, declared, pre, cone_error)


def model_document(p: cm.MarkovPartition, bcg: BcgStructure | None = None,
                   cone_floor: float | None = None) -> dict:
    """JSON model document of a partition built from linear maps."""
    doc = {"name": p.name, "dims": [1, p.boxes[0].d_u, p.boxes[0].d_ss], "alpha": p.alpha,
           "orientation": p.orientation, **({"cone_floor": cone_floor} if cone_floor is not None else {}),
           "elements": [{"id": e, "x": b.x.to_list(), "y": [c.to_list() for c in b.y],
                         "z": [c.to_list() for c in b.z]} for e, b in zip(p.element_ids, p.boxes)],
           "maps": []}
    for m in p.maps:
        entry = {"source": m.source_id, "targets": list(m.target_ids), "linear": m.spec["linear"],
                 "offset": m.spec["offset"]}
        if m.spec.get("psi"):
            entry["psi"] = [{"family": k, "amplitude": a, "component": c, "phase": ph}
                            for c, k, a, ph in m.spec["psi"]]
        doc["maps"].append(entry)
    if bcg is not None:
        doc["bcg"] = {"x_B": bcg.x_B, **({"x_C": bcg.x_C} if bcg.x_C is not None else {}),
                      **({"x_G": bcg.x_G} if bcg.x_G is not None else {})}
    return doc


def load_model(ref: str) -> Model:
    if ref.startswith("builtin:"):
        return builtin_model(ref.split(":", 1)[1])
    try:
        text = Path(ref).read_text()
    except OSError as e:
        raise ModelError(f"cannot read model file: {e.strerror}") from None
    return parse_model(text, ref)


def _family_setup(model: Model, cfg: RunConfig, spec: nabs.SpecificationPair | None = None,
                  psi: float = 0.0) -> Setup:
    fam = model.family if cfg.iterate == 1 else nabs.iterate_family(model.family, cfg.iterate)
    alpha = fam.alpha if cfg.alpha is None else cfg.alpha ** cfg.iterate
    plan = nabs.plan_grid(alpha, cfg.x_B, cfg.k)
    spec = spec if spec is not None else nabs.select_indices(fam, plan)
    p = nabs.build_markov(fam, spec, psi=psi)
    budgets = compute_budgets(p, plan.alpha, nabs.grid_offsets(p, spec))
    return Setup(p, plan.bcg, budgets, nabs.arrays_for(p, spec, plan.k), plan, spec)


def make_setup(model: Model, cfg: RunConfig) -> Setup:
    if model.family is not None:
        return _family_setup(model, cfg)
    p = model.partition
    if p.cone_constants is None:
        raise NoCone(model.cone_error or "no cone constants")
    return Setup(p, model.bcg, compute_budgets(p), model.arrays)


# ---------------------------------------------------------------- outputs

def jsonable(v):
    if isinstance(v, dict):
        return {str(k): jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [jsonable(x) for x in v]
    if isinstance(v, Interval):
        return v.to_list()
    if isinstance(v, Certificate):
        return jsonable(v.to_dict())
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else ("inf" if v > 0 else "-inf" if v < 0 else "nan")
    if isinstance(v, (str, int, bool)) or v is None:
        return v
    return str(v)


class Outputs:
    """Collects output files and writes them atomically at the end of a run."""

    def __init__(self, out_dir: Path):
        self.out_dir = Path(out_dir)
        self.files: dict[str, str] = {}

    def json(self, name: str, obj):
        self.files[name] = json.dumps(jsonable(obj), indent=2) + "\n"

    def trace(self, rows):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(dy.TRACE_COLUMNS)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, float) else v for v in r])
        self.files["trace.csv"] = buf.getvalue()

    def flush(self):
        self.out_dir.mkdir(parents=True, exist_ok=True)
        for name, text in self.files.items():
            fd, tmp = tempfile.mkstemp(dir=self.out_dir, prefix=f".{name}.")
            with os.fdopen(fd, "w") as fh:
                fh.write(text)
            os.replace(tmp, self.out_dir / name)


def _error_dict(e: BlenderError) -> dict:
    return {"code": e.code, "message": str(e), "details": e.details}


def _result(cfg: RunConfig, model_name: str | None, ok: bool, **extra) -> dict:
    return {"command": cfg.command, "model": model_name, "status": "PASS" if ok else "FAIL", **extra}


def _certs_dict(certs: Sequence[Certificate]) -> dict:
    return {"all_pass": all_pass(certs), "certificates": [c.to_dict() for c in certs]}


# ---------------------------------------------------------------- commands

def _map_certificates(p: cm.MarkovPartition) -> list[Certificate]:
    hyp, part, hyp_bad, part_bad = {}, {}, None, None
    for k, m in enumerate(p.maps):
        try:
            hyp[f"map{k}"] = cm.verify_hyperbolicity(m).margin_mu
        except Violation as e:
            hyp[f"map{k}"] = 1.0 - e.value if e.value >= 1.0 else -abs(e.value)
            hyp_bad = hyp_bad or {"code": e.code, "map": k, "inequality": e.inequality, "value": e.value}
        try:
            part[f"map{k}"] = cm.verify_partial_hyperbolicity(m).margin_nu
        except Violation as e:
            part[f"map{k}"] = 1.0 - e.value if e.value >= 1.0 else -abs(e.value)
            part_bad = part_bad or {"code": e.code, "map": k, "inequality": e.inequality, "value": e.value}
        except BlenderError as e:
            part[f"map{k}"] = -1.0
            part_bad = part_bad or {"code": e.code, "map": k, "message": str(e)}
    return [Certificate("HYPERBOLICITY", hyp_bad is None, hyp, hyp_bad),
            Certificate("PARTIAL_HYPERBOLICITY", part_bad is None, part, part_bad)]


def _cone_certificate(model: Model, p: cm.MarkovPartition, seed: int) -> Certificate:
    if p.cone_constants is None:
        return Certificate("CONES", False, {"u": -1.0}, {"code": "NO_CONE", "reason": model.cone_error})
    rng = np.random.default_rng(seed)
    margins = {}
    for cone in ("u", "s", "ss"):
        worst = math.inf
        for m in p.maps:
            margin, growth = cm.cone_sample_check(m, p.cone_constants, cone, 1000, rng)
            worst = min(worst, margin, growth - 1.0)
        margins[cone] = worst
    K = p.cone_constants
    return Certificate("CONES", all(v > 0 for v in margins.values()), margins,
                       {"K_u": K.K_u, "K_s": K.K_s, "K_ss": K.K_ss})


def _declared_certificate(declared: dict, p: cm.MarkovPartition) -> Certificate:
    margins = {}
    if "mu" in declared:
        mus = [cm.verify_hyperbolicity(m).mu for m in p.maps]
        margins["mu"] = declared["mu"] - max(mus)
    if "nu" in declared:
        nus = [cm.verify_partial_hyperbolicity(m).nu for m in p.maps]
        margins["nu"] = declared["nu"] - max(nus)
    ok = all(v >= 0 for v in margins.values())
    # equality with the declared bound is acceptable, margins must stay positive for a PASS
    return Certificate("DECLARED_BOUNDS", ok, {k: max(v, 5e-324) if ok else v for k, v in margins.items()})


def cmd_verify(cfg: RunConfig, model: Model, out: Outputs) -> int:
    checks = cfg.checks if cfg.checks is not None else model.checks
    if model.family is not None:
        setup = make_setup(model, cfg)
        p = setup.partition
    else:
        setup, p = None, model.partition
    certs = _map_certificates(p) + [_cone_certificate(model, p, cfg.seed)]
    if model.declared and all(c.verdict for c in certs[:2]):
        certs.append(_declared_certificate(model.declared, p))
    if checks:
        try:
            setup = setup or make_setup(model, cfg)
            cov = covering_certificates(setup.partition, setup.bcg, setup.budgets,
                                        setup.arrays if "B" in checks else None,
                                        separated="A2" in checks or "A3" in checks,
                                        strong_a3=setup.spec is not None, arity=setup.arity)
            certs += [c for c in cov if c.property in checks or ("B" in checks and c.property.startswith("B"))]
        except (BlenderError, ValueError) as e:
            certs.append(Certificate("A1", False, {"margin": -1.0}, {"reason": str(e)}))
    ok = all_pass(certs)
    out.json("certificates.json", _certs_dict(certs))
    out.json("result.json", _result(cfg, model.name, ok, checks=list(checks)))
    return EXIT_OK if ok else EXIT_FAIL


def _plan(cfg: RunConfig, alpha: float | None) -> tuple[nabs.GridPlan, float]:
    a = alpha if cfg.alpha is None else cfg.alpha
    if a is None:
        raise ModelError("plan needs --alpha")
    eff = a ** cfg.iterate
    return nabs.plan_grid(eff, cfg.x_B, cfg.k), a


def cmd_plan(cfg: RunConfig, model: Model | None, out: Outputs) -> int:
    plan, a = _plan(cfg, model.family.alpha if model and model.family else None)
    out.json("plan.json", {"alpha_input": a, "iterate": cfg.iterate, **plan.to_dict()})
    out.json("result.json", _result(cfg, model.name if model else None, True, N=plan.N, m=plan.m))
    return EXIT_OK


def _need_family(model: Model):
    if model.family is None:
        raise ModelError(f"model {model.name!r} is not a NABS family; use builtin:nabs-dyadic or "
                         f"builtin:nabs-saddlefocus")


def _load_spec(path: str) -> nabs.SpecificationPair:
    try:
        return nabs.SpecificationPair.from_dict(json.loads(Path(path).read_text()))
    except OSError as e:
        raise ModelError(f"cannot read spec file: {e.strerror}") from None
    except json.JSONDecodeError as e:
        raise ModelError(f"malformed spec JSON: {e.msg}", "", e.lineno) from None
    except (KeyError, TypeError, ValueError) as e:
        raise ModelError(f"spec file does not match the specification schema: {e}") from None


def cmd_build(cfg: RunConfig, model: Model, out: Outputs) -> int:
    _need_family(model)
    setup = _family_setup(model, cfg)
    out.json("plan.json", setup.plan.to_dict())
    out.json("spec.json", setup.spec.to_dict(setup.plan, setup.budgets))
    out.json("result.json", _result(cfg, model.name, True, elements=len(setup.partition.element_ids),
                                     delta=setup.spec.delta, delta_tilde=setup.spec.delta_tilde))
    return EXIT_OK


def cmd_certify(cfg: RunConfig, model: Model, out: Outputs) -> int:
    _need_family(model)
    spec = _load_spec(cfg.spec_path) if cfg.spec_path else None
    setup = _family_setup(model, cfg, spec)
    certs = setup.certificates(separated=True, arrays=True)
    ok = all_pass(certs)
    out.json("plan.json", setup.plan.to_dict())
    out.json("spec.json", setup.spec.to_dict(setup.plan, setup.budgets))
    out.json("certificates.json", _certs_dict(certs))
    bad = [c.to_dict() for c in certs if not c.verdict and c.property not in ("SEPARATED", "ARRAYED")]
    out.json("result.json", _result(cfg, model.name, ok, smallest_margin=nabs.smallest_margin(certs),
                                     failing=bad))
    return EXIT_OK if ok else EXIT_FAIL


def _gate(cfg, model, out, certs) -> bool:
    """Write the precondition certificates; True when the engine may run."""
    out.json("certificates.json", _certs_dict(certs))
    if all_pass(certs):
        return True
    bad = [c.property for c in certs if not c.verdict]
    out.json("result.json", _result(cfg, model.name, False, error={"code": "PRECONDITION",
                                                                   "message": f"certificates FAIL: {bad}"}))
    return False


def _engine_failure(cfg, model, out, trace, e: BlenderError) -> int:
    out.trace(trace)
    out.json("result.json", _result(cfg, model.name, False, error=_error_dict(e)))
    return EXIT_FAIL


def cmd_intersect(cfg: RunConfig, model: Model, out: Outputs) -> int:
    setup = make_setup(model, cfg)
    p = setup.partition
    if not _gate(cfg, model, out, setup.certificates()):
        return EXIT_FAIL
    element = cfg.element if cfg.element is not None else p.element_ids[len(p.element_ids) // 2]
    if element not in p.element_ids:
        raise ModelError(f"unknown element {element}")
    box = p.box(element)
    disc = SsDisc.constant(element, cfg.disc_x, [c.mid for c in box.y], box.z)
    windows = strip_windows(p, setup.bcg, setup.budgets)
    trace: list = []
    try:
        r = dy.find_unstable_intersection(p, setup.bcg, windows, disc, cfg.tol, mode=cfg.mode,
                                          max_depth=cfg.max_depth, budgets=setup.budgets, trace=trace)
    except BlenderError as e:
        return _engine_failure(cfg, model, out, trace, e)
    ok = r.residual <= cfg.tol
    out.trace(trace)
    out.json("result.json", _result(cfg, model.name, ok, element=element, disc_x=cfg.disc_x, tol=cfg.tol,
                                     coding=list(r.coding.symbols), depth=r.depth, residual=r.residual,
                                     point={"x": r.point[0], "y": list(r.point[1]), "z": list(r.point[2])},
                                     strips=[list(s) for s in r.strips]))
    return EXIT_OK if ok else EXIT_FAIL


def _family_args(model: Model, cfg: RunConfig) -> dict:
    pre = dict(model.prefolding or {})
    for key in ("element", "leaf_x", "tip_x"):
        if getattr(cfg, key) is not None:
            pre[key] = getattr(cfg, key)
    missing = [k for k in ("element", "leaf_x", "tip_x") if k not in pre]
    if missing:
        raise ModelError(f"model defines no folding family; pass --{' --'.join(m.replace('_', '-') for m in missing)}")
    pre.setdefault("z_slope", 0.0)
    return pre


def cmd_tangency(cfg: RunConfig, model: Model, out: Outputs) -> int:
    try:
        setup = make_setup(model, cfg)
        certs = setup.certificates(separated=True)
    except (BlenderError, ValueError) as e:
        certs = [Certificate("SEPARATED", False, {"margin": -1.0},
                             {"code": getattr(e, "code", "PRECONDITION"), "reason": str(e)})]
    if not _gate(cfg, model, out, certs):
        return EXIT_FAIL
    p = setup.partition
    fa = _family_args(model, cfg)
    fam = dy.folding_family(p, fa["element"], fa["leaf_x"], fa["tip_x"], z_slope=fa["z_slope"])
    windows = strip_windows(p, setup.bcg, setup.budgets)
    trace: list = []
    try:
        r = dy.locate_tangency(p, setup.bcg, windows, fam, cfg.tol, min(cfg.max_depth, 60),
                               budgets=setup.budgets, trace=trace)
    except BlenderError as e:
        return _engine_failure(cfg, model, out, trace, e)
    ratios = [b / a for a, b in zip(r.widths, r.widths[1:]) if a > 0]
    out.trace(trace)
    out.json("result.json", _result(cfg, model.name, True, element=fa["element"], tol=cfg.tol,
                                     leaf_window=r.leaf.x_window, coding=list(r.leaf.coding_prefix.symbols),
                                     parameter=r.parameter, tangent_margin=r.tangent_margin,
                                     widths=list(r.widths), width_ratios=ratios,
                                     strips=[list(s) for s in r.strips]))
    return EXIT_OK


def _array_family(model: Model, cfg: RunConfig, p: cm.MarkovPartition):
    fa = _family_args(model, cfg)
    return dy.folding_family(p, fa["element"], fa["leaf_x"], fa["tip_x"], z_slope=fa["z_slope"],
                             kind="prefolding")


def cmd_array(cfg: RunConfig, model: Model, out: Outputs) -> int:
    setup = make_setup(model, cfg)
    if setup.arrays is None:
        raise ModelError(f"model {model.name!r} defines no arrays")
    if setup.arrays.k != cfg.k:
        raise ModelError(f"--k {cfg.k} does not match the model's {setup.arrays.k}-arrays")
    if not _gate(cfg, model, out, setup.certificates(arrays=True)):
        return EXIT_FAIL
    p = setup.partition
    fam = _array_family(model, cfg, p)
    windows = strip_windows(p, setup.bcg, setup.budgets)
    try:
        boxes = dy.all_leaf_boxes(p, setup.bcg, windows, setup.arrays, fam, cfg.depth, budgets=setup.budgets)
    except BlenderError as e:
        return _engine_failure(cfg, model, out, [], e)
    leaves = sorted((k, v) for k, v in boxes.items() if len(k) == cfg.depth)
    ok = dy.disjoint([v.x_window for _, v in leaves])
    out.trace([(len(k), v.element_id, "/".join(map(str, k)), v.x_window.lo, v.x_window.hi, v.x_window.width,
                "leaf_box") for k, v in sorted(boxes.items(), key=lambda kv: (len(kv[0]), kv[0]))])
    result = _result(cfg, model.name, ok, k=cfg.k, depth=cfg.depth, count=len(leaves), disjoint=ok,
                     boxes=[{"prefix": list(k), "x_window": v.x_window} for k, v in leaves])
    if not ok:
        result["error"] = {"code": "INVARIANT_BREACH", "message": "leaf boxes overlap"}
    out.json("result.json", result)
    return EXIT_OK if ok else EXIT_FAIL


def cmd_prefold(cfg: RunConfig, model: Model, out: Outputs) -> int:
    setup = make_setup(model, cfg)
    p = setup.partition
    element = cfg.element if cfg.element is not None else (model.prefolding or {}).get("element")
    if element is None:
        raise ModelError("prefold needs --element")
    windows = strip_windows(p, setup.bcg, setup.budgets)
    extra = {}
    mu = 0.0
    try:
        if cfg.scenario == "right_case":
            mu0, mu1 = dy.mu_bounds(p, setup.bcg, windows, cfg.n_period, element_id=element, budgets=setup.budgets)
            mu = 0.5 * (mu0 + mu1) if cfg.mu is None else cfg.mu
            extra = {"mu0": mu0, "mu1": mu1, "mu": mu}
        f = dy.make_prefolding(p, setup.bcg, cfg.scenario, cfg.n_period, mu, windows=windows, element_id=element,
                               budgets=setup.budgets)
    except BlenderError as e:
        out.json("result.json", _result(cfg, model.name, False, scenario=cfg.scenario, **extra,
                                         error=_error_dict(e)))
        return EXIT_FAIL
    chk = dy.check_prefolding(f, setup.bcg, setup.budgets.delta_tilde)
    out.json("result.json", _result(cfg, model.name, bool(chk["ok"]), scenario=cfg.scenario, element=element,
                                     **extra, coeffs=list(f.coeffs), markers=[list(m) for m in f.markers],
                                     marker_parameters=list(dy.marker_parameters(f)), check=chk))
    return EXIT_OK if chk["ok"] else EXIT_FAIL


HANDLERS = {"verify": cmd_verify, "plan": cmd_plan, "build": cmd_build, "certify": cmd_certify,
            "intersect": cmd_intersect, "tangency": cmd_tangency, "array": cmd_array, "prefold": cmd_prefold}


# ---------------------------------------------------------------- argument parsing

class _Parser(argparse.ArgumentParser):
    """Usage errors are invalid input, so they exit 3 rather than argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--model", help="builtin:<name> or a model JSON path")
    common.add_argument("--out-dir", type=Path, default=Path("."))
    common.add_argument("--tol", type=float, default=1e-9)
    common.add_argument("--max-depth", type=int, default=200)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--k", type=int, default=2)
    common.add_argument("--alpha", type=float)
    common.add_argument("--xb", type=float, default=0.9, dest="x_B")
    common.add_argument("--iterate", type=int, default=1, help="use the n-fold iterate of the family")
    parser = _Parser(prog="blender-lab", description="Certified blender and tangency toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("verify", parents=[common], help="hyperbolicity, cones and covering certificates") \
        .add_argument("--checks", help="comma list from A1,A2,A3,B (default: the model's)")
    sub.add_parser("plan", parents=[common], help="grid plan for a contraction rate")
    sub.add_parser("build", parents=[common], help="select indices and build the NABS partition")
    sub.add_parser("certify", parents=[common], help="full certificate bundle") \
        .add_argument("--spec", dest="spec_path", help="specification JSON to certify instead of selecting")
    p = sub.add_parser("intersect", parents=[common], help="unstable leaf through a strong-stable disc")
    p.add_argument("--disc-x", type=float, default=0.2)
    p.add_argument("--element", type=int)
    p.add_argument("--mode", choices=("base", "center"), default="base")
    for name in ("tangency", "array"):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--element", type=int)
        p.add_argument("--leaf-x", type=float)
        p.add_argument("--tip-x", type=float)
        if name == "array":
            p.add_argument("--depth", type=int, default=3)
    p = sub.add_parser("prefold", parents=[common], help="prefolding family of an unfolded tangency")
    p.add_argument("--scenario", choices=("right_case", "left_case"), default="right_case")
    p.add_argument("--mu", type=float)
    p.add_argument("--n-period", type=int, default=3)
    p.add_argument("--element", type=int)
    return parser


def config_from_args(ns: argparse.Namespace) -> RunConfig:
    kw = {k: v for k, v in vars(ns).items() if k in RunConfig.__dataclass_fields__ and v is not None}
    kw["model_path"] = ns.model if ns.model is not None else DEFAULT_MODEL[ns.command]
    if getattr(ns, "checks", None) is not None:
        kw["checks"] = tuple(c for c in ns.checks.split(",") if c)
    return RunConfig(**kw)


def _threads() -> int:
    raw = os.environ.get("BLENDER_LAB_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        raise ModelError(f"BLENDER_LAB_THREADS must be a positive integer, got {raw!r}")
    return n


def run(cfg: RunConfig) -> int:
    out = Outputs(cfg.out_dir)
    model = None
    try:
        _threads()
        model = load_model(cfg.model_path) if cfg.model_path else None
        code = HANDLERS[cfg.command](cfg, model, out)
    except ModelError as e:
        where = f"{cfg.model_path or ''}:{e.line}" if e.line else (cfg.model_path or "input")
        print(f"error: {where}: {e}", file=sys.stderr)
        return EXIT_INPUT
    except BlenderError as e:
        out.json("result.json", _result(cfg, model.name if model else None, False, error=_error_dict(e)))
        code = EXIT_FAIL
    out.flush()
    status = {EXIT_OK: "ok", EXIT_FAIL: "FAIL"}[code]
    print(f"{cfg.command}: {status} ({', '.join(sorted(out.files))} -> {cfg.out_dir})")
    return code


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    try:
        cfg = config_from_args(ns)
    except ModelError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
