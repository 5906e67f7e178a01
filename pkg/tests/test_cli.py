import json

import pytest

from blender_lab import cli
from blender_lab import dynamics as dy
from blender_lab import covering as cv
from blender_lab import crossmap as cm


def run(tmp_path, *args):
    out = tmp_path / "out"
    code = cli.main([*args, "--out-dir", str(out)])
    return code, out


def load(out, name):
    return json.loads((out / name).read_text())


def certs(out):
    return {c["property"]: c for c in load(out, "certificates.json")["certificates"]}


def affine3_doc():
    return cli.model_document(cm.affine3(), cv.BcgStructure(0.9), cone_floor=0.01)


def test_verify_horseshoe(tmp_path):
    code, out = run(tmp_path, "verify", "--model", "builtin:horseshoe")
    assert code == 0
    assert load(out, "certificates.json")["all_pass"]


def test_verify_horseshoe_a1_fails(tmp_path):
    code, out = run(tmp_path, "verify", "--model", "builtin:horseshoe", "--checks", "A1")
    assert code == 2
    c = certs(out)["A1"]
    assert c["verdict"] == "FAIL" and c["witness"]


def test_verify_expanding_center(tmp_path):
    doc = affine3_doc()
    doc["maps"][0]["linear"][0][0] = 1.2
    path = tmp_path / "m.json"
    path.write_text(json.dumps(doc))
    code, out = run(tmp_path, "verify", "--model", str(path))
    assert code == 2
    assert certs(out)["HYPERBOLICITY"]["verdict"] == "FAIL"
    assert "VIOLATION" in json.dumps(load(out, "certificates.json"))


def test_malformed_json(tmp_path, capsys):
    path = tmp_path / "m.json"
    path.write_text('{"dims": [1, 1, 1],\n "elements": [\n')
    code, _ = run(tmp_path, "verify", "--model", str(path))
    assert code == 3
    assert ":3:" in capsys.readouterr().err


def test_schema_error_names_line(tmp_path, capsys):
    doc = affine3_doc()
    del doc["maps"][1]["targets"]
    text = json.dumps(doc, indent=2)
    path = tmp_path / "m.json"
    path.write_text(text)
    code, _ = run(tmp_path, "verify", "--model", str(path))
    assert code == 3
    err = capsys.readouterr().err
    lines = text.splitlines()
    maps_at = next(i for i, s in enumerate(lines) if s.strip().startswith('"maps"'))
    braces = [i + 1 for i, s in enumerate(lines) if i > maps_at and s.strip() == "{" and s.startswith("    {")]
    assert f":{braces[1]}:" in err and "targets" in err


def test_usage_errors_exit_3(tmp_path):
    assert cli.main(["verify", "--tol", "-1"]) == 3
    with pytest.raises(SystemExit) as ei:
        cli.main(["verify", "--no-such-flag"])
    assert ei.value.code == 3


def test_json_round_trip_model(tmp_path):
    path = tmp_path / "m.json"
    path.write_text(json.dumps(affine3_doc()))
    assert run(tmp_path, "verify", "--model", str(path))[0] == 0
    code, out = run(tmp_path, "intersect", "--model", str(path), "--disc-x", "0.2")
    assert code == 0 and load(out, "result.json")["coding"][:3] == [2, 3, 1]


def test_plan(tmp_path):
    code, out = run(tmp_path, "plan", "--alpha", "0.045", "--xb", "0.9", "--k", "2")
    assert code == 0
    plan = load(out, "plan.json")
    assert (plan["N"], plan["m"]) == (41, 5)


def test_plan_needs_iteration(tmp_path):
    code, out = run(tmp_path, "plan", "--alpha", "0.3")
    assert code == 2 and "NO_ALPHA" in (out / "result.json").read_text()
    code, out = run(tmp_path, "plan", "--alpha", "0.3", "--iterate", "3")
    assert code == 0 and load(out, "plan.json")["alpha"] == pytest.approx(0.027)


def test_certify_truncated_spec(tmp_path, dyadic):
    fam, plan, spec, _, _, _ = dyadic
    path = tmp_path / "spec.json"
    path.write_text(spec.restrict((0,)).to_json(plan))
    code, out = run(tmp_path, "certify", "--model", "builtin:nabs-dyadic", "--k", "2", "--spec", str(path))
    assert code == 2
    assert "strengthened-A3 arity bound" in json.dumps(certs(out)["A3"])


def test_intersect(tmp_path):
    code, out = run(tmp_path, "intersect", "--model", "builtin:affine3", "--disc-x", "0.2", "--tol", "1e-9")
    assert code == 0
    res = load(out, "result.json")
    assert res["coding"][:3] == [2, 3, 1] and res["residual"] <= 1e-9
    header = (out / "trace.csv").read_text().splitlines()[0]
    assert header == ",".join(dy.TRACE_COLUMNS)


def test_array(tmp_path):
    code, out = run(tmp_path, "array", "--model", "builtin:affine-array", "--k", "2", "--depth", "3")
    assert code == 0
    boxes = load(out, "result.json")["boxes"]
    assert len(boxes) == 8


def test_tangency_gate(tmp_path):
    code, out = run(tmp_path, "tangency", "--model", "builtin:affine3")
    assert code == 2
    assert not (out / "trace.csv").exists() or len((out / "trace.csv").read_text().splitlines()) <= 1


def test_tangency_nabs(tmp_path):
    code, _ = run(tmp_path, "tangency", "--model", "builtin:nabs-dyadic")
    assert code == 0


def test_prefold(tmp_path):
    assert run(tmp_path, "prefold", "--model", "builtin:affine-array", "--scenario", "right_case")[0] == 0
    assert run(tmp_path, "prefold", "--model", "builtin:affine-array", "--scenario", "left_case")[0] == 0


def test_outputs_deterministic(tmp_path):
    a = run(tmp_path / "a", "intersect", "--model", "builtin:affine3")[1]
    b = run(tmp_path / "b", "intersect", "--model", "builtin:affine3")[1]
    for name in ("certificates.json", "result.json", "trace.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_bad_thread_env(tmp_path, monkeypatch):
    monkeypatch.setenv("BLENDER_LAB_THREADS", "zero")
    assert run(tmp_path, "verify", "--model", "builtin:horseshoe")[0] == 3
