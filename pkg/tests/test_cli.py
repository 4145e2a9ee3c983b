import json
from pathlib import Path

import pytest

from mibkit.cli import FIXTURES, METHODS, main
from mibkit.graph import DEFAULT_GRID, Circuit, CircuitSeries, write_submission
from mibkit.groundtruth import build_ground_truth_model


def _tree(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def _run(*argv):
    return main([str(a) for a in argv])


def _twice(tmp_path, name, *argv):
    """Run a pipeline three times (jobs 1, 1, 4) and return the three output trees."""
    trees = []
    for i, jobs in enumerate((1, 1, 4)):
        out = tmp_path / f"{name}-{i}"
        assert _run(*argv, "--jobs", jobs, "--out", out) == 0
        trees.append(_tree(out))
    return trees


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert _run("gen-data", "--fixture", "copy-head", "--n", 64, "--seed", 1, "--out", root / "copy") == 0
    assert _run("train-model", "--fixture", "copy-head", "--out", root / "copy") == 0
    assert _run("gen-data", "--fixture", "planted-direction", "--n", 200, "--seed", 1, "--out", root / "planted") == 0
    assert _run("train-model", "--fixture", "planted-direction", "--out", root / "planted") == 0
    return root


def _assert_identical(trees):
    assert trees[0] and trees[0] == trees[1] == trees[2]


# reproducibility ------------------------------------------------------------------------

@pytest.mark.parametrize("task", ["ioi", "mcqa"])
def test_gen_data_reproducible(tmp_path, task):
    _assert_identical(_twice(tmp_path, task, "gen-data", "--task", task, "--n", 40, "--seed", 3))


def test_train_model_reproducible(tmp_path):
    assert _run("gen-data", "--task", "ioi", "--n", 80, "--out", tmp_path / "d") == 0
    trees = _twice(tmp_path, "m", "train-model", "--data", tmp_path / "d" / "data.jsonl", "--layers", 1,
                   "--heads", 2, "--d-model", 16, "--d-mlp", 16, "--steps", 10, "--target-accuracy", 0)
    _assert_identical(trees)


@pytest.mark.parametrize("method", ["eap", "eap-ig-inputs", "eap-ig-acts", "eactp", "nap-ig", "hybrid-ens"])
def test_discover_reproducible(tmp_path, work, method):
    args = ["discover", "--model", work / "copy" / "model.json", "--data", work / "copy" / "data.jsonl",
            "--method", method, "--n", 32, "--ig-steps", 4, "--prune-steps", 10]
    _assert_identical(_twice(tmp_path, method, *args))


def test_discover_bootstrap_and_selection_reproducible(tmp_path, work):
    args = ["discover", "--model", work / "copy" / "model.json", "--data", work / "copy" / "data.jsonl",
            "--method", "eap", "--n", 32, "--bootstrap", 5, "--selection", "ilp", "--ablation", "mean"]
    _assert_identical(_twice(tmp_path, "boot", *args))


def test_eval_and_report_reproducible(tmp_path, work):
    sub = tmp_path / "sub"
    assert _run("discover", "--model", work / "copy" / "model.json", "--data", work / "copy" / "data.jsonl",
                "--method", "eap", "--out", sub) == 0
    evals = _twice(tmp_path, "eval", "eval-circuits", "--model", work / "copy" / "model.json",
                   "--data", work / "copy" / "data.jsonl", "--circuits", sub, "--split", "public_test")
    _assert_identical(evals)
    doc = json.loads(evals[0]["report.json"])
    assert doc["auroc"] == 1.0
    _assert_identical(_twice(tmp_path, "rep", "report", tmp_path / "eval-0", tmp_path / "eval-1"))


@pytest.mark.parametrize("kind", ["das", "nonlinear"])
def test_featurize_reproducible(tmp_path, work, kind):
    args = ["featurize", "--model", work / "planted" / "model.json", "--data", work / "planted" / "data.jsonl",
            "--kind", kind, "--layers", 1, "--n", 64, "--steps", 20, "--control-pairs", 64]
    if kind == "nonlinear":
        args += ["--control-margin", 1.0]
    _assert_identical(_twice(tmp_path, kind, *args))


def test_manifest_records_inputs_without_timestamps(tmp_path, work):
    out = tmp_path / "d"
    assert _run("discover", "--model", work / "copy" / "model.json", "--data", work / "copy" / "data.jsonl",
                "--out", out) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    text = json.dumps(manifest)
    assert "model.json" in text and "data.jsonl" in text
    assert "time" not in text.lower()


# end-to-end values ------------------------------------------------------------------------

def _series_submission(root, circuit_for):
    gt = build_ground_truth_model("copy-head")
    g = gt.model.graph
    series = CircuitSeries([(k, circuit_for(gt, g)) for k in DEFAULT_GRID])
    write_submission(root, "copy", gt.kind, series=series, graph=g)
    return root


def _eval(work, sub, out, *extra):
    code = _run("eval-circuits", "--model", work / "copy" / "model.json", "--data", work / "copy" / "data.jsonl",
                "--circuits", sub, "--method", "fixed", "--out", out, *extra)
    return code, (json.loads((out / "report.json").read_text()) if code == 0 else None)


def test_full_model_circuits_score_one(tmp_path, work):
    sub = _series_submission(tmp_path / "sub", lambda gt, g: Circuit.full(g))
    code, doc = _eval(work, sub, tmp_path / "out")
    assert code == 0
    assert abs(doc["cpr"] - 1.0) <= 1e-12 and doc["cmd"] == 0.0


def test_ground_truth_series_cmd_small(tmp_path, work):
    sub = _series_submission(tmp_path / "sub", lambda gt, g: Circuit(g, members=gt.circuit))
    code, doc = _eval(work, sub, tmp_path / "out")
    assert code == 0 and doc["cmd"] <= 0.01


def test_featurize_das_on_planted(tmp_path, work):
    out = tmp_path / "f"
    assert _run("featurize", "--model", work / "planted" / "model.json", "--data", work / "planted" / "data.jsonl",
                "--kind", "das", "--layers", 1, "--out", out) == 0
    doc = json.loads((out / "featurize_report.json").read_text())
    assert doc["best"] >= 0.99


# errors and exit codes ------------------------------------------------------------------------

def test_missing_binary_threshold_names_k(tmp_path, work, capsys):
    sub = _series_submission(tmp_path / "sub", lambda gt, g: Circuit.full(g))
    victim = sorted((sub / "binary").rglob("*.json"))[0]
    victim.unlink()
    code, _ = _eval(work, sub, tmp_path / "out")
    assert code == 2
    assert "k=" in capsys.readouterr().err


def test_unknown_method_lists_registry(tmp_path, work, capsys):
    code = _run("discover", "--model", work / "copy" / "model.json", "--data", work / "copy" / "data.jsonl",
                "--method", "acdc", "--out", tmp_path / "x")
    assert code == 2
    err = capsys.readouterr().err
    assert all(m in err for m in METHODS)


def test_missing_input_file(tmp_path):
    assert _run("train-model", "--data", tmp_path / "nope.jsonl", "--out", tmp_path / "m") == 2


def test_training_divergence_exit_three(tmp_path):
    assert _run("gen-data", "--task", "ioi", "--n", 40, "--out", tmp_path / "d") == 0
    code = _run("train-model", "--data", tmp_path / "d" / "data.jsonl", "--layers", 1, "--heads", 2,
                "--d-model", 16, "--d-mlp", 16, "--steps", 20, "--lr", 1e300, "--target-accuracy", 0,
                "--out", tmp_path / "m")
    assert code == 3


def test_guardrail_failure_exit_four(tmp_path, work, capsys):
    code = _run("featurize", "--model", work / "planted" / "model.json", "--data", work / "planted" / "data.jsonl",
                "--kind", "nonlinear", "--layers", 1, "--n", 64, "--steps", 5, "--control-pairs", 64,
                "--control-margin", -1, "--out", tmp_path / "g")
    assert code == 4
    assert "guardrail" in capsys.readouterr().err


def test_config_file_supplies_options(tmp_path, work):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"model": str(work / "copy" / "model.json"), "data": str(work / "copy" / "data.jsonl"),
                               "method": "nap", "n": 16}))
    a, b = tmp_path / "a", tmp_path / "b"
    assert _run("discover", "--config", cfg, "--out", a) == 0
    assert _run("discover", "--model", work / "copy" / "model.json", "--data", work / "copy" / "data.jsonl",
                "--method", "nap", "--n", 16, "--out", b) == 0
    assert _tree(a) == _tree(b)
    # command-line flags win over the file
    c = tmp_path / "c"
    assert _run("discover", "--config", cfg, "--method", "eap", "--out", c) == 0
    assert _tree(c) != _tree(a)


@pytest.mark.parametrize("payload,needle", [({"methd": "eap"}, "unknown keys"), ({"command": "report"}, "another"),
                                            ({"ablation": "zero"}, "not in")])
def test_config_file_errors(tmp_path, capsys, payload, needle):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(payload))
    assert _run("discover", "--config", cfg, "--out", tmp_path / "x") == 2
    assert needle in capsys.readouterr().err


def test_report_conflict(tmp_path, work, capsys):
    runs = []
    for i, n in enumerate((16, 32)):
        sub, out = tmp_path / f"s{i}", tmp_path / f"e{i}"
        assert _run("discover", "--model", work / "copy" / "model.json", "--data", work / "copy" / "data.jsonl",
                    "--n", n, "--out", sub) == 0
        assert _run("eval-circuits", "--model", work / "copy" / "model.json", "--data", work / "copy" / "data.jsonl",
                    "--circuits", sub, "--n", 8 * (i + 1), "--out", out) == 0
        runs.append(out)
    assert _run("report", *runs, "--out", tmp_path / "r") == 2
    assert "conflict" in capsys.readouterr().err


def test_selfcheck_passes():
    assert _run("selfcheck") == 0


def test_fixture_registry_matches_builder():
    for name in FIXTURES:
        assert build_ground_truth_model(name).kind == name
