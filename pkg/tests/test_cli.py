import json
import subprocess
import sys

import numpy as np
import pytest

from dosepred.cli import main


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["phantom", "--n", "2", "--seed", "7", "--dims", "16", "--out", str(root / "raw")]) == 0
    assert main(["preprocess", "--cases", str(root / "raw"), "--variant", "ct_contours_beam",
                 "--size", "8", "--out", str(root / "prep")]) == 0
    return root


def _tree(d):
    return {str(p.relative_to(d)): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def test_phantom_deterministic(workspace):
    assert main(["phantom", "--n", "2", "--seed", "7", "--dims", "16",
                 "--out", str(workspace / "raw2")]) == 0
    a, b = _tree(workspace / "raw"), _tree(workspace / "raw2")
    a.pop("manifest.json"), b.pop("manifest.json")
    assert a == b
    assert "case_0/dose_consistent.g3" in a and "case_1/dose_perturbed.g3" in a
    man = json.loads((workspace / "raw" / "manifest.json").read_text())
    assert man["subcommand"] == "phantom" and man["seed"] == 7 and "version" in man


def test_train_predict_score(workspace):
    cfg = workspace / "cfg.json"
    cfg.write_text(json.dumps({"net": {"base_width": 2, "depth": 2},
                               "train": {"epochs": 2, "constant_epochs": 1}}))
    run = workspace / "run"
    assert main(["train", "--cases", str(workspace / "prep"), "--loss", "mae_dvh",
                 "--config", str(cfg), "--out", str(run)]) == 0
    assert (run / "model.bin").exists() and (run / "loss_log.csv").exists()
    man = json.loads((run / "manifest.json").read_text())
    assert man["config"]["train"]["loss"] == "mae_dvh" and len(man["input_sha256"]["cases"]) == 64
    preds = workspace / "preds"
    for c in ("case_0", "case_1"):
        assert main(["predict", "--model", str(run / "model.bin"),
                     "--case", str(workspace / "prep" / c), "--out", str(preds / f"{c}.g3")]) == 0
    assert main(["score", "--pred", str(preds), "--real", str(workspace / "prep"),
                 "--out", str(workspace / "rep")]) == 0
    assert (workspace / "rep" / "report.csv").exists()
    assert main(["score", "--pred", str(workspace / "prep"), "--real", str(workspace / "prep"),
                 "--out", str(workspace / "self")]) == 0
    doc = json.loads((workspace / "self" / "report.json").read_text())
    assert doc["aggregate"]["dose_score"]["mean"] == 0.0
    assert doc["aggregate"]["dvh_score"]["mean"] == 0.0


def test_beamdose(workspace, tmp_path):
    out = tmp_path / "b.g3"
    assert main(["beamdose", "--case", str(workspace / "raw" / "case_0"), "--out", str(out)]) == 0
    from dosepred.io import read_g3
    ref = read_g3(workspace / "raw" / "case_0" / "beam.g3")
    assert np.allclose(read_g3(out).values, ref.values, atol=1e-6)
    assert main(["beamdose", "--case", str(workspace / "prep" / "case_0")]) == 2


def test_validation_errors(workspace, tmp_path, capsys):
    # variant mismatch fails fast and names both variants
    code = main(["train", "--cases", str(workspace / "prep"), "--variant", "ct_contours",
                 "--out", str(tmp_path / "t")])
    assert code == 2
    assert "ct_contours_beam" in capsys.readouterr().err
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"net": {"in_channels": 7}}))
    assert main(["train", "--cases", str(workspace / "prep"), "--config", str(bad),
                 "--out", str(tmp_path / "t2")]) == 2
    assert main(["train", "--cases", str(tmp_path / "missing"), "--out", str(tmp_path / "t3")]) == 4
    assert main(["predict", "--model", str(tmp_path / "none.bin"),
                 "--case", str(workspace / "prep" / "case_0"), "--out", str(tmp_path / "p.g3")]) == 4


def test_failure_marker_and_lock(workspace, tmp_path, monkeypatch):
    (tmp_path / "cases").mkdir()
    out = tmp_path / "o"
    out.mkdir()
    (out / ".lock").write_text("1")
    assert main(["phantom", "--n", "1", "--dims", "16", "--out", str(out)]) == 4
    (out / ".lock").unlink()
    # a run that fails midway leaves FAILED behind and releases the lock
    from dosepred import trainer

    def boom(*a, **k):
        raise trainer.NumericError("non-finite loss")
    monkeypatch.setattr(trainer, "train", boom)
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"net": {"base_width": 2, "depth": 2}}))
    run = tmp_path / "run"
    assert main(["train", "--cases", str(workspace / "prep"), "--config", str(cfg),
                 "--out", str(run)]) == 3
    assert "non-finite" in (run / "FAILED").read_text()
    assert not (run / ".lock").exists()


def test_numeric_exit_code(workspace, tmp_path, monkeypatch):
    from dosepred import gradcheck
    monkeypatch.setitem(gradcheck.SUITES, "dvh",
                        (lambda: gradcheck.CheckResult("forced", float("nan"), 1.0),))
    assert main(["gradcheck", "--module", "dvh"]) == 3


def test_help_lists_subcommands():
    out = subprocess.run([sys.executable, "-m", "dosepred.cli", "--help"], capture_output=True,
                         text=True)
    assert out.returncode == 0
    for cmd in ("phantom", "preprocess", "beamdose", "train", "predict", "score", "gradcheck"):
        assert cmd in out.stdout
