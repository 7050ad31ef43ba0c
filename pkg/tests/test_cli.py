import json
import subprocess
import sys
from dataclasses import asdict

import pytest

from conftest import TINY_WORLD
from rmia.cli import main

MODEL = {"d": 8, "heads": 2, "cross_heads": 2, "fusion_hidden": 16}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "gen.json").write_text(json.dumps({"world": asdict(TINY_WORLD), "n": 300, "seed": 3}))
    (root / "model.json").write_text(json.dumps(MODEL))
    assert main(["gen-data", "--config", str(root / "gen.json"), "--out", str(root / "data")]) == 0
    assert main(["train", "--data", str(root / "data"), "--out", str(root / "run"), "--model-config",
                 str(root / "model.json"), "--epochs", "2", "--batch-size", "32"]) == 0
    assert main(["evaluate", "--checkpoint", str(root / "run" / "model.ckpt"), "--data", str(root / "data"),
                 "--out", str(root / "eval")]) == 0
    return root


class TestExitCodes:
    def test_help(self, capsys):
        assert main(["--help"]) == 0
        assert "gen-data" in capsys.readouterr().out

    def test_unknown_command(self):
        assert main(["frobnicate"]) == 1

    def test_missing_required_flag(self):
        assert main(["train", "--data", "x"]) == 1

    def test_missing_input_is_runtime(self, tmp_path, capsys):
        assert main(["evaluate", "--checkpoint", str(tmp_path / "none.ckpt"), "--data", str(tmp_path),
                     "--out", str(tmp_path / "o")]) == 2
        assert "rmia evaluate" in capsys.readouterr().err

    def test_bad_config_json(self, tmp_path):
        (tmp_path / "c.json").write_text("{oops")
        assert main(["gen-data", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "o")]) == 2

    def test_module_entry_point(self):
        r = subprocess.run([sys.executable, "-m", "rmia", "--version"], capture_output=True, text=True)
        assert r.returncode == 0 and r.stdout.startswith("rmia ")


class TestPipeline:
    def test_gen_data_files(self, pipeline):
        data = pipeline / "data"
        for name in ("data.jsonl", "train.jsonl", "val.jsonl", "test.jsonl", "schema.json", "ground_truth.json",
                     "manifest.json"):
            assert (data / name).exists(), name
        lines = [len((data / f"{n}.jsonl").read_text().splitlines()) for n in ("train", "val", "test")]
        assert lines == [240, 30, 30]

    def test_manifest_hashes_outputs(self, pipeline):
        m = json.loads((pipeline / "run" / "manifest.json").read_text())
        assert m["command"] == "train" and "model.ckpt" in m["outputs"]
        assert m["configs"]["model"]["d"] == 8

    def test_evaluate_outputs(self, pipeline):
        rows = (pipeline / "eval" / "predictions.csv").read_text().splitlines()
        assert rows[0] == "index,label,prob_pass" and len(rows) == 31
        assert (pipeline / "eval" / "metrics.csv").exists()

    def test_score_matches_evaluate(self, pipeline):
        out = pipeline / "scores.jsonl"
        assert main(["score", "--checkpoint", str(pipeline / "run" / "model.ckpt"), "--input",
                     str(pipeline / "data" / "test.jsonl"), "--output", str(out)]) == 0
        scored = [json.loads(x)["prob_pass"] for x in out.read_text().splitlines()]
        batched = [float(r.split(",")[2]) for r in (pipeline / "eval" / "predictions.csv").read_text().splitlines()[1:]]
        assert scored == pytest.approx(batched, abs=1e-6)

    def test_score_reports_bad_line(self, pipeline, capsys):
        src = pipeline / "bad.jsonl"
        good = (pipeline / "data" / "test.jsonl").read_text().splitlines()[0]
        src.write_text(good + "\n{broken\n")
        assert main(["score", "--checkpoint", str(pipeline / "run" / "model.ckpt"), "--input", str(src),
                     "--output", str(pipeline / "bad_out.jsonl")]) == 2
        assert "line 2" in capsys.readouterr().err

    def test_analyze(self, pipeline):
        assert main(["analyze", "--data", str(pipeline / "data"), "--out", str(pipeline / "slices"),
                     "--dimension", "affinity_level", "--anchor", "affinity_level=C0"]) == 0
        assert (pipeline / "slices" / "slice_affinity_level.csv").read_text().startswith("dimension,")

    def test_analyze_empty_anchor(self, pipeline):
        assert main(["analyze", "--data", str(pipeline / "data"), "--out", str(pipeline / "slices2"),
                     "--dimension", "affinity_level", "--anchor", "affinity_level=C9"]) == 2

    def test_retrain_is_byte_identical(self, pipeline):
        assert main(["train", "--data", str(pipeline / "data"), "--out", str(pipeline / "run2"), "--model-config",
                     str(pipeline / "model.json"), "--epochs", "2", "--batch-size", "32"]) == 0
        for name in ("model.ckpt", "train_epochs.csv"):
            assert (pipeline / "run" / name).read_bytes() == (pipeline / "run2" / name).read_bytes(), name
