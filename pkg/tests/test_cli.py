"""Command-line behavior: exit codes, snapshots, reproducibility, and
the small end-to-end pipeline."""

import hashlib
import json
import subprocess
import sys

import pytest

from artipose.cli import main


def tree_digest(root):
    digest = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        digest.update(str(path.relative_to(root)).encode())
        digest.update(path.read_bytes())
    return digest.hexdigest()


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "ds"
    assert main(["simgen", "--out", str(out), "--frames", "8", "--seed", "5"]) == 0
    return out


@pytest.fixture(scope="module")
def predictions(dataset):
    out = dataset.parent / "preds.jsonl"
    assert main(["estimate", "--dataset", str(dataset), "--out", str(out), "--seed", "0"]) == 0
    return out


class TestExitCodes:
    def test_missing_dataset(self, tmp_path, capsys):
        rc = main(["estimate", "--dataset", str(tmp_path / "nope"), "--out", str(tmp_path / "p.jsonl")])
        assert rc == 2
        assert "error" in capsys.readouterr().err

    def test_missing_predictions(self, dataset, tmp_path):
        rc = main(
            ["evaluate", "--dataset", str(dataset), "--predictions", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path / "r.json")]
        )
        assert rc == 2

    def test_bad_config_json(self, tmp_path):
        bad = tmp_path / "cfg.json"
        bad.write_text("{broken")
        rc = main(["simgen", "--out", str(tmp_path / "out"), "--config", str(bad), "--frames", "1"])
        assert rc == 2

    def test_runtime_failure_is_exit_3(self, dataset, predictions, tmp_path):
        # valid inputs, but the annotation index holds no frames, so
        # scoring has nothing to match against
        broken = tmp_path / "ds"
        broken.mkdir()
        (broken / "scene_gt.json").write_text((dataset / "scene_gt.json").read_text())
        models_dir = broken / "models"
        models_dir.mkdir()
        for p in (dataset / "models").iterdir():
            (models_dir / p.name).write_bytes(p.read_bytes())
        (broken / "annotations.json").write_text('{"frames": []}\n')
        rc = main(
            ["evaluate", "--dataset", str(broken), "--predictions", str(predictions), "--out", str(tmp_path / "r.json")]
        )
        assert rc == 3

    def test_console_script_missing_input(self):
        proc = subprocess.run(
            [sys.executable, "-m", "artipose.cli", "losses", "--dataset", "/does/not/exist", "--predictions", "x", "--out", "y"],
            capture_output=True,
            text=True,
        )
        assert proc.returncode == 2
        assert "error" in proc.stderr


class TestSimgen:
    def test_reproducible_trees(self, tmp_path):
        for sub in ("a", "b"):
            assert main(["simgen", "--out", str(tmp_path / sub), "--frames", "3", "--seed", "9"]) == 0
        assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")

    def test_snapshot_written(self, dataset):
        snap = json.loads((dataset / "simgen_config.json").read_text())
        assert snap["command"] == "simgen"
        assert snap["version"]
        assert len(snap["config_sha256"]) == 64
        assert snap["effective"]["frames"] == 8
        assert snap["effective"]["seed"] == 5

    def test_config_file_with_flag_override(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"frames": 2, "seed": 3}))
        out = tmp_path / "out"
        assert main(["simgen", "--out", str(out), "--config", str(cfg), "--seed", "4"]) == 0
        snap = json.loads((out / "simgen_config.json").read_text())
        assert snap["effective"]["frames"] == 2
        assert snap["effective"]["seed"] == 4


class TestEstimate:
    def test_covers_every_object(self, dataset, predictions):
        lines = [json.loads(l) for l in predictions.read_text().splitlines()]
        assert len(lines) == 16
        keys = {(r["frame_id"], r["class"]) for r in lines}
        assert keys == {(f, c) for f in range(8) for c in (0, 1)}
        for rec in lines:
            assert rec["converged"]
            assert rec["reproj_err"] < 0.5

    def test_rerun_identical(self, dataset, predictions, tmp_path):
        again = tmp_path / "again.jsonl"
        assert main(["estimate", "--dataset", str(dataset), "--out", str(again), "--seed", "0"]) == 0
        assert again.read_bytes() == predictions.read_bytes()

    def test_jobs_do_not_change_output(self, dataset, predictions, tmp_path):
        par = tmp_path / "par.jsonl"
        assert main(
            ["estimate", "--dataset", str(dataset), "--out", str(par), "--seed", "0", "--jobs", "4"]
        ) == 0
        assert par.read_bytes() == predictions.read_bytes()

    def test_noise_changes_output(self, dataset, predictions, tmp_path):
        noisy = tmp_path / "noisy.jsonl"
        assert main(
            ["estimate", "--dataset", str(dataset), "--out", str(noisy), "--seed", "0", "--noise-sigma", "1.0"]
        ) == 0
        assert noisy.read_bytes() != predictions.read_bytes()


class TestEvaluate:
    def test_clean_pipeline_is_perfect(self, dataset, predictions, tmp_path):
        report_path = tmp_path / "report.json"
        assert main(
            ["evaluate", "--dataset", str(dataset), "--predictions", str(predictions), "--out", str(report_path)]
        ) == 0
        report = json.loads(report_path.read_text())
        assert report["pose_ap"]["mean"] == pytest.approx(1.0)
        assert report["detection_ap"]["mean"] == pytest.approx(1.0)
        assert report["iou_thresholds"][0] == 0.5
        assert report["iou_thresholds"][-1] == pytest.approx(0.95)
        assert len(report["config_sha256"]) == 64
        txt = report_path.with_suffix(".txt").read_text()
        assert "pose AP" in txt
        assert report["version"] in txt

    def test_rerun_identical(self, dataset, predictions, tmp_path):
        a = tmp_path / "a.json"
        b = tmp_path / "b.json"
        for path in (a, b):
            assert main(
                ["evaluate", "--dataset", str(dataset), "--predictions", str(predictions), "--out", str(path)]
            ) == 0
        assert a.read_bytes() == b.read_bytes()


class TestLosses:
    def test_zero_noise_floor(self, dataset, predictions, tmp_path):
        out = tmp_path / "losses.json"
        assert main(
            ["losses", "--dataset", str(dataset), "--predictions", str(predictions), "--out", str(out)]
        ) == 0
        report = json.loads(out.read_text())
        mean = report["mean"]
        assert mean["rotation"] < 1e-6
        assert mean["center"] < 1e-6
        assert mean["depth"] < 1e-6
        assert mean["corr"] < 1e-6
        assert mean["articulation"] == 0.0
        assert len(report["per_object"]) == 16
        assert report["n_skipped"] == 0

    def test_weights_scale_total(self, dataset, predictions, tmp_path):
        wfile = tmp_path / "w.json"
        wfile.write_text(json.dumps({"w_geom": 2.0}))
        base = tmp_path / "base.json"
        doubled = tmp_path / "doubled.json"
        main(["losses", "--dataset", str(dataset), "--predictions", str(predictions), "--out", str(base)])
        main(
            ["losses", "--dataset", str(dataset), "--predictions", str(predictions), "--out", str(doubled), "--weights", str(wfile)]
        )
        m0 = json.loads(base.read_text())["mean"]
        m1 = json.loads(doubled.read_text())["mean"]
        assert m1["geom"] == pytest.approx(m0["geom"])
        assert m1["total"] == pytest.approx(m0["total"] + m0["geom"])


class TestAdapt:
    def test_round_outputs(self, dataset, tmp_path):
        out = tmp_path / "adapt"
        assert main(
            ["adapt", "--dataset", str(dataset), "--out", str(out), "--rounds", "2", "--seed", "0"]
        ) == 0
        metrics = json.loads((out / "metrics.json").read_text())
        assert len(metrics["rounds"]) == 2
        first = metrics["rounds"][0]
        assert first["selection_rate"] == 1.0
        assert first["mean_refined_iou"] >= 0.95
        labels = json.loads((out / "labels_round1.json").read_text())
        assert labels["mixing_ratio"] == pytest.approx(0.3)
        assert len(labels["pose_labels"]) == first["n_pose_labels"]
        snap = json.loads((out / "adapt_config.json").read_text())
        assert snap["effective"]["rounds"] == 2

    def test_rerun_identical(self, dataset, tmp_path):
        for sub in ("x", "y"):
            assert main(
                ["adapt", "--dataset", str(dataset), "--out", str(tmp_path / sub), "--rounds", "1", "--seed", "2", "--noise-sigma", "0.5"]
            ) == 0
        assert tree_digest(tmp_path / "x") == tree_digest(tmp_path / "y")
