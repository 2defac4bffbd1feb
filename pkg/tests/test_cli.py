import csv
import hashlib
import json

import pytest

from gradeconf.cli import main

SMOKE_CFG = """\
[experiment]
folds = 2
ensemble_size = 2
mc_samples = 5
bootstrap = 200
random_trials = 10
compare_cross_entropy = false

[generator]
bags_per_class = 10
tiles_min = 10
tiles_max = 20

[train]
epochs = 3
"""


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def smoke_cfg(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "smoke.cfg"
    p.write_text(SMOKE_CFG)
    return p


@pytest.fixture(scope="module")
def run_all(smoke_cfg, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["run-all", "--config", str(smoke_cfg), "--seed", "7", "--out", str(out)]) == 0
    return out


class TestExitCodes:
    def test_help_and_version(self, capsys):
        assert main(["--help"]) == 0
        assert main(["--version"]) == 0
        assert "gradeconf" in capsys.readouterr().out

    @pytest.mark.parametrize("argv", [
        [], ["frobnicate"], ["run-all", "--seed", "abc"], ["score"], ["evaluate", "--method", "entropy"],
        ["run-all", "--set", "bogus.key=1"], ["run-all", "--set", "experiment.folds=1"], ["run-all", "--set", "nokey"],
    ])
    def test_usage_errors(self, argv, capsys, tmp_path):
        assert main(argv + ["--out", str(tmp_path)] if argv else argv) == 1
        err = capsys.readouterr().err
        assert "usage" in err or "error" in err
        assert "Traceback" not in err

    def test_missing_checkpoint(self, capsys, tmp_path):
        assert main(["score", "--checkpoint", str(tmp_path / "missing.ckpt"), "--out", str(tmp_path)]) == 2
        err = capsys.readouterr().err
        assert "not found" in err and "missing.ckpt" in err and "Traceback" not in err

    def test_missing_config(self, tmp_path):
        assert main(["run-all", "--config", str(tmp_path / "nope.cfg"), "--out", str(tmp_path)]) == 2

    def test_runtime_failure_reports_stage(self, smoke_cfg, tmp_path, capsys):
        code = main(["run-all", "--config", str(smoke_cfg), "--out", str(tmp_path),
                     "--set", f"experiment.cost_matrix={tmp_path / 'absent.csv'}"])
        assert code == 2
        assert "stage 'train' failed" in capsys.readouterr().err
        info = json.loads((tmp_path / "run-info.json").read_text())
        assert info["status"].startswith("failed")
        assert (tmp_path / "partial_report.json").is_file()


class TestRunAll:
    def test_deterministic(self, run_all, smoke_cfg, tmp_path):
        assert main(["run-all", "--config", str(smoke_cfg), "--seed", "7", "--out", str(tmp_path)]) == 0
        assert sha(tmp_path / "report.json") == sha(run_all / "report.json")

    def test_seed_override(self, run_all):
        report = json.loads((run_all / "report.json").read_text())
        assert report["config"]["experiment"]["seed"] == 7 and report["seeds"]["master"] == 7
        assert report["config"]["generator"]["seed"] == 7

    def test_run_info(self, run_all):
        info = json.loads((run_all / "run-info.json").read_text())
        assert info["command"] == "run-all" and info["status"] == "ok" and info["seed"] == 7
        assert info["version"] and info["wall_clock_seconds"] >= 0
        assert info["config"]["experiment"]["folds"] == 2
        assert "[experiment]" in info["config_text"]
        assert {"data", "train", "score", "median_split"} <= set(info["stage_seconds"])

    def test_outputs_stay_under_out(self, smoke_cfg, tmp_path, monkeypatch):
        cwd = tmp_path / "cwd"
        cwd.mkdir()
        monkeypatch.chdir(cwd)
        out = tmp_path / "elsewhere"
        assert main(["run-all", "--config", str(smoke_cfg), "--out", str(out)]) == 0
        assert list(cwd.iterdir()) == []
        assert sorted(p.name for p in tmp_path.iterdir()) == ["cwd", "elsewhere"]

    def test_env_output_root(self, smoke_cfg, tmp_path, monkeypatch):
        monkeypatch.setenv("GRADECONF_OUTPUT_ROOT", str(tmp_path / "root"))
        assert main(["synthesize", "--config", str(smoke_cfg)]) == 0
        assert (tmp_path / "root" / "data" / "manifest.csv").is_file()
        assert (tmp_path / "root" / "run-info.json").is_file()


class TestStagedCommands:
    def test_synthesize(self, smoke_cfg, tmp_path):
        assert main(["synthesize", "--config", str(smoke_cfg), "--out", str(tmp_path)]) == 0
        assert len(list((tmp_path / "data").glob("*.bag"))) == 40

    def test_train_then_score_matches_run_all(self, smoke_cfg, run_all, tmp_path):
        args = ["--config", str(smoke_cfg), "--seed", "7", "--out", str(tmp_path)]
        assert main(["train", *args]) == 0
        assert len(list((tmp_path / "checkpoints").glob("*.npz"))) == 4
        assert main(["score", "--checkpoint", str(tmp_path / "checkpoints"), *args]) == 0
        assert (tmp_path / "scores.csv").read_bytes() == (run_all / "scores.csv").read_bytes()
        passes = json.loads((tmp_path / "inference.json").read_text())["passes_per_bag"]
        assert passes["grade_sensitive"] == 1.0 and passes["mc_dropout"] == 5

    def test_score_single_method(self, smoke_cfg, run_all, tmp_path):
        ck = sorted((run_all / "checkpoints").glob("*.npz"))
        argv = ["score", "--config", str(smoke_cfg), "--seed", "7", "--out", str(tmp_path),
                "--bags", str(run_all / "test"), "--method", "grade_sensitive"]
        for c in ck:
            argv += ["--checkpoint", str(c)]
        assert main(argv) == 0
        with open(tmp_path / "scores.csv") as fh:
            assert {r["method"] for r in csv.DictReader(fh)} == {"grade_sensitive"}

    def test_evaluate_curve_step(self, smoke_cfg, run_all, tmp_path):
        argv = ["evaluate", "--config", str(smoke_cfg), "--seed", "7", "--out", str(tmp_path),
                "--predictions", str(run_all / "predictions.csv"), "--scores", str(run_all / "scores.csv"),
                "--manifest", str(run_all / "manifest.csv"), "--method", "grade_sensitive", "--curve-step", "5"]
        assert main(argv) == 0
        with open(tmp_path / "selective_curves.csv") as fh:
            rows = list(csv.DictReader(fh))
        removed = [int(r["removed"]) for r in rows]
        assert {r["method"] for r in rows} == {"grade_sensitive"}
        assert removed[:2] == [0, 5] and all(r % 5 == 0 for r in removed)
        assert removed == sorted(removed)
        assert (tmp_path / "threshold_curves.csv").is_file()

    def test_evaluate_matches_run_all_curves(self, smoke_cfg, run_all, tmp_path):
        argv = ["evaluate", "--config", str(smoke_cfg), "--seed", "7", "--out", str(tmp_path),
                "--predictions", str(run_all / "predictions.csv"), "--scores", str(run_all / "scores.csv"),
                "--manifest", str(run_all / "manifest.csv")]
        assert main(argv) == 0
        assert (tmp_path / "selective_curves.csv").read_bytes() == (run_all / "selective_curves.csv").read_bytes()
        assert (tmp_path / "agreement.csv").read_bytes() == (run_all / "agreement.csv").read_bytes()
