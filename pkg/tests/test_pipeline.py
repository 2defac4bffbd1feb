import dataclasses
import json

import numpy as np
import pytest

from gradeconf.config import build_config, dump_config
from gradeconf.confidence import METHODS
from gradeconf.model import ArchitectureConfig, init_parameters, load_checkpoint
from gradeconf.numerics import ContractError
from gradeconf.pipeline import (
    PipelineError,
    dump_config_from_report,
    make_splits,
    run_experiment,
    score_only,
    train_ensembles,
)
from gradeconf.synthdata import generate

SMOKE = [
    "experiment.folds=2", "experiment.ensemble_size=2", "experiment.mc_samples=5", "experiment.bootstrap=200",
    "experiment.random_trials=20", "generator.bags_per_class=10", "generator.tiles_min=10",
    "generator.tiles_max=20", "train.epochs=4",
]
SECTIONS = {
    "agreement", "assumptions", "comparisons", "confidence_by_class", "config", "confusion_by_confidence",
    "confusion_matrix", "dataset", "inference_accounting", "metrics", "predictions", "seeds",
    "selective_curves", "stratified", "training", "version",
}


@pytest.fixture(scope="module")
def smoke(tmp_path_factory):
    cfg = build_config(None, SMOKE + ["experiment.compare_linear=true"], seed=7)
    out = tmp_path_factory.mktemp("smoke")
    timings = {}
    report = run_experiment(cfg, out, timings)
    report["_timings"] = timings
    return cfg, out, report


class TestRunExperiment:
    def test_all_sections(self, smoke):
        cfg, out, report = smoke
        assert set(report) - {"_timings"} == SECTIONS
        assert set(report["comparisons"]) == {"cross_entropy", "linear"}
        for m in METHODS:
            assert m in report["selective_curves"] and m in report["stratified"] and m in report["agreement"]
        assert report["dataset"]["n_bags"] == 40
        assert len(report["training"]) == cfg.experiment.folds * cfg.experiment.ensemble_size

    def test_outputs_written(self, smoke):
        _, out, report = smoke
        for name in ("report.json", "config.cfg", "manifest.csv", "scores.csv", "predictions.csv",
                     "selective_curves.csv", "threshold_curves.csv", "stratified.csv", "agreement.csv"):
            assert (out / name).is_file(), name
        assert len(list((out / "checkpoints").glob("*.npz"))) == 4
        assert len(list((out / "test").glob("*.bag"))) == report["dataset"]["n_test"]
        on_disk = json.loads((out / "report.json").read_text())
        assert on_disk == {k: v for k, v in report.items() if k != "_timings"}

    def test_stage_timings(self, smoke):
        timings = smoke[2]["_timings"]
        assert set(timings) == {"data", "train", "score", "metrics", "selective_curves", "median_split",
                                "confidence_by_class", "agreement", "compare_cross_entropy", "compare_linear"}
        assert all(v >= 0 for v in timings.values())

    def test_config_echo(self, smoke):
        cfg, out, report = smoke
        assert dump_config_from_report(report) == dump_config(cfg)
        assert build_config(out / "config.cfg").to_dict() == cfg.to_dict()

    def test_deterministic(self, smoke, tmp_path):
        cfg, out, _ = smoke
        run_experiment(cfg, tmp_path)
        assert (tmp_path / "report.json").read_bytes() == (out / "report.json").read_bytes()
        assert (tmp_path / "scores.csv").read_bytes() == (out / "scores.csv").read_bytes()

    def test_inference_accounting(self, smoke):
        cfg, _, report = smoke
        acc = report["inference_accounting"]
        n_test, e = report["dataset"]["n_test"], cfg.experiment
        assert acc["passes_per_bag"] == {"grade_sensitive": 1.0, "raw_risk": 1.0,
                                         "deep_ensemble": e.ensemble_size, "mc_dropout": e.mc_samples}
        assert acc["forward_passes"]["mc_dropout"] == n_test * e.folds * e.mc_samples

    def test_scores_match_score_only(self, smoke):
        cfg, out, report = smoke
        models = [load_checkpoint(f) for f in sorted((out / "checkpoints").glob("*.npz"))]
        bags = generate(cfg.generator).bags
        test_bags = [b for b in bags if b.bag_id in set(report["dataset"]["test_ids"])]
        res = score_only(models, test_bags, METHODS, cfg.seed, cfg.experiment.mc_samples)
        for p in report["predictions"]:
            for m in METHODS:
                assert res.scores[m].as_dict()[p["bag_id"]] == p["confidence"][m]

    def test_stage_failure_flushes_partial(self, tmp_path):
        cfg = build_config(None, SMOKE + [f"experiment.cost_matrix={tmp_path / 'missing.csv'}"])
        with pytest.raises(PipelineError) as err:
            run_experiment(cfg, tmp_path / "out")
        assert err.value.stage == "train"
        partial = json.loads((tmp_path / "out" / "partial_report.json").read_text())
        assert "dataset" in partial and "metrics" not in partial


def test_separable_data(tmp_path):
    cfg = build_config(None, [
        "experiment.folds=2", "experiment.ensemble_size=2", "experiment.mc_samples=5", "experiment.bootstrap=200",
        "experiment.random_trials=5", "experiment.test_fraction=0.5", "experiment.compare_cross_entropy=false",
        "generator.bags_per_class=24", "generator.tiles_min=10", "generator.tiles_max=20", "generator.ambiguity=0",
        "generator.tile_noise=0.3", "train.epochs=20", "train.learning_rate=1e-3",
    ], seed=1)
    report = run_experiment(cfg)
    assert report["metrics"]["overall_auc"] > 0.95
    for m in METHODS:
        gap = report["stratified"][m]["metrics"]["overall_auc"]["gap"]["point"]
        if gap is not None:  # a half may miss a class entirely
            assert abs(gap) < 0.05, m


class TestSplits:
    def test_test_split_disjoint_from_folds(self):
        cfg = build_config()
        labels = np.repeat(np.arange(4), 100)
        rest, test, folds = make_splits(labels, cfg)
        assert len(test) == 60 and np.bincount(labels[test]).tolist() == [15] * 4
        assert sorted(np.concatenate([va for _, va in folds]).tolist()) == sorted(rest.tolist())
        for tr, va in folds:
            assert not set(test) & (set(tr) | set(va))


@pytest.fixture(scope="module")
def trained():
    cfg = build_config(None, SMOKE + ["train.epochs=1"], seed=3)
    ds = generate(cfg.generator)
    _, test, folds = make_splits(ds.labels, cfg)
    models, _ = train_ensembles(ds.bags, folds, cfg)
    return cfg, models, [ds.bags[i] for i in test]


class TestScoreOnly:
    def test_single_member_rejects_ensemble(self, trained):
        _, models, bags = trained
        one = [p for p in models if p.meta["member"] == 0]
        with pytest.raises(ContractError):
            score_only(one, bags, ["deep_ensemble"])
        assert set(score_only(one, bags, ["grade_sensitive", "mc_dropout"], mc_samples=3).scores) == {
            "grade_sensitive", "mc_dropout"}

    def test_counts(self, trained):
        _, models, bags = trained
        res = score_only(models, bags, ["grade_sensitive"])
        assert res.forward_passes == {"grade_sensitive": len(bags) * len(models)}
        assert res.passes_per_bag == {"grade_sensitive": 1.0}
        res = score_only(models, bags, METHODS, mc_samples=7)
        assert res.passes_per_bag["mc_dropout"] == 7
        assert res.passes_per_bag["deep_ensemble"] == 2

    def test_prediction_is_fold_mean_of_member_mean(self, trained):
        _, models, bags = trained
        res = score_only(models, bags, ["grade_sensitive"])
        np.testing.assert_allclose(res.predictions[0].risk, res.member_risks[:, :, 0].mean(axis=(0, 1)))

    def test_architecture_mismatch(self, trained):
        _, models, bags = trained
        other = init_parameters(dataclasses.replace(models[0].arch, reduction_width=32), 0)
        other.meta.update(fold=0, member=5)
        with pytest.raises(ContractError):
            score_only(models + [other], bags, ["grade_sensitive"])
        foreign = init_parameters(ArchitectureConfig(input_dim=8), 0)
        with pytest.raises(ContractError):
            score_only([foreign], bags, ["grade_sensitive"])

    def test_unknown_method(self, trained):
        _, models, bags = trained
        with pytest.raises(ContractError):
            score_only(models, bags, ["entropy"])
