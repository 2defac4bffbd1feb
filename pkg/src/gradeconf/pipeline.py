"""End-to-end experiment: data, k-fold ensembles, scoring, evaluation, report.

Protocol, for one master seed:

1. generate the synthetic cohort and simulate two raters;
2. hold out a stratified test split and cut the rest into ``k`` stratified folds;
3. train ``D`` seed variants per fold (one bag per step, early stopping);
4. on the test split, average member outputs within each fold and then across
   folds, draw ``M`` dropout samples from each fold's best-validation member,
   and compute all four confidence scores;
5. evaluate selective curves, the median split with bootstrap intervals, rater
   agreement, adjacency of the top-2 classes, confusion matrices and
   per-class confidence;
6. optionally repeat training with cross-entropy and with the linear cost
   matrix for comparison.

Every random choice derives from the master seed, so reruns produce a
byte-identical ``report.json``.
"""

from __future__ import annotations

import contextlib
import json
import logging
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Optional, Sequence

import numpy as np

from . import __version__
from .config import ExperimentConfig, dump_config
from .confidence import (
    METHODS,
    NORMALIZATION_SCOPE,
    CohortScores,
    deep_ensemble_confidence,
    grade_sensitive_confidence,
    mc_dropout_confidence,
    raw_risk_confidence,
    write_scores_csv,
)
from .evaluation import (
    LabeledPrediction,
    adjacency_rate,
    agreement_analysis,
    confusion_matrix,
    median_split_report,
    npv,
    overall_auc,
    per_class_auc_arrays,
    per_class_confidence,
    selective_curve,
    weighted_accuracy,
    write_agreement_csv,
    write_curves_csv,
    write_stratified_csv,
    write_thresholds_csv,
)
from .losses import CostMatrix
from .model import (
    AttentionMilParameters,
    Bag,
    InferenceCounter,
    forward,
    mc_inference,
    save_checkpoint,
    write_bag,
    train,
)
from .numerics import (
    STREAM_BOOTSTRAP,
    STREAM_DROPOUT,
    STREAM_RANDOM_BASELINE,
    ContractError,
    RandomStream,
    derive_seed,
)
from .synthdata import generate, simulate_raters, stratified_holdout, stratified_kfold

log = logging.getLogger(__name__)

VARIANTS = {"main": 0, "cross_entropy": 1, "linear": 2}


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@contextlib.contextmanager
def stage(name: str, partial: Optional[dict] = None, timings: Optional[dict] = None) -> Iterator[None]:
    """Tag failures with ``name``; optionally record the wall-clock seconds spent."""
    log.info("stage %s", name)
    started = time.perf_counter()
    try:
        yield
    except PipelineError:
        raise
    except Exception as exc:
        if partial is not None:
            partial["failed_stage"] = name
        raise PipelineError(name, exc) from exc
    finally:
        if timings is not None:
            timings[name] = timings.get(name, 0.0) + time.perf_counter() - started


# ---------------------------------------------------------------------------
# training


def make_splits(labels: Sequence[int], cfg: ExperimentConfig) -> tuple[np.ndarray, np.ndarray, list]:
    """Held-out test indices and k (train, validation) folds over the remainder.

    Indices are into ``labels``. The test split never meets any fold.
    """
    labels = np.asarray(labels)
    rest, test = stratified_holdout(labels, cfg.experiment.test_fraction, cfg.seed)
    folds_local = stratified_kfold(labels[rest], cfg.experiment.folds, cfg.seed)
    return rest, test, [(rest[tr], rest[va]) for tr, va in folds_local]


def model_seed(master: int, variant: str, fold: int, member: int) -> int:
    return derive_seed(master, VARIANTS[variant], fold, member)


def _train_one(args):
    train_bags, val_bags, arch, tcfg, fold, member, loss_kind = args
    params, hist = train(train_bags, val_bags, arch, tcfg)
    params.meta.update(fold=fold, member=member, loss=loss_kind)
    return fold, member, params, hist.to_dict()


def train_ensembles(
    bags: Sequence[Bag],
    folds: Sequence[tuple[np.ndarray, np.ndarray]],
    cfg: ExperimentConfig,
    variant: str = "main",
    loss_kind: Optional[str] = None,
    cost_matrix: Optional[CostMatrix] = None,
) -> tuple[list[AttentionMilParameters], list[dict]]:
    """Train ``ensemble_size`` members on each fold; results sorted by (fold, member)."""
    loss_kind = loss_kind or cfg.train.loss
    cm = cost_matrix if cost_matrix is not None else cfg.cost_matrix()
    tasks = []
    for f, (tr, va) in enumerate(folds):
        for m in range(cfg.experiment.ensemble_size):
            tcfg = cfg.train.build(model_seed(cfg.seed, variant, f, m), cm, loss_kind)
            tasks.append(([bags[i] for i in tr], [bags[i] for i in va], cfg.arch, tcfg, f, m, loss_kind))
    if cfg.experiment.jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.experiment.jobs) as pool:
            results = list(pool.map(_train_one, tasks))
    else:
        results = [_train_one(t) for t in tasks]
    results.sort(key=lambda r: (r[0], r[1]))
    models = [r[2] for r in results]
    histories = [{"fold": r[0], "member": r[1], **r[3]} for r in results]
    return models, histories


# ---------------------------------------------------------------------------
# scoring


@dataclass
class ScoreResult:
    predictions: list[LabeledPrediction]
    scores: dict[str, CohortScores]
    forward_passes: dict[str, int]
    passes_per_bag: dict[str, float]
    member_risks: np.ndarray = field(repr=False, default=None)


def _risk(p: AttentionMilParameters, bag: Bag, counter: InferenceCounter, dropout=None) -> np.ndarray:
    out = forward(p, bag, dropout=dropout, counter=counter)[0]
    # cross-entropy models emit logits; negate so that softmax(-risk) == softmax(logits)
    return -out if p.meta.get("loss") == "cross_entropy" else out


def _group_by_fold(models: Sequence[AttentionMilParameters]) -> list[list[AttentionMilParameters]]:
    folds: dict[int, list] = {}
    for p in models:
        folds.setdefault(int(p.meta.get("fold", 0)), []).append(p)
    return [sorted(folds[f], key=lambda p: int(p.meta.get("member", 0))) for f in sorted(folds)]


def designated_member(members: Sequence[AttentionMilParameters]) -> AttentionMilParameters:
    """The member with the lowest validation loss (first on ties)."""
    losses = [float(p.meta.get("best_val_loss", np.inf)) for p in members]
    return members[int(np.argmin(losses))]


def mc_stream(master: int, fold: int, bag_id: str) -> RandomStream:
    return RandomStream(master, STREAM_DROPOUT, (1000 + fold, zlib.crc32(bag_id.encode())))


def score_only(
    models: Sequence[AttentionMilParameters],
    bags: Sequence[Bag],
    methods: Sequence[str] = METHODS,
    seed: int = 0,
    mc_samples: int = 50,
    reduce: str = "mean",
) -> ScoreResult:
    """Predict and score ``bags`` with already trained models.

    Models are grouped by their ``fold`` metadata. The point prediction is
    the member average within each fold, then the fold average. Forward
    passes are counted separately for each method.
    """
    unknown = set(methods) - set(METHODS)
    if unknown:
        raise ContractError(f"unknown confidence methods {sorted(unknown)}")
    if not models or not bags:
        raise ContractError("need at least one model and one bag")
    arch = models[0].arch
    if any(p.arch != arch for p in models):
        raise ContractError("all checkpoints must share one architecture")
    if any(b.tiles.shape[1] != arch.input_dim for b in bags):
        raise ContractError(f"bags must have {arch.input_dim} features per tile")
    if any(b.label >= arch.n_classes for b in bags):
        raise ContractError(f"bag labels must be < {arch.n_classes}")
    groups = _group_by_fold(models)
    if "deep_ensemble" in methods and min(len(g) for g in groups) < 2:
        raise ContractError("deep_ensemble needs at least two members per fold (D >= 2)")

    pred_counter = InferenceCounter()
    # (folds, members, bags, classes)
    member_risks = np.array([[[_risk(p, b, pred_counter) for b in bags] for p in g] for g in groups])
    point = member_risks.mean(axis=1).mean(axis=0)
    ids = [b.bag_id for b in bags]
    risks_by_bag = dict(zip(ids, point))

    scores: dict[str, CohortScores] = {}
    passes: dict[str, int] = {}
    if "grade_sensitive" in methods:
        scores["grade_sensitive"] = grade_sensitive_confidence(risks_by_bag)
        passes["grade_sensitive"] = pred_counter.forward_passes
    if "raw_risk" in methods:
        scores["raw_risk"] = raw_risk_confidence(risks_by_bag)
        passes["raw_risk"] = pred_counter.forward_passes
    if "deep_ensemble" in methods:
        per_bag = {b: member_risks[:, :, i, :] for i, b in enumerate(ids)}
        scores["deep_ensemble"] = deep_ensemble_confidence(per_bag, reduce)
        passes["deep_ensemble"] = pred_counter.forward_passes
    if "mc_dropout" in methods:
        mc_counter = InferenceCounter()
        samples = {}
        chosen = [designated_member(g) for g in groups]
        for i, b in enumerate(bags):
            per_fold = []
            for f, p in enumerate(chosen):
                stream = mc_stream(seed, int(p.meta.get("fold", f)), b.bag_id)
                s = mc_inference(p, b, mc_samples, stream, mc_counter)
                per_fold.append(-s if p.meta.get("loss") == "cross_entropy" else s)
            samples[b.bag_id] = np.array(per_fold)
        scores["mc_dropout"] = mc_dropout_confidence(samples, reduce)
        passes["mc_dropout"] = mc_counter.forward_passes

    preds = []
    for b, r in zip(bags, point):
        preds.append(LabeledPrediction(b.bag_id, b.label, r, {m: scores[m].as_dict()[b.bag_id] for m in scores}))
    n_models = len(models)
    per_bag = {}
    for m, n in passes.items():
        # grade-sensitive / raw risk: passes per bag per model; spread methods: samples per bag per fold
        denom = len(bags) * (n_models if m in ("grade_sensitive", "raw_risk") else len(groups))
        per_bag[m] = n / denom
    return ScoreResult(preds, {m: scores[m] for m in METHODS if m in scores}, passes, per_bag, member_risks)


# ---------------------------------------------------------------------------
# evaluation


def _clean(obj):
    """Convert numpy containers and scalars into plain JSON types."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def basic_metrics(preds: Sequence[LabeledPrediction], cm: CostMatrix) -> dict:
    probs = np.array([p.probs for p in preds])
    truth = np.array([p.true_class for p in preds])
    n = probs.shape[1]
    return {
        "overall_auc": overall_auc(preds),
        "per_class_auc": per_class_auc_arrays(probs, truth),
        "accuracy": float(np.mean([p.predicted_class == p.true_class for p in preds])),
        "weighted_accuracy": weighted_accuracy(preds, cm),
        "npv_carcinoma": npv(preds, {n - 1}),
        "npv_abnormal": npv(preds, set(range(1, n))),
        "adjacency_rate": adjacency_rate(preds),
    }


def evaluate(
    preds: Sequence[LabeledPrediction],
    scores: Mapping[str, CohortScores],
    cfg: ExperimentConfig,
    agreement: Optional[Mapping[str, bool]] = None,
    cost_matrix: Optional[CostMatrix] = None,
    partial: Optional[dict] = None,
    timings: Optional[dict] = None,
) -> dict:
    """All evaluation sections for one set of predictions and confidence scores."""
    e = cfg.experiment
    n_classes = len(preds[0].risk)
    cm = cost_matrix if cost_matrix is not None else cfg.cost_matrix()
    out: dict = {} if partial is None else partial
    with stage("metrics", out, timings):
        out["metrics"] = basic_metrics(preds, cm)
        out["confusion_matrix"] = confusion_matrix(preds, n_classes)
    with stage("selective_curves", out, timings):
        curves = [
            selective_curve(preds, scores[m], e.curve_step, e.random_trials,
                            RandomStream(cfg.seed, STREAM_RANDOM_BASELINE))
            for m in scores
        ]
        out["selective_curves"] = {c.method: c.to_dict() for c in curves}
    with stage("median_split", out, timings):
        splits = median_split_report(preds, scores, e.bootstrap, RandomStream(cfg.seed, STREAM_BOOTSTRAP))
        out["stratified"] = {m: s.to_dict() for m, s in splits.items()}
        by_id = {p.bag_id: p for p in preds}
        out["confusion_by_confidence"] = {
            m: {
                "low": confusion_matrix([by_id[b] for b in s.low_ids], n_classes),
                "high": confusion_matrix([by_id[b] for b in s.high_ids], n_classes),
            }
            for m, s in splits.items()
        }
    with stage("confidence_by_class", out, timings):
        out["confidence_by_class"] = {m: per_class_confidence(preds, scores[m], n_classes) for m in scores}
    if agreement is not None:
        with stage("agreement", out, timings):
            flags = [bool(agreement[p.bag_id]) for p in preds]
            if all(flags) or not any(flags):
                out["agreement"] = {"undefined": "raters agreed on every bag" if all(flags) else "no agreement"}
            else:
                res = []
                for m in scores:
                    lookup = scores[m].as_dict()
                    res.append(agreement_analysis([lookup[p.bag_id] for p in preds], flags, m))
                out["agreement"] = {r.method: r.to_dict() for r in res}
    out["_curves"] = curves
    out["_splits"] = splits
    return out


# ---------------------------------------------------------------------------
# the full experiment


def _variant_summary(models, histories, test_bags, cfg, cm) -> dict:
    res = score_only(models, test_bags, ["grade_sensitive"], cfg.seed, cfg.experiment.mc_samples,
                     cfg.experiment.confidence_reduce)
    curve = selective_curve(res.predictions, res.scores["grade_sensitive"], cfg.experiment.curve_step,
                            cfg.experiment.random_trials, RandomStream(cfg.seed, STREAM_RANDOM_BASELINE))
    return {
        "metrics": basic_metrics(res.predictions, cm),
        "grade_sensitive_curve": curve.to_dict(),
        "training": _history_summary(histories),
    }


def _history_summary(histories: Sequence[dict]) -> list[dict]:
    return [
        {
            "fold": h["fold"], "member": h["member"], "best_epoch": h["best_epoch"],
            "stopped_epoch": h["stopped_epoch"], "best_val_loss": min(h["val_loss"]),
        }
        for h in histories
    ]


def run_experiment(
    cfg: ExperimentConfig, out_dir: Optional[str | Path] = None, timings: Optional[dict] = None
) -> dict:
    """Run the whole protocol; returns the report and writes it under ``out_dir``.

    ``timings``, when given, receives wall-clock seconds per stage. They are
    kept out of the report so that reruns stay byte-identical.
    """
    e = cfg.experiment
    report: dict = {"version": __version__, "config": cfg.to_dict()}
    out_dir = Path(out_dir) if out_dir is not None else None
    try:
        with stage("data", report, timings):
            ds = generate(cfg.generator)
            r1, r2, agree = simulate_raters(ds, cfg.rater)
            rest, test, folds = make_splits(ds.labels, cfg)
            test_bags = [ds.bags[i] for i in test]
            report["dataset"] = {
                "n_bags": len(ds.bags),
                "n_test": len(test),
                "test_ids": [b.bag_id for b in test_bags],
                "class_counts": np.bincount(ds.labels, minlength=cfg.generator.n_classes),
                "test_class_counts": np.bincount(ds.labels[test], minlength=cfg.generator.n_classes),
                "mean_difficulty": float(ds.difficulty.mean()),
                "test_disagreements": int((~agree[test]).sum()),
            }
            if out_dir is not None:
                out_dir.mkdir(parents=True, exist_ok=True)
                _write_manifest(out_dir / "manifest.csv", ds, r1, r2, agree, set(test.tolist()))
                (out_dir / "test").mkdir(exist_ok=True)
                for b in test_bags:
                    write_bag(b, out_dir / "test" / f"{b.bag_id}.bag")

        with stage("train", report, timings):
            cm = cfg.cost_matrix()
            models, histories = train_ensembles(ds.bags, folds, cfg, "main", cfg.train.loss, cm)
            report["training"] = _history_summary(histories)
            report["seeds"] = {
                "master": cfg.seed,
                "models": {f"{h['fold']}/{h['member']}": model_seed(cfg.seed, "main", h["fold"], h["member"])
                           for h in histories},
            }
            if out_dir is not None:
                ck = out_dir / "checkpoints"
                ck.mkdir(exist_ok=True)
                for p in models:
                    save_checkpoint(p, ck / f"fold{p.meta['fold']}_member{p.meta['member']}.npz")

        with stage("score", report, timings):
            res = score_only(models, test_bags, METHODS, cfg.seed, e.mc_samples, e.confidence_reduce)
            report["inference_accounting"] = {"forward_passes": res.forward_passes,
                                              "passes_per_bag": res.passes_per_bag,
                                              "n_models": len(models), "n_folds": e.folds}

        agreement = {ds.bags[i].bag_id: bool(agree[i]) for i in test}
        ev = evaluate(res.predictions, res.scores, cfg, agreement, cm, report, timings)
        curves, splits = ev.pop("_curves"), ev.pop("_splits")
        diff = {ds.bags[i].bag_id: float(ds.difficulty[i]) for i in test}
        raters = {ds.bags[i].bag_id: (int(r1[i]), int(r2[i])) for i in test}
        report["predictions"] = [
            {"bag_id": p.bag_id, "true_class": p.true_class, "predicted_class": p.predicted_class,
             "risk": p.risk, "confidence": p.confidences, "difficulty": diff[p.bag_id],
             "raters": raters[p.bag_id], "agreement": agreement[p.bag_id]}
            for p in res.predictions
        ]
        report["assumptions"] = {
            "normalization": {m: NORMALIZATION_SCOPE[m] for m in METHODS},
            "raw_risk_statistic": "negated minimum risk, min-max normalised over the test cohort",
            "spread_reduction": e.confidence_reduce,
            "mc_model": "best-validation member of each fold",
        }

        comparisons = {}
        if e.compare_cross_entropy:
            with stage("compare_cross_entropy", report, timings):
                ce_models, ce_hist = train_ensembles(ds.bags, folds, cfg, "cross_entropy", "cross_entropy", cm)
                comparisons["cross_entropy"] = _variant_summary(ce_models, ce_hist, test_bags, cfg, cm)
        if e.compare_linear:
            with stage("compare_linear", report, timings):
                lin = cfg.cost_matrix("linear")
                lin_models, lin_hist = train_ensembles(ds.bags, folds, cfg, "linear", "sosr", lin)
                comparisons["linear"] = _variant_summary(lin_models, lin_hist, test_bags, cfg, lin)
        report["comparisons"] = comparisons
        report = _clean(report)
        if out_dir is not None:
            _write_outputs(out_dir, report, res, curves, splits)
        return report
    except PipelineError:
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)
            (out_dir / "partial_report.json").write_text(_dumps(_clean(_strip_private(report))))
        raise


def _strip_private(d: dict) -> dict:
    return {k: v for k, v in d.items() if not k.startswith("_")}


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1, allow_nan=False) + "\n"


def report_json(report: dict) -> str:
    return _dumps(report)


def _write_manifest(path: Path, ds, r1, r2, agree, test_idx: set) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bag_id", "label", "difficulty", "rater1", "rater2", "agreement", "split"])
        for i, b in enumerate(ds.bags):
            w.writerow([b.bag_id, b.label, repr(float(ds.difficulty[i])), int(r1[i]), int(r2[i]),
                        int(agree[i]), "test" if i in test_idx else "train"])


def _write_outputs(out_dir: Path, report: dict, res: ScoreResult, curves, splits) -> None:
    (out_dir / "report.json").write_text(_dumps(report))
    (out_dir / "config.cfg").write_text(dump_config_from_report(report))
    predicted = {p.bag_id: p.predicted_class for p in res.predictions}
    truth = {p.bag_id: p.true_class for p in res.predictions}
    write_scores_csv(out_dir / "scores.csv", list(res.scores.values()), predicted, truth)
    write_predictions_csv(out_dir / "predictions.csv", res.predictions)
    write_curves_csv(out_dir / "selective_curves.csv", curves)
    write_thresholds_csv(out_dir / "threshold_curves.csv", curves)
    write_stratified_csv(out_dir / "stratified.csv", splits)
    if isinstance(report.get("agreement"), dict) and "undefined" not in report["agreement"]:
        from .evaluation import AgreementResult

        write_agreement_csv(out_dir / "agreement.csv",
                            [AgreementResult(**v) for v in report["agreement"].values()])


def dump_config_from_report(report: dict) -> str:
    from .config import SECTIONS, ExperimentConfig

    cfg = report["config"]
    parts = {}
    for name, cls in SECTIONS.items():
        values = dict(cfg[name])
        if "classifier_widths" in values:
            values["classifier_widths"] = tuple(values["classifier_widths"])
        parts[name] = cls(**values)
    return dump_config(ExperimentConfig(**parts))


def write_predictions_csv(path, preds: Sequence[LabeledPrediction]) -> None:
    import csv

    n = len(preds[0].risk)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bag_id", "true_class", "predicted_class", *[f"risk_{k}" for k in range(n)]])
        for p in preds:
            w.writerow([p.bag_id, p.true_class, p.predicted_class, *[repr(float(x)) for x in p.risk]])


def read_predictions_csv(path) -> list[LabeledPrediction]:
    import csv

    preds = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            risk = [float(row[k]) for k in sorted((k for k in row if k.startswith("risk_")),
                                                  key=lambda k: int(k.split("_")[1]))]
            preds.append(LabeledPrediction(row["bag_id"], int(row["true_class"]), np.array(risk)))
    return preds
