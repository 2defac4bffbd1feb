"""Metrics and statistics for comparing confidence estimators.

Undefined quantities (an NPV with no predicted negatives, an AUC on a subset
missing a class) are returned as ``None`` and skipped when aggregating; they
are never imputed.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np
from scipy import stats

from .confidence import CohortScores, top2_classes
from .losses import CostMatrix
from .numerics import STREAM_BOOTSTRAP, STREAM_RANDOM_BASELINE, ContractError, RandomStream, softmax

EXACT_MANN_WHITNEY_BELOW = 12


@dataclass
class LabeledPrediction:
    bag_id: str
    true_class: int
    risk: np.ndarray
    confidences: dict[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.risk = np.asarray(self.risk, dtype=np.float64)
        self.true_class = int(self.true_class)

    @property
    def probs(self) -> np.ndarray:
        return softmax(-self.risk)

    @property
    def predicted_class(self) -> int:
        # argmin keeps the lowest index on exact ties
        return int(np.argmin(self.risk))


def _arrays(preds: Sequence[LabeledPrediction]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if len(preds) == 0:
        raise ContractError("no predictions")
    probs = np.array([p.probs for p in preds])
    truth = np.array([p.true_class for p in preds])
    predicted = np.array([p.predicted_class for p in preds])
    return probs, truth, predicted


# ---------------------------------------------------------------------------
# point metrics


def binary_auc(scores, labels) -> float:
    """Mann-Whitney AUC: ``P(pos > neg) + 0.5 * P(tie)`` via average ranks."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ContractError("AUC is undefined unless both classes are present")
    ranks = stats.rankdata(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def per_class_auc_arrays(probs: np.ndarray, truth: np.ndarray) -> list[Optional[float]]:
    out = []
    for k in range(probs.shape[1]):
        pos = truth == k
        out.append(binary_auc(probs[:, k], pos) if 0 < pos.sum() < pos.size else None)
    return out


def overall_auc_arrays(probs: np.ndarray, truth: np.ndarray) -> Optional[float]:
    aucs = per_class_auc_arrays(probs, truth)
    if any(a is None for a in aucs):
        return None
    return float(np.mean(aucs))


def overall_auc(preds: Sequence[LabeledPrediction]) -> float:
    """Unweighted mean of the one-vs-rest AUCs, class ``k`` scored by ``probs[k]``."""
    probs, truth, _ = _arrays(preds)
    missing = sorted(set(range(probs.shape[1])) - set(truth.tolist()))
    if missing:
        raise ContractError(f"overall AUC needs every class; absent: {missing}")
    return overall_auc_arrays(probs, truth)


def npv_arrays(truth: np.ndarray, predicted: np.ndarray, positive: Iterable[int]) -> Optional[float]:
    positive = np.array(sorted(positive))
    neg_pred = ~np.isin(predicted, positive)
    if not neg_pred.any():
        return None
    return float(np.mean(~np.isin(truth[neg_pred], positive)))


def npv(preds: Sequence[LabeledPrediction], positive_set: Iterable[int]) -> Optional[float]:
    """Among bags predicted outside ``positive_set``, the share truly outside it.

    ``None`` when nothing is predicted negative.
    """
    _, truth, predicted = _arrays(preds)
    return npv_arrays(truth, predicted, positive_set)


def weighted_accuracy(preds: Sequence[LabeledPrediction], cm: CostMatrix) -> float:
    _, truth, predicted = _arrays(preds)
    if truth.max() >= cm.n or predicted.max() >= cm.n:
        raise ContractError("class index outside the cost matrix")
    return float(1.0 - cm.entries[truth, predicted].mean())


def confusion_matrix(preds: Sequence[LabeledPrediction], n_classes: Optional[int] = None) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    probs, truth, predicted = _arrays(preds)
    n = n_classes or probs.shape[1]
    cm = np.zeros((n, n), dtype=int)
    np.add.at(cm, (truth, predicted), 1)
    return cm


def adjacency_rate(preds: Sequence[LabeledPrediction]) -> float:
    """Share of bags whose two most probable classes are neighbours."""
    if len(preds) == 0:
        raise ContractError("no predictions")
    return float(np.mean([top2_classes(p.risk)[2] for p in preds]))


# ---------------------------------------------------------------------------
# bootstrap


@dataclass
class Interval:
    point: Optional[float]
    lo: Optional[float]
    hi: Optional[float]
    n_undefined: int = 0
    n_resamples: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def _percentiles(values: Sequence[float], n_total: int) -> tuple[Optional[float], Optional[float]]:
    if len(values) == 0 or len(values) * 2 < n_total:
        return None, None
    lo, hi = np.percentile(np.asarray(values), [2.5, 97.5])
    return float(lo), float(hi)


def bootstrap_ci(
    metric: Callable[[np.ndarray], Optional[float]],
    n: int,
    B: int = 1000,
    stream: Optional[RandomStream] = None,
) -> Interval:
    """Percentile 95% interval of ``metric(indices)`` over ``B`` resamples.

    ``metric`` receives an index array (resample with replacement of
    ``range(n)``) and returns a value or ``None`` when undefined. The point
    estimate is the metric on the original sample. When more than half the
    resamples are undefined the interval is reported as undefined.
    """
    if B < 100:
        raise ContractError("use at least 100 bootstrap resamples")
    if n < 1:
        raise ContractError("nothing to resample")
    stream = stream or RandomStream(0, STREAM_BOOTSTRAP)
    point = metric(np.arange(n))
    values = []
    for _ in range(B):
        v = metric(stream.integers(0, n, size=n))
        if v is not None:
            values.append(v)
    lo, hi = _percentiles(values, B)
    return Interval(point, lo, hi, B - len(values), B)


# ---------------------------------------------------------------------------
# selective prediction


@dataclass
class SelectiveCurve:
    method: str
    removed: list[int]
    retained: list[int]
    auc: list[Optional[float]]
    random_auc: list[Optional[float]]
    random_trials: int
    thresholds: list[dict] = field(default_factory=list)

    def auc_at(self, removed: int) -> Optional[float]:
        return self.auc[self.removed.index(removed)]

    def random_at(self, removed: int) -> Optional[float]:
        return self.random_auc[self.removed.index(removed)]

    def to_dict(self) -> dict:
        return asdict(self)


def _ordered_confidences(preds: Sequence[LabeledPrediction], confidences: CohortScores) -> np.ndarray:
    lookup = confidences.as_dict()
    missing = [p.bag_id for p in preds if p.bag_id not in lookup]
    if missing:
        raise ContractError(f"no {confidences.method} confidence for bags {missing[:5]}")
    return np.array([lookup[p.bag_id] for p in preds])


def selective_curve(
    preds: Sequence[LabeledPrediction],
    confidences: CohortScores,
    step: int,
    random_trials: int = 100,
    stream: Optional[RandomStream] = None,
) -> SelectiveCurve:
    """Overall AUC after discarding the least confident bags, ``step`` at a time.

    Bags are ranked by ascending confidence, ties broken by ``bag_id``. The
    random baseline discards uniformly chosen bags instead and is averaged
    over ``random_trials`` seeded permutations. A point whose remaining
    bags miss a class is recorded as ``None``.
    """
    n = len(preds)
    if step < 1:
        raise ContractError("step must be >= 1")
    if step > n:
        raise ContractError(f"step {step} is larger than the cohort ({n} bags)")
    probs, truth, _ = _arrays(preds)
    conf = _ordered_confidences(preds, confidences)
    ids = [p.bag_id for p in preds]
    order = np.array(sorted(range(n), key=lambda i: (conf[i], ids[i])))
    stream = stream or RandomStream(0, STREAM_RANDOM_BASELINE)
    perms = [stream.child(t).permutation(n) for t in range(random_trials)]

    removed_counts = list(range(0, n, step))
    auc, rand = [], []
    for m in removed_counts:
        keep = order[m:]
        auc.append(overall_auc_arrays(probs[keep], truth[keep]))
        trial_vals = [overall_auc_arrays(probs[p[m:]], truth[p[m:]]) for p in perms]
        trial_vals = [v for v in trial_vals if v is not None]
        rand.append(float(np.mean(trial_vals)) if trial_vals else None)

    thresholds = []
    for t in np.unique(conf):
        keep = conf >= t
        thresholds.append({
            "threshold": float(t),
            "retained_fraction": float(keep.mean()),
            "auc": overall_auc_arrays(probs[keep], truth[keep]),
        })
    return SelectiveCurve(
        confidences.method, removed_counts, [n - m for m in removed_counts], auc, rand, random_trials, thresholds
    )


# ---------------------------------------------------------------------------
# median split


def half_metrics(probs: np.ndarray, truth: np.ndarray, predicted: np.ndarray) -> dict[str, Optional[float]]:
    n = probs.shape[1]
    per_class = per_class_auc_arrays(probs, truth)
    out = {
        "overall_auc": None if any(a is None for a in per_class) else float(np.mean(per_class)),
        "npv_carcinoma": npv_arrays(truth, predicted, {n - 1}),
        "npv_abnormal": npv_arrays(truth, predicted, set(range(1, n))),
        "accuracy": float(np.mean(truth == predicted)),
    }
    for k, a in enumerate(per_class):
        out[f"auc_class_{k}"] = a
    return out


@dataclass
class MethodSplit:
    method: str
    threshold: float
    low_ids: list[str]
    high_ids: list[str]
    low: dict[str, Interval]
    high: dict[str, Interval]
    gap: dict[str, Interval]

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "threshold": self.threshold,
            "n_low": len(self.low_ids),
            "n_high": len(self.high_ids),
            "low_ids": self.low_ids,
            "high_ids": self.high_ids,
            "metrics": {
                name: {"low": self.low[name].to_dict(), "high": self.high[name].to_dict(), "gap": self.gap[name].to_dict()}
                for name in self.low
            },
        }


def median_split(confidences: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Median threshold; bags at or above it are high confidence."""
    conf = np.asarray(confidences, dtype=np.float64)
    threshold = float(np.median(conf))
    high = conf >= threshold
    return threshold, ~high, high


def split_by_method(
    preds: Sequence[LabeledPrediction],
    confidences: CohortScores,
    B: int = 1000,
    stream: Optional[RandomStream] = None,
) -> MethodSplit:
    probs, truth, predicted = _arrays(preds)
    conf = _ordered_confidences(preds, confidences)
    threshold, low, high = median_split(conf)
    if not low.any() or not high.any():
        raise ContractError(f"{confidences.method}: median split leaves an empty half")
    li, hi_ = np.flatnonzero(low), np.flatnonzero(high)
    point_low = half_metrics(probs[li], truth[li], predicted[li])
    point_high = half_metrics(probs[hi_], truth[hi_], predicted[hi_])
    names = list(point_low)

    stream = stream or RandomStream(0, STREAM_BOOTSTRAP)
    draws_low: dict[str, list] = {k: [] for k in names}
    draws_high: dict[str, list] = {k: [] for k in names}
    draws_gap: dict[str, list] = {k: [] for k in names}
    for _ in range(B):
        rl = li[stream.integers(0, len(li), size=len(li))]
        rh = hi_[stream.integers(0, len(hi_), size=len(hi_))]
        ml = half_metrics(probs[rl], truth[rl], predicted[rl])
        mh = half_metrics(probs[rh], truth[rh], predicted[rh])
        for k in names:
            if ml[k] is not None:
                draws_low[k].append(ml[k])
            if mh[k] is not None:
                draws_high[k].append(mh[k])
            if ml[k] is not None and mh[k] is not None:
                draws_gap[k].append(mh[k] - ml[k])

    def interval(point, draws):
        lo, hi = _percentiles(draws, B)
        return Interval(point, lo, hi, B - len(draws), B)

    low_iv, high_iv, gap_iv = {}, {}, {}
    for k in names:
        low_iv[k] = interval(point_low[k], draws_low[k])
        high_iv[k] = interval(point_high[k], draws_high[k])
        g = None if point_low[k] is None or point_high[k] is None else point_high[k] - point_low[k]
        gap_iv[k] = interval(g, draws_gap[k])
    ids = [p.bag_id for p in preds]
    return MethodSplit(
        confidences.method, threshold, [ids[i] for i in li], [ids[i] for i in hi_], low_iv, high_iv, gap_iv
    )


def median_split_report(
    preds: Sequence[LabeledPrediction],
    confidences: Mapping[str, CohortScores],
    B: int = 1000,
    stream: Optional[RandomStream] = None,
) -> dict[str, MethodSplit]:
    """Low/high confidence stratification with bootstrap intervals, per method."""
    n_classes = len(preds[0].risk) if preds else 0
    if len(preds) < 2 * n_classes:
        raise ContractError(f"need at least {2 * n_classes} bags for a median split")
    stream = stream or RandomStream(0, STREAM_BOOTSTRAP)
    return {
        m: split_by_method(preds, cs, B, stream.child(i))
        for i, (m, cs) in enumerate(sorted(confidences.items()))
    }


# ---------------------------------------------------------------------------
# agreement with raters


@dataclass
class AgreementResult:
    method: str
    n_agree: int
    n_disagree: int
    median_agree: float
    median_disagree: float
    u_agree: float
    u_disagree: float
    p_value: float
    test: str

    def to_dict(self) -> dict:
        return asdict(self)


def mann_whitney_u(a, b) -> float:
    """U statistic of sample ``a``: pairs with ``a > b`` plus half the ties."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ranks = stats.rankdata(np.concatenate([a, b]))
    return float(ranks[: a.size].sum() - a.size * (a.size + 1) / 2.0)


def _exact_mann_whitney_p(a: np.ndarray, b: np.ndarray) -> float:
    """Two-sided p-value by enumerating every relabelling of the pooled sample."""
    pooled = np.concatenate([a, b])
    ranks = stats.rankdata(pooled)
    na, n = a.size, pooled.size
    centre = na * (n - na) / 2.0
    observed = abs(ranks[:na].sum() - na * (na + 1) / 2.0 - centre)
    extreme = total = 0
    for combo in itertools.combinations(range(n), na):
        u = ranks[list(combo)].sum() - na * (na + 1) / 2.0
        total += 1
        if abs(u - centre) >= observed - 1e-9:
            extreme += 1
    return extreme / total


def agreement_analysis(confidences, agreement_flags, method: str = "") -> AgreementResult:
    """Compare confidence between bags the raters agreed on and those they did not.

    Two-sided Mann-Whitney test: exact enumeration for fewer than 12 bags,
    otherwise the normal approximation with tie and continuity corrections.
    """
    if isinstance(confidences, CohortScores):
        method = method or confidences.method
        confidences = confidences.values
    conf = np.asarray(confidences, dtype=np.float64)
    flags = np.asarray(agreement_flags).astype(bool)
    if conf.shape != flags.shape:
        raise ContractError("one agreement flag per confidence value is required")
    agree, disagree = conf[flags], conf[~flags]
    if agree.size == 0 or disagree.size == 0:
        raise ContractError("both the agreement and disagreement groups must be non-empty")
    u_a = mann_whitney_u(agree, disagree)
    u_d = agree.size * disagree.size - u_a
    if conf.size < EXACT_MANN_WHITNEY_BELOW:
        p, test = _exact_mann_whitney_p(agree, disagree), "exact"
    else:
        res = stats.mannwhitneyu(agree, disagree, alternative="two-sided", use_continuity=True, method="asymptotic")
        p, test = float(res.pvalue), "normal_approximation"
    return AgreementResult(
        method, int(agree.size), int(disagree.size), float(np.median(agree)), float(np.median(disagree)),
        u_a, u_d, float(p), test,
    )


# ---------------------------------------------------------------------------
# per-class summaries and CSV output


def per_class_confidence(preds: Sequence[LabeledPrediction], confidences: CohortScores, n_classes: int) -> list[dict]:
    conf = _ordered_confidences(preds, confidences)
    truth = np.array([p.true_class for p in preds])
    rows = []
    for k in range(n_classes):
        c = conf[truth == k]
        if c.size == 0:
            rows.append({"class": k, "n": 0, "mean": None, "median": None, "q25": None, "q75": None})
            continue
        q25, med, q75 = np.percentile(c, [25, 50, 75])
        rows.append({"class": k, "n": int(c.size), "mean": float(c.mean()), "median": float(med),
                     "q25": float(q25), "q75": float(q75)})
    return rows


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def write_curves_csv(path, curves: Sequence[SelectiveCurve]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "removed", "retained", "auc", "random_auc"])
        for c in curves:
            for row in zip(c.removed, c.retained, c.auc, c.random_auc):
                w.writerow([c.method, row[0], row[1], _fmt(row[2]), _fmt(row[3])])


def write_thresholds_csv(path, curves: Sequence[SelectiveCurve]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "threshold", "retained_fraction", "auc"])
        for c in curves:
            for t in c.thresholds:
                w.writerow([c.method, _fmt(t["threshold"]), _fmt(t["retained_fraction"]), _fmt(t["auc"])])


def write_stratified_csv(path, splits: Mapping[str, MethodSplit]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "metric", "half", "point", "lo", "hi", "n_undefined"])
        for m, s in splits.items():
            for name in s.low:
                for half, iv in (("low", s.low[name]), ("high", s.high[name]), ("gap", s.gap[name])):
                    w.writerow([m, name, half, _fmt(iv.point), _fmt(iv.lo), _fmt(iv.hi), iv.n_undefined])


def write_agreement_csv(path, results: Sequence[AgreementResult]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "n_agree", "n_disagree", "median_agree", "median_disagree", "u_agree", "u_disagree",
                    "p_value", "test"])
        for r in results:
            w.writerow([r.method, r.n_agree, r.n_disagree, _fmt(r.median_agree), _fmt(r.median_disagree),
                        _fmt(r.u_agree), _fmt(r.u_disagree), _fmt(r.p_value), r.test])
