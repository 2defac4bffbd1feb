"""Confidence estimators for ordinal risk outputs.

``grade_sensitive``
    Top-2 gap of ``softmax(-risk)``. Needs one forward pass and is computed
    per bag; no cohort normalisation.
``mc_dropout`` / ``deep_ensemble``
    Per-coordinate sample standard deviation of repeated predictions
    (dropout samples or ensemble members), reduced to a scalar, then
    inverted and min-max normalised over the evaluated cohort.
``raw_risk``
    ``-min(risk)``, min-max normalised over the cohort (not inverted: a low
    predicted minimum risk already means confident).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .numerics import ContractError, min_max_invert_normalize, min_max_normalize, sample_std, softmax

METHODS = ("grade_sensitive", "mc_dropout", "deep_ensemble", "raw_risk")
NORMALIZATION_SCOPE = {
    "grade_sensitive": "per_sample",
    "mc_dropout": "cohort",
    "deep_ensemble": "cohort",
    "raw_risk": "cohort",
}


@dataclass
class CohortScores:
    """Confidence values in [0, 1] for every bag of one evaluation set."""

    method: str
    bag_ids: list[str]
    values: np.ndarray
    statistic: Optional[np.ndarray] = None
    stat_min: Optional[float] = None
    stat_max: Optional[float] = None
    normalization: str = "cohort"
    notes: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if len(self.bag_ids) != len(self.values):
            raise ContractError("one confidence value per bag is required")
        if np.any(self.values < 0) or np.any(self.values > 1):
            raise ContractError(f"{self.method}: confidence values must lie in [0, 1]")

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.bag_ids, self.values.tolist()))

    def subset(self, bag_ids: Sequence[str]) -> "CohortScores":
        lookup = self.as_dict()
        return CohortScores(self.method, list(bag_ids), np.array([lookup[b] for b in bag_ids]),
                            normalization=self.normalization)


def grade_sensitive(risk) -> float:
    """Gap between the two largest entries of ``softmax(-risk)``."""
    r = np.asarray(risk, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise ContractError("grade-sensitive confidence needs at least two classes")
    probs = np.sort(softmax(-r))[::-1]
    return float(probs[0] - probs[1])


def top2_classes(risk) -> tuple[int, int, bool]:
    """The two most probable classes under ``softmax(-risk)`` and whether they are neighbours.

    Ties go to the lower class index.
    """
    r = np.asarray(risk, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise ContractError("need at least two classes")
    order = np.argsort(-softmax(-r), kind="stable")
    first, second = int(order[0]), int(order[1])
    return first, second, abs(first - second) == 1


def ensemble_average(predictions: Sequence) -> np.ndarray:
    if len(predictions) == 0:
        raise ContractError("cannot average an empty list of predictions")
    if len({len(np.atleast_1d(p)) for p in predictions}) != 1:
        raise ContractError("predictions must all have the same length")
    return np.asarray(predictions, dtype=np.float64).mean(axis=0)


def dispersion(samples, reduce: str = "mean") -> float:
    """Scalar spread of repeated predictions for one bag.

    ``samples`` is ``(S, n)`` or ``(folds, S, n)``; with a fold axis the
    per-fold statistics are averaged. ``reduce='mean'`` averages the
    per-class standard deviations; ``reduce='predicted'`` keeps only the
    coordinate of the class predicted by the sample mean.
    """
    arr = np.asarray(samples, dtype=np.float64)
    if arr.ndim == 3:
        return float(np.mean([dispersion(a, reduce) for a in arr]))
    if arr.ndim != 2:
        raise ContractError("samples must be (S, n) or (folds, S, n)")
    if arr.shape[0] < 2:
        raise ContractError("at least two samples are needed for a standard deviation")
    std = sample_std(list(arr))
    if reduce == "mean":
        return float(std.mean())
    if reduce == "predicted":
        return float(std[int(np.argmin(arr.mean(axis=0)))])
    raise ContractError(f"unknown reduction {reduce!r}")


def _spread_confidence(method: str, samples_per_bag: Mapping[str, object], reduce: str) -> CohortScores:
    if not samples_per_bag:
        raise ContractError("no bags to score")
    ids = list(samples_per_bag)
    stats = np.array([dispersion(samples_per_bag[b], reduce) for b in ids])
    return CohortScores(
        method, ids, min_max_invert_normalize(stats), stats,
        float(stats.min()), float(stats.max()), "cohort", {"reduce": reduce},
    )


def mc_dropout_confidence(samples_per_bag: Mapping[str, object], reduce: str = "mean") -> CohortScores:
    return _spread_confidence("mc_dropout", samples_per_bag, reduce)


def deep_ensemble_confidence(predictions_per_bag: Mapping[str, object], reduce: str = "mean") -> CohortScores:
    return _spread_confidence("deep_ensemble", predictions_per_bag, reduce)


def raw_risk_confidence(risks_per_bag: Mapping[str, object]) -> CohortScores:
    if not risks_per_bag:
        raise ContractError("no bags to score")
    ids = list(risks_per_bag)
    stats = np.array([-np.min(np.asarray(risks_per_bag[b], dtype=np.float64)) for b in ids])
    return CohortScores("raw_risk", ids, min_max_normalize(stats), stats,
                        float(stats.min()), float(stats.max()), "cohort")


def grade_sensitive_confidence(risks_per_bag: Mapping[str, object]) -> CohortScores:
    if not risks_per_bag:
        raise ContractError("no bags to score")
    ids = list(risks_per_bag)
    return CohortScores("grade_sensitive", ids, np.array([grade_sensitive(risks_per_bag[b]) for b in ids]),
                        normalization="per_sample")


def write_scores_csv(path, scores: Sequence[CohortScores], predicted: Mapping[str, int], truth: Mapping[str, int]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bag_id", "method", "confidence", "predicted_class", "true_class"])
        for cs in scores:
            for b, v in zip(cs.bag_ids, cs.values):
                w.writerow([b, cs.method, repr(float(v)), predicted[b], truth[b]])


def read_scores_csv(path) -> dict[str, CohortScores]:
    rows: dict[str, tuple[list, list]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            ids, vals = rows.setdefault(row["method"], ([], []))
            ids.append(row["bag_id"])
            vals.append(float(row["confidence"]))
    return {
        m: CohortScores(m, ids, np.array(vals), normalization=NORMALIZATION_SCOPE.get(m, "cohort"))
        for m, (ids, vals) in rows.items()
    }
