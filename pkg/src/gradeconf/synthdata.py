"""Synthetic ordinal bags, simulated double review, and stratified splitting.

Tiles of grade ``g`` are isotropic Gaussians centred at ``g * delta * u + o_g``
where ``u`` is a unit "severity" direction and ``o_g`` a grade-specific offset
orthogonal to it. A bag labelled ``g`` holds at least ``ceil(rho * T)`` tiles
of grade ``g``; the rest come from lower grades, never higher ones, so the
label is the most severe grade present.

Ambiguity is injected per bag. With probability ``alpha`` a bag of grade
``g > 0`` is a boundary bag; it draws a replacement rate
``q ~ U(BOUNDARY_RATE_MIN, 1)`` and each of its grade-``g`` tiles is, with
probability ``q``, centred on the midpoint of the grade ``g`` and ``g - 1``
means instead. Such a bag sits between two grades. The realised fraction of
replaced tiles is the bag's ``difficulty``. ``tile_grades`` records replaced
tiles as ``g - 0.5``.

All random draws for a bag come from its own stream and are consumed in a
fixed order whatever ``alpha`` is, so raising ``alpha`` with the same seed
only ever turns more bags into boundary bags.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .model import Bag, write_bag
from .numerics import STREAM_DATA, STREAM_RATERS, STREAM_SPLIT, ContractError, RandomStream


BOUNDARY_RATE_MIN = 0.9


@dataclass
class GeneratorConfig:
    n_classes: int = 4
    feature_dim: int = 64
    tiles_min: int = 30
    tiles_max: int = 60
    bags_per_class: int = 100
    separation: float = 1.0
    tile_noise: float = 1.5
    offset_scale: float = 0.5
    lesion_fraction: float = 0.8
    ambiguity: float = 0.35
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_classes < 2 or self.feature_dim < 2:
            raise ContractError("need n_classes >= 2 and feature_dim >= 2")
        if self.separation <= 0 or self.tile_noise <= 0:
            raise ContractError("separation and tile_noise must be positive")
        if not 0 < self.lesion_fraction <= 1:
            raise ContractError("lesion_fraction must lie in (0, 1]")
        if not 0 <= self.ambiguity <= 1:
            raise ContractError("ambiguity must lie in [0, 1]")
        if self.tiles_min < 1 or self.tiles_max < self.tiles_min:
            raise ContractError("need 1 <= tiles_min <= tiles_max")
        if self.bags_per_class < 1 or self.offset_scale < 0:
            raise ContractError("bags_per_class >= 1 and offset_scale >= 0 are required")


@dataclass
class RaterConfig:
    boundary_confusion: float = 0.6
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0 <= self.boundary_confusion < 1:
            raise ContractError("boundary_confusion must lie in [0, 1)")


@dataclass
class SyntheticDataset:
    bags: list[Bag]
    difficulty: np.ndarray
    config: GeneratorConfig
    tile_grades: list[np.ndarray] = field(default_factory=list)

    @property
    def labels(self) -> np.ndarray:
        return np.array([b.label for b in self.bags])


def class_means(cfg: GeneratorConfig) -> tuple[np.ndarray, np.ndarray]:
    """Severity direction ``u`` and the ``n_classes x d`` matrix of tile means."""
    stream = RandomStream(cfg.seed, STREAM_DATA, (0,))
    u = stream.normal(size=cfg.feature_dim)
    u /= np.linalg.norm(u)
    offsets = stream.normal(size=(cfg.n_classes, cfg.feature_dim))
    offsets -= np.outer(offsets @ u, u)
    offsets /= np.linalg.norm(offsets, axis=1, keepdims=True)
    offsets *= cfg.offset_scale * cfg.separation
    grades = np.arange(cfg.n_classes)[:, None]
    return u, grades * cfg.separation * u + offsets


def generate(cfg: GeneratorConfig) -> SyntheticDataset:
    u, means = class_means(cfg)
    bags, difficulty, tile_grades = [], [], []
    n_bags = cfg.n_classes * cfg.bags_per_class
    width = len(str(n_bags - 1))
    for i in range(n_bags):
        g = i % cfg.n_classes
        s = RandomStream(cfg.seed, STREAM_DATA, (1, i))
        T = int(s.integers(cfg.tiles_min, cfg.tiles_max + 1))
        frac = s.uniform(cfg.lesion_fraction, 1.0)
        lower = s.integers(0, max(g, 1), size=T)
        is_boundary = s.uniform() < cfg.ambiguity
        rate = s.uniform(BOUNDARY_RATE_MIN, 1.0)
        replace = s.uniform(size=T)
        noise = s.normal(size=(T, cfg.feature_dim)) * cfg.tile_noise

        n_top = T if g == 0 else min(T, max(math.ceil(cfg.lesion_fraction * T), round(frac * T)))
        grades = np.where(np.arange(T) < n_top, g, lower)
        centres = means[grades].copy()
        replaced = np.zeros(T, dtype=bool)
        if g > 0 and is_boundary:
            replaced = (np.arange(T) < n_top) & (replace < rate)
            centres[replaced] = 0.5 * (means[g] + means[g - 1])
        # shuffle tile order so position carries no information
        order = s.permutation(T)
        tiles = (centres + noise)[order]
        bags.append(Bag(tiles, g, f"bag_{i:0{width}d}"))
        tile_grades.append(np.where(replaced, g - 0.5, grades)[order])
        difficulty.append(replaced.sum() / n_top)
    return SyntheticDataset(bags, np.array(difficulty), cfg, tile_grades)


def simulate_raters(ds: SyntheticDataset, rc: RaterConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Two independent reviewers who may slip to an adjacent grade on ambiguous bags.

    A rater reports the true grade, except that with probability
    ``boundary_confusion * difficulty`` they report a neighbouring grade
    (up or down with equal odds, clamped to the valid range).
    """
    n = ds.config.n_classes
    stream = RandomStream(rc.seed, STREAM_RATERS)
    raters = []
    for _ in range(2):
        flip = stream.uniform(size=len(ds.bags))
        up = stream.uniform(size=len(ds.bags)) < 0.5
        labels = ds.labels.copy()
        p = rc.boundary_confusion * ds.difficulty
        moved = (ds.difficulty > 0) & (flip < p)
        labels[moved] = np.clip(labels[moved] + np.where(up[moved], 1, -1), 0, n - 1)
        raters.append(labels)
    return raters[0], raters[1], raters[0] == raters[1]


def stratified_kfold(labels: Sequence[int], k: int = 5, seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """``k`` (train, validation) index pairs with per-class balance across folds.

    Members of each class are shuffled and dealt round-robin; the dealing
    position carries over between classes so fold sizes stay within one.
    """
    labels = np.asarray(labels)
    if k < 2:
        raise ContractError("k must be at least 2")
    classes, counts = np.unique(labels, return_counts=True)
    if np.any(counts < k):
        small = classes[counts < k].tolist()
        raise ContractError(f"classes {small} have fewer than k={k} members")
    stream = RandomStream(seed, STREAM_SPLIT, (k,))
    fold_of = np.empty(len(labels), dtype=int)
    cursor = 0
    for c in classes:
        members = np.flatnonzero(labels == c)
        members = members[stream.permutation(len(members))]
        fold_of[members] = (cursor + np.arange(len(members))) % k
        cursor = (cursor + len(members)) % k
    everything = np.arange(len(labels))
    return [(everything[fold_of != f], everything[fold_of == f]) for f in range(k)]


def stratified_holdout(labels: Sequence[int], fraction: float = 0.15, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Split into (remainder, held_out) keeping ``round(fraction * n_c)`` of each class."""
    labels = np.asarray(labels)
    if not 0 < fraction < 1:
        raise ContractError("fraction must lie in (0, 1)")
    stream = RandomStream(seed, STREAM_SPLIT, (0,))
    held = []
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        take = max(1, round(fraction * len(members)))
        held.extend(members[stream.permutation(len(members))[:take]].tolist())
    held = np.array(sorted(held))
    rest = np.setdiff1d(np.arange(len(labels)), held)
    return rest, held


def write_dataset(
    ds: SyntheticDataset,
    directory,
    raters: Optional[tuple[np.ndarray, np.ndarray, np.ndarray]] = None,
) -> Path:
    """Write one ``.bag`` file per bag plus ``manifest.csv``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for bag in ds.bags:
        write_bag(bag, directory / f"{bag.bag_id}.bag")
    with open(directory / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bag_id", "label", "difficulty", "rater1", "rater2", "agreement"])
        for i, bag in enumerate(ds.bags):
            r1, r2, agree = ("", "", "") if raters is None else (
                int(raters[0][i]), int(raters[1][i]), int(raters[2][i])
            )
            w.writerow([bag.bag_id, bag.label, repr(float(ds.difficulty[i])), r1, r2, agree])
    return directory


def read_manifest(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def config_dict(cfg: GeneratorConfig) -> dict:
    return asdict(cfg)
