import math

import numpy as np
import pytest

from gradeconf.numerics import ContractError
from gradeconf.synthdata import (
    GeneratorConfig,
    RaterConfig,
    SyntheticDataset,
    class_means,
    generate,
    read_manifest,
    simulate_raters,
    stratified_holdout,
    stratified_kfold,
    write_dataset,
)

SMALL = dict(bags_per_class=25, tiles_min=8, tiles_max=16, feature_dim=16)


@pytest.fixture(scope="module")
def ds():
    return generate(GeneratorConfig(seed=11, **SMALL))


class TestGenerator:
    def test_grade_zero_bags_are_pure(self, ds):
        for bag, grades in zip(ds.bags, ds.tile_grades):
            if bag.label == 0:
                assert np.all(grades == 0)

    def test_no_tile_above_label(self, ds):
        for bag, grades in zip(ds.bags, ds.tile_grades):
            assert grades.max() <= bag.label

    def test_lesion_fraction(self):
        cfg = GeneratorConfig(seed=2, ambiguity=0.0, lesion_fraction=0.6, **SMALL)
        d = generate(cfg)
        for bag, grades in zip(d.bags, d.tile_grades):
            T = bag.tiles.shape[0]
            assert np.sum(grades == bag.label) >= math.ceil(0.6 * T)

    def test_lesion_fraction_with_boundary_tiles(self, ds):
        for bag, grades in zip(ds.bags, ds.tile_grades):
            T = bag.tiles.shape[0]
            at_or_boundary = np.isin(grades, [bag.label, bag.label - 0.5])
            assert at_or_boundary.sum() >= math.ceil(ds.config.lesion_fraction * T)

    def test_boundary_tiles_sit_at_midpoint(self):
        cfg = GeneratorConfig(seed=6, ambiguity=1.0, tile_noise=0.05, **SMALL)
        d = generate(cfg)
        _, means = class_means(cfg)
        seen = 0
        for bag, grades in zip(d.bags, d.tile_grades):
            half = grades != np.round(grades)
            g = bag.label
            if half.any():
                mid = 0.5 * (means[g] + means[g - 1])
                assert np.abs(bag.tiles[half] - mid).max() < 0.5
                seen += 1
        assert seen == 75  # every bag above grade 0

    def test_difficulty_is_replaced_fraction(self, ds):
        for bag, grades, diff in zip(ds.bags, ds.tile_grades, ds.difficulty):
            n_replaced = np.sum(grades == bag.label - 0.5)
            n_top = n_replaced + np.sum(grades == bag.label)
            assert diff == pytest.approx(n_replaced / n_top)

    def test_sizes(self, ds):
        assert len(ds.bags) == 100
        assert np.bincount(ds.labels).tolist() == [25] * 4
        for b in ds.bags:
            assert 8 <= b.tiles.shape[0] <= 16 and b.tiles.shape[1] == 16
        assert len({b.bag_id for b in ds.bags}) == 100

    def test_deterministic(self):
        a, b = generate(GeneratorConfig(seed=5, **SMALL)), generate(GeneratorConfig(seed=5, **SMALL))
        for x, y in zip(a.bags, b.bags):
            assert x.bag_id == y.bag_id and x.label == y.label
            assert x.tiles.tobytes() == y.tiles.tobytes()
        np.testing.assert_array_equal(a.difficulty, b.difficulty)

    def test_seed_matters(self):
        a, b = generate(GeneratorConfig(seed=5, **SMALL)), generate(GeneratorConfig(seed=6, **SMALL))
        assert not np.array_equal(a.bags[0].tiles, b.bags[0].tiles)

    def test_zero_ambiguity_means_zero_difficulty(self):
        d = generate(GeneratorConfig(seed=3, ambiguity=0.0, **SMALL))
        np.testing.assert_array_equal(d.difficulty, 0.0)

    def test_difficulty_monotone_in_ambiguity(self):
        prev = None
        for alpha in (0.0, 0.2, 0.5, 0.8, 1.0):
            d = generate(GeneratorConfig(seed=3, ambiguity=alpha, **SMALL)).difficulty
            assert d.min() >= 0 and d.max() <= 1
            if prev is not None:
                assert np.all(d >= prev) and d.mean() >= prev.mean()
            prev = d

    def test_class_means_geometry(self):
        cfg = GeneratorConfig(seed=1, separation=1.5, offset_scale=0.4)
        u, means = class_means(cfg)
        assert np.linalg.norm(u) == pytest.approx(1.0)
        np.testing.assert_allclose(means @ u, 1.5 * np.arange(4), atol=1e-12)
        offsets = means - np.outer(means @ u, u)
        np.testing.assert_allclose(np.linalg.norm(offsets, axis=1), 0.4 * 1.5)

    def test_tile_noise(self):
        cfg = GeneratorConfig(seed=4, ambiguity=0.0, tile_noise=0.7, bags_per_class=5, tiles_min=200,
                              tiles_max=200, feature_dim=32)
        d = generate(cfg)
        _, means = class_means(cfg)
        resid = np.concatenate([b.tiles - means[g.astype(int)] for b, g in zip(d.bags, d.tile_grades) if b.label == 0])
        assert resid.std() == pytest.approx(0.7, rel=0.02)

    def test_linear_probe_separates_easy_data(self):
        from sklearn.linear_model import LogisticRegression
        from sklearn.model_selection import cross_val_score

        d = generate(GeneratorConfig(seed=8, ambiguity=0.0, tile_noise=0.1))
        X = np.array([b.tiles.mean(axis=0) for b in d.bags])
        acc = cross_val_score(LogisticRegression(max_iter=5000), X, d.labels, cv=5).mean()
        assert acc > 0.95

    @pytest.mark.parametrize("kwargs", [
        {"separation": 0.0}, {"tile_noise": -1.0}, {"lesion_fraction": 0.0}, {"lesion_fraction": 1.5},
        {"ambiguity": 1.2}, {"tiles_min": 0}, {"tiles_min": 5, "tiles_max": 4},
    ])
    def test_invalid_config(self, kwargs):
        with pytest.raises(ContractError):
            GeneratorConfig(**kwargs)


class TestRaters:
    def test_no_confusion(self, ds):
        r1, r2, agree = simulate_raters(ds, RaterConfig(boundary_confusion=0.0, seed=1))
        np.testing.assert_array_equal(r1, ds.labels)
        np.testing.assert_array_equal(r2, ds.labels)
        assert agree.all()

    def test_zero_difficulty_always_agrees(self, ds):
        r1, r2, agree = simulate_raters(ds, RaterConfig(boundary_confusion=0.9, seed=1))
        assert agree[ds.difficulty == 0].all()
        np.testing.assert_array_equal(r1[ds.difficulty == 0], ds.labels[ds.difficulty == 0])

    def test_adjacent_and_clamped(self, ds):
        r1, r2, _ = simulate_raters(ds, RaterConfig(boundary_confusion=0.9, seed=2))
        for r in (r1, r2):
            assert np.all(np.abs(r - ds.labels) <= 1)
            assert r.min() >= 0 and r.max() <= 3

    def test_disagreement_rate_matches_flip_model(self):
        cfg = GeneratorConfig(seed=21, ambiguity=1.0, bags_per_class=1500, tiles_min=4, tiles_max=8, feature_dim=2)
        d = generate(cfg)
        _, _, agree = simulate_raters(d, RaterConfig(boundary_confusion=0.5, seed=3))
        inner = np.isin(d.labels, [1, 2])  # no clamping for interior grades
        p = 0.5 * d.difficulty[inner]
        q = 2 * p * (1 - p) + p**2 / 2
        observed = np.sum(~agree[inner])
        sigma = np.sqrt(np.sum(q * (1 - q)))
        assert abs(observed - q.sum()) < 3 * sigma
        assert q.mean() > 0.2

    def test_invalid(self):
        with pytest.raises(ContractError):
            RaterConfig(boundary_confusion=1.0)


class TestSplits:
    def test_two_class_example(self):
        folds = stratified_kfold([0] * 5 + [1] * 5, 5, seed=0)
        for _, val in folds:
            assert sorted(np.array([0] * 5 + [1] * 5)[val].tolist()) == [0, 1]

    def test_partition(self, ds):
        folds = stratified_kfold(ds.labels, 5, seed=3)
        vals = np.concatenate([v for _, v in folds])
        assert sorted(vals.tolist()) == list(range(len(ds.labels)))
        for tr, va in folds:
            assert not set(tr) & set(va)
            assert len(tr) + len(va) == len(ds.labels)

    def test_balance(self):
        labels = np.repeat([0, 1, 2], [13, 7, 22])
        folds = stratified_kfold(labels, 5, seed=1)
        for k in range(3):
            counts = [np.sum(labels[va] == k) for _, va in folds]
            assert max(counts) - min(counts) <= 1
        sizes = [len(va) for _, va in folds]
        assert max(sizes) - min(sizes) <= 1

    def test_deterministic(self, ds):
        a, b = stratified_kfold(ds.labels, 5, 9), stratified_kfold(ds.labels, 5, 9)
        for (ta, va), (tb, vb) in zip(a, b):
            np.testing.assert_array_equal(va, vb)

    def test_class_too_small(self):
        with pytest.raises(ContractError):
            stratified_kfold([0, 0, 0, 1, 1, 1, 1, 1], 4)

    def test_holdout(self, ds):
        rest, held = stratified_holdout(ds.labels, 0.2, seed=1)
        assert not set(rest) & set(held)
        assert len(rest) + len(held) == len(ds.labels)
        assert np.bincount(ds.labels[held]).tolist() == [5] * 4


def test_write_dataset(tmp_path, ds):
    raters = simulate_raters(ds, RaterConfig(seed=1))
    write_dataset(ds, tmp_path, raters)
    rows = read_manifest(tmp_path / "manifest.csv")
    assert list(rows[0]) == ["bag_id", "label", "difficulty", "rater1", "rater2", "agreement"]
    assert len(rows) == len(ds.bags) == len(list(tmp_path.glob("*.bag")))
    assert float(rows[3]["difficulty"]) == ds.difficulty[3]
    assert isinstance(ds, SyntheticDataset)
