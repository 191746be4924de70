import csv
import io
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from moralmusic.boosting import BoostParams
from moralmusic.dataset import TARGETS, encode_features, median_split_labels
from moralmusic.experiments import (
    CellResult,
    ExperimentError,
    ExperimentResult,
    ExperimentSpec,
    auroc,
    build_tables,
    cross_validate,
    fold_assignments,
    format_cell,
    grid_search,
    mae,
    report,
    results_from_json,
    run_experiment,
    run_grid,
    split_indices,
    weighted_auroc,
)
from moralmusic.factors import fit_factor_model


def pairwise_auroc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p in pos for q in neg)
    return total / (len(pos) * len(neg))


FAST = BoostParams(n_rounds=10)


class TestMetrics:
    def test_frozen_auroc(self):
        assert auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75

    def test_perfect_and_inverted(self):
        assert auroc([1, 2, 3, 4], [0, 0, 1, 1]) == 1.0
        assert auroc([4, 3, 2, 1], [0, 0, 1, 1]) == 0.0
        assert auroc([5, 5, 5, 5], [0, 1, 0, 1]) == 0.5

    def test_single_class(self):
        with pytest.raises(ValueError):
            auroc([0.1, 0.2], [1, 1])

    @settings(max_examples=300, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 1)), min_size=2, max_size=60))
    def test_against_pairwise_oracle(self, pairs):
        s, y = zip(*pairs)
        if len(set(y)) < 2:
            return
        assert auroc(s, y) == pytest.approx(pairwise_auroc(s, y), abs=1e-12)
        assert weighted_auroc(np.array(s, float), y) == pytest.approx(auroc(s, y), abs=1e-12)

    def test_multiclass_weighted(self, rng):
        y = rng.integers(0, 3, 90)
        s = rng.random((90, 3))
        expected = sum((y == k).sum() * pairwise_auroc(s[:, k], (y == k).astype(int)) for k in range(3)) / 90
        assert weighted_auroc(s, y) == pytest.approx(expected, abs=1e-12)
        with pytest.raises(ValueError):
            weighted_auroc(s[:, 0], y)

    def test_mae(self):
        assert mae([1, 2, 3], [2, 2, 5]) == pytest.approx(1.0)
        with pytest.raises(ValueError):
            mae([], [])
        with pytest.raises(ValueError):
            mae([1], [1, 2])

    def test_median_baseline_minimizes_mae(self, rng):
        y = rng.exponential(size=101)
        med = mae(np.full(101, np.median(y)), y)
        for c in np.linspace(y.min(), y.max(), 50):
            assert med <= mae(np.full(101, c), y) + 1e-12


class TestFolds:
    @settings(max_examples=100, deadline=None)
    @given(st.integers(10, 200), st.integers(2, 10), st.floats(0.05, 0.95), st.integers(0, 1000))
    def test_stratified_balance(self, n, k, frac, seed):
        if n < k:
            return
        y = (np.arange(n) < frac * n).astype(int)
        folds = fold_assignments(y, k, seed, stratify=True)
        sizes = np.bincount(folds, minlength=k)
        assert sizes.max() - sizes.min() <= 1
        for c in (0, 1):
            counts = np.bincount(folds[y == c], minlength=k)
            share = (y == c).sum() / k
            assert np.all(np.abs(counts - share) <= 1)

    def test_each_row_tested_once(self):
        y = np.arange(23) % 2
        spec = ExperimentSpec.from_id("EX1", folds=4)
        tests = np.concatenate([te for _, te in split_indices(y, spec)])
        assert sorted(tests.tolist()) == list(range(23))
        for tr, te in split_indices(y, spec):
            assert not set(tr) & set(te)

    def test_shuffle_split(self):
        y = np.arange(100) % 2
        spec = ExperimentSpec.from_id("EX1", split_mode="shuffle_split", folds=3, test_size=0.3)
        splits = split_indices(y, spec)
        assert len(splits) == 3
        for tr, te in splits:
            assert len(te) == 30 and len(tr) == 70
            assert y[te].sum() == 15

    def test_too_few_rows(self):
        with pytest.raises(ExperimentError):
            fold_assignments([0, 1, 0], 5, 0, True)


class TestSpec:
    def test_aliases_and_objective(self):
        s = ExperimentSpec.from_id("ex3", task="reg")
        assert s.task == "regression" and s.metric == "mae"
        assert s.boost_params.objective == "squared_error"
        assert ExperimentSpec.from_dict(json.loads(json.dumps(s.to_dict()))) == s

    @pytest.mark.parametrize("kwargs", [
        dict(task="ranking"), dict(folds=1), dict(split_mode="loo"), dict(test_size=1.0), dict(targets=("joy",)),
    ])
    def test_validation(self, kwargs):
        with pytest.raises(ValueError):
            ExperimentSpec.from_id("EX1", **kwargs)

    def test_unknown_id(self):
        with pytest.raises(KeyError):
            ExperimentSpec.from_id("EX9")


def test_format_cell():
    assert format_cell(0.5712, 0.037, "weighted_auroc") == ".57 (3.7)"
    assert format_cell(1.234, 0.0123, "mae") == "1.23 (1.2)"


def test_cell_std_is_population():
    c = CellResult("care", (0.5, 0.7))
    assert c.mean == pytest.approx(0.6)
    assert c.std == pytest.approx(0.1)


def test_permuted_labels_are_chance(small_synth, rng):
    d, _ = small_synth
    x = encode_features(d, "EX1")
    y = median_split_labels(d, "purity").labels
    spec = ExperimentSpec.from_id("EX1", boost_params=BoostParams(n_rounds=20))
    real = cross_validate(x, y, spec).mean
    shuffled = cross_validate(x, rng.permutation(y), spec).mean
    assert 0.4 <= shuffled <= 0.6
    assert real > shuffled + 0.15


def test_run_experiment_and_tables(small_synth):
    d, _ = small_synth
    fm = fit_factor_model(encode_features(d, "EX1"), 5)
    results = run_grid(d, fm, tasks=("classification",), boost_params=FAST, folds=3)
    assert [r.spec.id for r in results] == ["EX1", "EX2", "EX3", "EX4", "EX5", "EX6"]
    tables = build_tables(results)
    assert [t.shape for t in tables] == [(7, 3), (7, 4)]
    for r in results:
        assert [c.target for c in r.cells] == list(TARGETS)
        assert all(0 <= v <= 1 for c in r.cells for v in c.folds)
    assert results[1].feature_names == tuple(f"factor_{i}" for i in range(1, 6))


def test_report_formats_round_trip(small_synth):
    d, _ = small_synth
    results = [run_experiment(d, ExperimentSpec.from_id("EX1", task=t, boost_params=FAST, folds=3))
               for t in ("classification", "regression")]
    text = report(results, "json")
    back = results_from_json(text)
    assert report(back, "json") == text
    rows = list(csv.DictReader(io.StringIO(report(results, "csv"))))
    assert len(rows) == 14
    md = report(results, "markdown")
    assert "| Care |" in md and "Regression (MAE)" in md
    with pytest.raises(ValueError):
        report(results, "xml")
    for c in results[1].cells:
        assert len(c.baseline) == 3


def test_missing_factor_model(small_synth):
    with pytest.raises(ExperimentError):
        run_experiment(small_synth[0], ExperimentSpec.from_id("EX2"))


def test_error_names_target(small_synth):
    d, _ = small_synth
    tiny = d.subset([i < 6 for i in range(len(d))], {"step": "head"})
    with pytest.raises(ExperimentError, match="target care"):
        run_experiment(tiny, ExperimentSpec.from_id("EX1", folds=5, boost_params=FAST))


def test_grid_search_picks_best(small_synth):
    d, _ = small_synth
    x = encode_features(d, "EX1")
    y = median_split_labels(d, "loyalty").labels
    spec = ExperimentSpec.from_id("EX1", folds=3, boost_params=FAST)
    best, trials = grid_search(x, y, spec, {"max_depth": [1, 2], "learning_rate": [0.1, 0.3]})
    assert len(trials) == 4
    top = max(trials, key=lambda t: t[1])[0]
    assert best.max_depth == top["max_depth"] and best.learning_rate == top["learning_rate"]


def test_result_round_trip(small_synth):
    d, _ = small_synth
    r = run_experiment(d, ExperimentSpec.from_id("EX4", boost_params=FAST, folds=3, targets=("care",)))
    back = ExperimentResult.from_dict(json.loads(json.dumps(r.to_dict())))
    assert back.to_dict() == r.to_dict()
    assert r.to_dict()["provenance"]["dataset_hash"] == d.content_hash()


def test_agrees_with_sklearn(rng):
    metrics = pytest.importorskip("sklearn.metrics")
    for _ in range(50):
        y = rng.integers(0, 2, 80)
        s = rng.integers(0, 10, 80)
        assert auroc(s, y) == pytest.approx(metrics.roc_auc_score(y, s), abs=1e-12)
    y = rng.integers(0, 3, 120)
    s = rng.dirichlet(np.ones(3), 120)
    expected = metrics.roc_auc_score(y, s, multi_class="ovr", average="weighted")
    assert weighted_auroc(s, y) == pytest.approx(expected, abs=1e-12)
