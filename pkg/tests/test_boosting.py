import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from moralmusic.boosting import (
    BoostParams,
    Tree,
    TreeEnsemble,
    _gradients,
    fit,
    leaf_weight,
    predict,
    predict_margin,
    predict_proba,
    split_gain,
    training_loss,
)
from moralmusic.dataset import FeatureMatrix


def naive_tree(x, g, h, rows, depth, params):
    """Textbook exact-greedy builder: returns a nested dict like Tree.to_dict."""
    G, H = sum(g[i] for i in rows), sum(h[i] for i in rows)
    best = None
    if depth < params.max_depth and len(rows) > 1:
        for j in range(x.shape[1]):
            vals = sorted({x[i, j] for i in rows})
            for a, b in zip(vals, vals[1:]):
                thr = a + (b - a) / 2
                gl = sum(g[i] for i in rows if x[i, j] < thr)
                hl = sum(h[i] for i in rows if x[i, j] < thr)
                gr, hr = G - gl, H - hl
                if hl < params.min_child_weight or hr < params.min_child_weight:
                    continue
                gain = 0.5 * (gl**2 / (hl + params.reg_lambda) + gr**2 / (hr + params.reg_lambda)
                              - G**2 / (H + params.reg_lambda)) - params.gamma
                if gain > 0 and (best is None or gain > best[0] + 1e-12):
                    best = (gain, j, thr)
    if best is None:
        return {"leaf": -params.learning_rate * G / (H + params.reg_lambda)}
    _, j, thr = best
    left = [i for i in rows if x[i, j] < thr]
    right = [i for i in rows if x[i, j] >= thr]
    return {"feature": j, "threshold": thr,
            "children": [naive_tree(x, g, h, left, depth + 1, params),
                         naive_tree(x, g, h, right, depth + 1, params)]}


def naive_predict(node, row):
    while "leaf" not in node:
        node = node["children"][0 if row[node["feature"]] < node["threshold"] else 1]
    return node["leaf"]


def naive_boost(x, y, params):
    n = len(y)
    if params.objective == "logistic":
        p0 = sum(y) / n
        base = math.log(p0 / (1 - p0))
    else:
        base = sum(y) / n
    margin = [base] * n
    trees = []
    for _ in range(params.n_rounds):
        if params.objective == "logistic":
            p = [1 / (1 + math.exp(-m)) for m in margin]
            g = [pi - yi for pi, yi in zip(p, y)]
            h = [pi * (1 - pi) for pi in p]
        else:
            g = [m - yi for m, yi in zip(margin, y)]
            h = [1.0] * n
        t = naive_tree(x, g, h, list(range(n)), 0, params)
        trees.append(t)
        margin = [m + naive_predict(t, x[i]) for i, m in enumerate(margin)]
    return np.array(margin), trees


def _strip_cover(node):
    if "leaf" in node:
        return {"leaf": node["leaf"]}
    return {"feature": node["feature"], "threshold": node["threshold"],
            "children": [_strip_cover(c) for c in node["children"]]}


def _assert_same_tree(a, b):
    if "leaf" in b:
        assert "leaf" in a
        assert a["leaf"] == pytest.approx(b["leaf"], abs=1e-10)
        return
    assert (a["feature"], a["threshold"]) == (b["feature"], b["threshold"])
    for ca, cb in zip(a["children"], b["children"]):
        _assert_same_tree(ca, cb)


def test_frozen_gain_and_weight():
    assert split_gain(2, 1, -2, 1, reg_lambda=1) == pytest.approx(2.0)
    assert leaf_weight(4, 3, reg_lambda=1, learning_rate=1) == pytest.approx(-1.0)
    assert split_gain(2, 1, -2, 1, reg_lambda=1, gamma=0.5) == pytest.approx(1.5)


@pytest.mark.parametrize("objective", ["logistic", "squared_error"])
def test_matches_naive_builder(objective, rng):
    x = rng.integers(1, 6, (60, 4)).astype(float)
    x[:, 3] = rng.standard_normal(60).round(2)
    y = (x[:, 0] + x[:, 1] + rng.standard_normal(60) > 6).astype(float)
    if objective == "squared_error":
        y = x[:, 0] * 2 - x[:, 2] + rng.standard_normal(60)
    params = BoostParams(n_rounds=6, max_depth=3, learning_rate=0.3, objective=objective)
    e = fit(x, y, params)
    margin, trees = naive_boost(x, list(y), params)
    np.testing.assert_allclose(e.predict_margin(x), margin, atol=1e-10)
    for ours, ref in zip(e.trees, trees):
        _assert_same_tree(_strip_cover(ours.to_dict()), ref)


def test_tie_breaks_to_lowest_feature_and_threshold():
    # columns 0 and 1 are identical, so every candidate ties across features
    x = np.array([[1, 1], [2, 2], [3, 3], [4, 4]], dtype=float)
    y = np.array([0, 0, 1, 1], dtype=float)
    e = fit(x, y, BoostParams(n_rounds=1, max_depth=1, min_child_weight=0))
    assert e.trees[0].feature[0] == 0
    assert e.trees[0].threshold[0] == 2.5
    # symmetric gains: thresholds 1.5 and 3.5 tie, the lower one wins
    x2 = np.array([[1], [2], [3]], dtype=float)
    y2 = np.array([0.0, 5.0, 0.0])
    e2 = fit(x2, y2, BoostParams(n_rounds=1, max_depth=1, objective="squared_error", reg_lambda=0))
    assert e2.trees[0].threshold[0] == 1.5


def test_logistic_gradients_match_finite_differences(rng):
    y = (rng.random(40) < 0.4).astype(float)
    m = rng.standard_normal(40)
    g, h = _gradients("logistic", m, y)
    loss = lambda mm: np.logaddexp(0, mm) - y * mm
    eps = 1e-5
    np.testing.assert_allclose(g, (loss(m + eps) - loss(m - eps)) / (2 * eps), atol=1e-8)
    gp, _ = _gradients("logistic", m + eps, y)
    gm, _ = _gradients("logistic", m - eps, y)
    np.testing.assert_allclose(h, (gp - gm) / (2 * eps), atol=1e-8)


def test_base_score_is_log_odds():
    y = np.array([1, 0, 0, 0, 1, 0, 0, 0], dtype=float)
    e = fit(np.zeros((8, 1)), y, BoostParams(n_rounds=1))
    assert e.base_score == pytest.approx(math.log(0.25 / 0.75))
    assert e.trees[0].n_nodes == 1
    assert e.truncated(0).predict_proba(np.zeros((3, 1))) == pytest.approx(0.25)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4), st.integers(1, 15))
def test_cover_and_additivity(seed, depth, rounds):
    rng = np.random.default_rng(seed)
    x = rng.integers(0, 5, (50, 3)).astype(float)
    y = (rng.random(50) < 0.5).astype(float)
    if y.min() == y.max():
        y[0] = 1 - y[0]
    e = fit(x, y, BoostParams(n_rounds=rounds, max_depth=depth, learning_rate=0.3))
    total = np.full(50, e.base_score)
    for t in e.trees:
        internal = t.left >= 0
        np.testing.assert_allclose(t.cover[internal], t.cover[t.left[internal]] + t.cover[t.right[internal]])
        assert t.max_depth <= depth
        total += t.predict(x)
    np.testing.assert_allclose(e.predict_margin(x), total, atol=1e-12)
    np.testing.assert_allclose(e.truncated(1).predict_margin(x), e.base_score + e.trees[0].predict(x))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_duplicate_feature_never_increases_loss(seed):
    rng = np.random.default_rng(seed)
    x = rng.integers(1, 6, (80, 3)).astype(float)
    y = (x[:, 0] + rng.standard_normal(80) > 3).astype(float)
    params = BoostParams(n_rounds=10, max_depth=3)
    base = training_loss(fit(x, y, params), x, y)
    xd = np.column_stack([x, x[:, 0]])
    assert training_loss(fit(xd, y, params), xd, y) <= base + 1e-12


def test_squared_error_loss_non_increasing(rng):
    x = rng.standard_normal((100, 4))
    y = x[:, 0] ** 2 + rng.standard_normal(100)
    e = fit(x, y, BoostParams(n_rounds=30, objective="squared_error", learning_rate=0.5))
    losses = [training_loss(e.truncated(k), x, y) for k in range(31)]
    assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))


def test_learns_signal(rng):
    x = rng.standard_normal((400, 5))
    y = (x[:, 2] > 0).astype(float)
    e = fit(x, y)
    assert (e.predict(x) == y).mean() > 0.95
    assert e.trees[0].feature[0] == 2


def test_json_round_trip_and_named_inputs(rng):
    x = rng.integers(1, 6, (50, 3)).astype(float)
    y = (x[:, 1] > 3).astype(float)
    fm = FeatureMatrix(("a", "b", "c"), x, ("likert",) * 3, tuple(map(str, range(50))))
    e = fit(fm, y, BoostParams(n_rounds=5))
    back = TreeEnsemble.from_json(e.to_json())
    assert back.to_json() == e.to_json()
    np.testing.assert_array_equal(back.predict_margin(x), e.predict_margin(x))
    row = {"c": 1.0, "b": 5.0, "a": 2.0}
    assert predict_margin(e, row)[0] == e.predict_margin(np.array([[2.0, 5.0, 1.0]]))[0]
    assert predict(e, x).dtype == np.int64
    assert predict_proba(e, x).shape == (50,)
    with pytest.raises(KeyError):
        e.predict_margin({"a": 1.0, "b": 2.0})
    reordered = FeatureMatrix(("c", "a", "b"), x[:, [2, 0, 1]], ("likert",) * 3, fm.row_ids)
    np.testing.assert_array_equal(e.predict_margin(reordered), e.predict_margin(fm))


def test_subsample_is_seeded(rng):
    x = rng.standard_normal((100, 3))
    y = (x[:, 0] > 0).astype(float)
    p = BoostParams(n_rounds=5, subsample=0.5, seed=3)
    assert fit(x, y, p).to_json() == fit(x, y, p).to_json()
    assert fit(x, y, p).to_json() != fit(x, y, p.with_(seed=4)).to_json()


def test_leaf_tree_and_expected_value():
    t = Tree.leaf(0.25, cover=3.0)
    assert t.expected_value() == 0.25
    assert Tree.from_dict(t.to_dict()).to_dict() == t.to_dict()


@pytest.mark.parametrize("kwargs", [
    dict(n_rounds=-1), dict(learning_rate=0), dict(max_depth=-1), dict(reg_lambda=-1),
    dict(subsample=0), dict(subsample=1.5), dict(objective="hinge"),
])
def test_param_validation(kwargs):
    with pytest.raises(ValueError):
        BoostParams(**kwargs)


def test_input_validation():
    with pytest.raises(ValueError):
        fit(np.array([[np.nan], [1.0]]), [0, 1])
    with pytest.raises(ValueError):
        fit(np.array([[0.0], [1.0]]), [0, 2])
    with pytest.raises(ValueError):
        fit(np.array([[0.0]]), [1])
