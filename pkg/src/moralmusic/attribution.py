"""Exact Shapley attributions for tree ensembles.

``tree_shap`` runs the path-dependent TreeSHAP recursion, with node covers
acting as the conditional probabilities of unobserved features. The recursion
visits the same nodes for every row; only the per-row "one fractions" differ,
so all rows are processed together as numpy vectors.

``brute_force_shap`` enumerates every feature subset and exists as an oracle.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from math import factorial

import numpy as np
from scipy.stats import rankdata

from .boosting import Tree, TreeEnsemble

MAX_BRUTE_FORCE_FEATURES = 15


@dataclass(frozen=True)
class ShapAttribution:
    phi: np.ndarray
    base_value: float
    prediction: float


def _check_covers(tree: Tree) -> None:
    internal = tree.left >= 0
    if (tree.cover[internal] <= 0).any():
        raise ValueError("tree has an internal node with zero cover")


def _extend(feats, zeros, ones, pweights, zero_fraction, one_fraction, feature):
    d = len(feats)
    feats.append(feature)
    zeros.append(zero_fraction)
    ones.append(one_fraction)
    n = one_fraction.shape[0]
    pweights.append(np.ones(n) if d == 0 else np.zeros(n))
    for i in range(d - 1, -1, -1):
        pweights[i + 1] = pweights[i + 1] + one_fraction * pweights[i] * (i + 1) / (d + 1)
        pweights[i] = zero_fraction * pweights[i] * (d - i) / (d + 1)


def _unwind(feats, zeros, ones, pweights, path_index):
    d = len(feats) - 1
    one_fraction = ones[path_index]
    zero_fraction = zeros[path_index]
    nonzero = one_fraction != 0
    safe_one = np.where(nonzero, one_fraction, 1.0)
    next_one = pweights[d]
    for i in range(d - 1, -1, -1):
        old = pweights[i]
        hot = next_one * (d + 1) / ((i + 1) * safe_one)
        next_one = old - hot * zero_fraction * (d - i) / (d + 1)
        if zero_fraction != 0:
            cold = old * (d + 1) / (zero_fraction * (d - i))
        else:
            cold = np.zeros_like(old)
        pweights[i] = np.where(nonzero, hot, cold)
    del pweights[d]
    del feats[path_index], zeros[path_index], ones[path_index]


def _unwound_sum(zeros, ones, pweights, path_index):
    d = len(pweights) - 1
    one_fraction = ones[path_index]
    zero_fraction = zeros[path_index]
    nonzero = one_fraction != 0
    safe_one = np.where(nonzero, one_fraction, 1.0)
    next_one = pweights[d]
    hot_total = np.zeros_like(next_one)
    cold_total = np.zeros_like(next_one)
    for i in range(d - 1, -1, -1):
        tmp = next_one / ((i + 1) * safe_one)
        hot_total = hot_total + tmp
        next_one = pweights[i] - tmp * zero_fraction * (d - i)
        if zero_fraction != 0:
            cold_total = cold_total + pweights[i] / (zero_fraction * (d - i))
    return np.where(nonzero, hot_total, cold_total) * (d + 1)


def _tree_shap_rows(tree: Tree, x: np.ndarray, phi: np.ndarray) -> None:
    """Accumulate one tree's Shapley values for every row of ``x`` into ``phi``."""
    _check_covers(tree)
    n = x.shape[0]

    def recurse(node, feats, zeros, ones, pweights, zero_fraction, one_fraction, feature):
        feats, zeros, ones, pweights = list(feats), list(zeros), list(ones), list(pweights)
        _extend(feats, zeros, ones, pweights, zero_fraction, one_fraction, feature)
        if tree.left[node] < 0:
            value = tree.value[node]
            for i in range(1, len(feats)):
                w = _unwound_sum(zeros, ones, pweights, i)
                phi[:, feats[i]] += w * (ones[i] - zeros[i]) * value
            return
        split = int(tree.feature[node])
        left, right = int(tree.left[node]), int(tree.right[node])
        go_left = x[:, split] < tree.threshold[node]
        incoming_zero = 1.0
        incoming_one = np.ones(n)
        if split in feats:
            k = feats.index(split)
            incoming_zero = zeros[k]
            incoming_one = ones[k]
            _unwind(feats, zeros, ones, pweights, k)
        cover = tree.cover[node]
        recurse(left, feats, zeros, ones, pweights,
                tree.cover[left] / cover * incoming_zero, incoming_one * go_left, split)
        recurse(right, feats, zeros, ones, pweights,
                tree.cover[right] / cover * incoming_zero, incoming_one * ~go_left, split)

    recurse(0, [], [], [], [], 1.0, np.ones(n), -1)


def expected_margin(e: TreeEnsemble) -> float:
    return float(e.base_score + sum(t.expected_value() for t in e.trees))


def shap_values(e: TreeEnsemble, x) -> tuple[np.ndarray, float]:
    """Shapley values for every row of ``x`` (n x features) and the base value."""
    arr = e._matrix(x)
    phi = np.zeros(arr.shape)
    for tree in e.trees:
        _tree_shap_rows(tree, arr, phi)
    return phi, expected_margin(e)


def tree_shap(e: TreeEnsemble, x) -> ShapAttribution:
    """Attribution of a single row's margin."""
    arr = e._matrix(x)
    if arr.shape[0] != 1:
        raise ValueError("tree_shap explains a single row; use shap_values for batches")
    phi, base = shap_values(e, arr)
    return ShapAttribution(phi[0], base, float(e.predict_margin(arr)[0]))


_MASK_CACHE: dict[int, np.ndarray] = {}


def _subset_masks(m: int) -> np.ndarray:
    if m not in _MASK_CACHE:
        s = np.arange(2**m)[:, None]
        _MASK_CACHE[m] = ((s >> np.arange(m)) & 1).astype(bool)
    return _MASK_CACHE[m]


def _subset_values(tree: Tree, row: np.ndarray, masks: np.ndarray) -> np.ndarray:
    """Value of every coalition: features in the coalition follow ``row``,
    the rest are averaged over children by cover."""

    def value(node: int) -> np.ndarray:
        if tree.left[node] < 0:
            return np.full(masks.shape[0], tree.value[node])
        f = int(tree.feature[node])
        left, right = int(tree.left[node]), int(tree.right[node])
        v_left, v_right = value(left), value(right)
        followed = v_left if row[f] < tree.threshold[node] else v_right
        averaged = (tree.cover[left] * v_left + tree.cover[right] * v_right) / tree.cover[node]
        return np.where(masks[:, f], followed, averaged)

    return value(0)


def brute_force_shap(e: TreeEnsemble, x) -> np.ndarray:
    """Shapley values by enumerating all 2^M coalitions (test oracle)."""
    row = e._matrix(x)
    if row.shape[0] != 1:
        raise ValueError("brute_force_shap explains a single row")
    row = row[0]
    m = e.n_features
    if m > MAX_BRUTE_FORCE_FEATURES:
        raise ValueError(f"brute force is limited to {MAX_BRUTE_FORCE_FEATURES} features, got {m}")
    masks = _subset_masks(m)
    values = np.full(2**m, float(e.base_score))
    for tree in e.trees:
        values = values + _subset_values(tree, row, masks)

    sizes = masks.sum(axis=1)
    weight = np.array([factorial(s) * factorial(m - s - 1) / factorial(m) for s in range(m)])
    coalitions = np.arange(2**m)
    phi = np.zeros(m)
    for i in range(m):
        bit = 1 << i
        without = coalitions[(coalitions & bit) == 0]
        phi[i] = (weight[sizes[without]] * (values[without | bit] - values[without])).sum()
    return phi


@dataclass(frozen=True)
class GlobalImportance:
    feature_names: tuple[str, ...]
    importance: np.ndarray  # mean |phi| per feature, column order
    direction: np.ndarray  # corr(feature value, phi); 0 when undefined
    phi: np.ndarray
    values: np.ndarray
    row_ids: tuple[str, ...]
    base_value: float

    def ranking(self) -> list[str]:
        order = sorted(range(len(self.feature_names)),
                       key=lambda j: (-self.importance[j], self.feature_names[j]))
        return [self.feature_names[j] for j in order]

    def to_dict(self) -> dict:
        return {
            "base_value": self.base_value,
            "ranking": [
                {
                    "feature": f,
                    "mean_abs_shap": float(self.importance[self.feature_names.index(f)]),
                    "direction": float(self.direction[self.feature_names.index(f)]),
                }
                for f in self.ranking()
            ],
        }


def _direction(values: np.ndarray, phi: np.ndarray) -> float:
    if values.std() == 0 or phi.std() == 0:
        return 0.0
    return float(np.corrcoef(values, phi)[0, 1])


def global_importance(e: TreeEnsemble, x) -> GlobalImportance:
    """Mean absolute SHAP value per feature over the rows of ``x``."""
    arr = e._matrix(x)
    if arr.shape[0] == 0:
        raise ValueError("need at least one row")
    phi, base = shap_values(e, arr)
    importance = np.abs(phi).mean(axis=0)
    direction = np.array([_direction(arr[:, j], phi[:, j]) for j in range(arr.shape[1])])
    ids = tuple(getattr(x, "row_ids", ()) or (str(i) for i in range(arr.shape[0])))
    return GlobalImportance(tuple(e.feature_names), importance, direction, phi, arr, ids, base)


def beeswarm_export(g: GlobalImportance, top_k: int = 10) -> list[dict]:
    """Long-format (feature, respondent, value percentile, phi) records for the
    ``top_k`` most important features."""
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    n = g.values.shape[0]
    records = []
    for name in g.ranking()[:top_k]:
        j = g.feature_names.index(name)
        ranks = rankdata(g.values[:, j])
        pct = (ranks - 1) / (n - 1) if n > 1 else np.full(n, 0.5)
        for i in range(n):
            records.append({
                "feature": name,
                "respondent": g.row_ids[i],
                "value": float(g.values[i, j]),
                "value_percentile": float(pct[i]),
                "shap": float(g.phi[i, j]),
            })
    return records


def shap_matrix_csv(g: GlobalImportance) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["respondent", *g.feature_names])
    for rid, row in zip(g.row_ids, g.phi):
        writer.writerow([rid, *(repr(float(v)) for v in row)])
    return buf.getvalue()


def beeswarm_json(records: list[dict]) -> str:
    return json.dumps(records, indent=1)
