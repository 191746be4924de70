"""Gradient-boosted regression trees with second-order (Newton) split gain.

Two objectives are supported: ``logistic`` for binary labels and
``squared_error`` for regression. Split search is exact and greedy over the
sorted unique values of every feature; thresholds sit at midpoints and rows
with ``x < threshold`` go left.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

OBJECTIVES = ("logistic", "squared_error")


@dataclass(frozen=True)
class BoostParams:
    n_rounds: int = 100
    learning_rate: float = 0.1
    max_depth: int = 3
    reg_lambda: float = 1.0
    gamma: float = 0.0
    min_child_weight: float = 1.0
    subsample: float = 1.0
    seed: int = 0
    objective: str = "logistic"

    def __post_init__(self):
        if self.n_rounds < 1:
            raise ValueError("n_rounds must be >= 1")
        if not 0 < self.learning_rate <= 1:
            raise ValueError("learning_rate must lie in (0, 1]")
        if self.max_depth < 0:
            raise ValueError("max_depth must be >= 0")
        if self.reg_lambda < 0 or self.gamma < 0 or self.min_child_weight < 0:
            raise ValueError("reg_lambda, gamma and min_child_weight must be >= 0")
        if not 0 < self.subsample <= 1:
            raise ValueError("subsample must lie in (0, 1]")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")

    def with_(self, **changes) -> "BoostParams":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return asdict(self)


def split_gain(g_left, h_left, g_right, h_right, reg_lambda=1.0, gamma=0.0):
    """Loss reduction of splitting a node into the given children."""
    g = g_left + g_right
    h = h_left + h_right
    return 0.5 * (
        g_left**2 / (h_left + reg_lambda)
        + g_right**2 / (h_right + reg_lambda)
        - g**2 / (h + reg_lambda)
    ) - gamma


def leaf_weight(g, h, reg_lambda=1.0, learning_rate=1.0):
    return -learning_rate * g / (h + reg_lambda)


@dataclass
class Tree:
    """A binary tree in flat preorder arrays; ``left == -1`` marks a leaf."""

    left: np.ndarray
    right: np.ndarray
    feature: np.ndarray
    threshold: np.ndarray
    value: np.ndarray
    cover: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.left)

    def is_leaf(self, node: int) -> bool:
        return self.left[node] < 0

    @property
    def max_depth(self) -> int:
        depth = np.zeros(self.n_nodes, dtype=int)
        for i in range(self.n_nodes):
            if self.left[i] >= 0:
                depth[self.left[i]] = depth[self.right[i]] = depth[i] + 1
        return int(depth.max())

    def used_features(self) -> set[int]:
        return {int(f) for f, l in zip(self.feature, self.left) if l >= 0}

    def predict(self, x: np.ndarray) -> np.ndarray:
        node = np.zeros(x.shape[0], dtype=np.int64)
        rows = np.arange(x.shape[0])
        while True:
            internal = self.left[node] >= 0
            if not internal.any():
                return self.value[node]
            idx = rows[internal]
            cur = node[idx]
            go_left = x[idx, self.feature[cur]] < self.threshold[cur]
            node[idx] = np.where(go_left, self.left[cur], self.right[cur])

    def expected_value(self) -> float:
        """Cover-weighted mean leaf value."""
        leaves = self.left < 0
        return float((self.value[leaves] * self.cover[leaves]).sum() / self.cover[0])

    def to_dict(self, node: int = 0) -> dict:
        if self.left[node] < 0:
            return {"leaf": float(self.value[node]), "cover": float(self.cover[node])}
        return {
            "feature": int(self.feature[node]),
            "threshold": float(self.threshold[node]),
            "cover": float(self.cover[node]),
            "children": [self.to_dict(int(self.left[node])), self.to_dict(int(self.right[node]))],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "Tree":
        cols: dict[str, list] = {k: [] for k in ("left", "right", "feature", "threshold", "value", "cover")}

        def visit(nd: Mapping) -> int:
            i = len(cols["left"])
            for k in cols:
                cols[k].append(0)
            cols["cover"][i] = float(nd["cover"])
            if "leaf" in nd:
                cols["left"][i] = cols["right"][i] = -1
                cols["feature"][i] = -1
                cols["threshold"][i] = 0.0
                cols["value"][i] = float(nd["leaf"])
            else:
                cols["feature"][i] = int(nd["feature"])
                cols["threshold"][i] = float(nd["threshold"])
                cols["value"][i] = 0.0
                left_child, right_child = nd["children"]
                cols["left"][i] = visit(left_child)
                cols["right"][i] = visit(right_child)
            return i

        visit(data)
        return cls(
            left=np.array(cols["left"], dtype=np.int64),
            right=np.array(cols["right"], dtype=np.int64),
            feature=np.array(cols["feature"], dtype=np.int64),
            threshold=np.array(cols["threshold"], dtype=float),
            value=np.array(cols["value"], dtype=float),
            cover=np.array(cols["cover"], dtype=float),
        )

    @classmethod
    def leaf(cls, value: float, cover: float = 1.0) -> "Tree":
        return cls(
            np.array([-1]), np.array([-1]), np.array([-1]),
            np.array([0.0]), np.array([float(value)]), np.array([float(cover)]),
        )


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=float)))


@dataclass
class TreeEnsemble:
    trees: list[Tree]
    base_score: float
    objective: str
    feature_names: tuple[str, ...]
    params: dict = field(default_factory=dict)

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def truncated(self, n_trees: int) -> "TreeEnsemble":
        return TreeEnsemble(self.trees[:n_trees], self.base_score, self.objective,
                            self.feature_names, dict(self.params))

    def _matrix(self, x) -> np.ndarray:
        if hasattr(x, "names") and hasattr(x, "values"):
            missing = [f for f in self.feature_names if f not in x.names]
            if missing:
                raise KeyError(f"missing feature columns {missing}")
            cols = [x.names.index(f) for f in self.feature_names]
            return np.asarray(x.values, dtype=float)[:, cols]
        if isinstance(x, Mapping):
            missing = [f for f in self.feature_names if f not in x]
            if missing:
                raise KeyError(f"missing feature columns {missing}")
            return np.array([[float(x[f]) for f in self.feature_names]])
        arr = np.asarray(x, dtype=float)
        if arr.ndim == 1:
            arr = arr[None, :]
        if arr.shape[1] != self.n_features:
            raise KeyError(f"expected {self.n_features} feature columns, got {arr.shape[1]}")
        return arr

    def predict_margin(self, x) -> np.ndarray:
        arr = self._matrix(x)
        out = np.full(arr.shape[0], self.base_score, dtype=float)
        for tree in self.trees:
            out += tree.predict(arr)
        return out

    def predict_proba(self, x) -> np.ndarray:
        if self.objective != "logistic":
            raise ValueError("predict_proba needs the logistic objective")
        return _sigmoid(self.predict_margin(x))

    def predict(self, x) -> np.ndarray:
        if self.objective == "logistic":
            return (self.predict_proba(x) > 0.5).astype(np.int64)
        return self.predict_margin(x)

    def to_dict(self) -> dict:
        return {
            "objective": self.objective,
            "base_score": float(self.base_score),
            "feature_names": list(self.feature_names),
            "params": dict(self.params),
            "trees": [t.to_dict() for t in self.trees],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: Mapping) -> "TreeEnsemble":
        return cls(
            trees=[Tree.from_dict(t) for t in data["trees"]],
            base_score=float(data["base_score"]),
            objective=data["objective"],
            feature_names=tuple(data["feature_names"]),
            params=dict(data.get("params", {})),
        )

    @classmethod
    def from_json(cls, text: str) -> "TreeEnsemble":
        return cls.from_dict(json.loads(text))


def predict_margin(e: TreeEnsemble, x) -> np.ndarray:
    return e.predict_margin(x)


def predict_proba(e: TreeEnsemble, x) -> np.ndarray:
    return e.predict_proba(x)


def predict(e: TreeEnsemble, x) -> np.ndarray:
    return e.predict(x)


def _gradients(objective: str, margin: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if objective == "logistic":
        p = _sigmoid(margin)
        return p - y, p * (1.0 - p)
    return margin - y, np.ones_like(margin)


def _base_score(objective: str, y: np.ndarray) -> float:
    if objective == "logistic":
        prior = np.clip(y.mean(), 1e-6, 1 - 1e-6)
        return float(np.log(prior / (1.0 - prior)))
    return float(y.mean())


class _ValueIndex:
    """Per-feature distinct values and each row's code into them, offset so all
    features share one code space."""

    def __init__(self, x: np.ndarray):
        n, p = x.shape
        uniques, codes = [], np.empty((n, p), dtype=np.int64)
        offset = 0
        offsets = []
        for j in range(p):
            u, inv = np.unique(x[:, j], return_inverse=True)
            uniques.append(u)
            codes[:, j] = inv + offset
            offsets.append(offset)
            offset += len(u)
        self.codes = codes
        self.values = np.concatenate(uniques)
        self.feature_of = np.repeat(np.arange(p), [len(u) for u in uniques])
        self.size = offset


class _TreeBuilder:
    def __init__(self, x: np.ndarray, g: np.ndarray, h: np.ndarray, params: BoostParams,
                 index: _ValueIndex | None = None):
        self.x, self.g, self.h, self.p = x, g, h, params
        self.index = index or _ValueIndex(x)
        self.nodes: list[list] = []  # [left, right, feature, threshold, value, cover]

    def _best_split(self, rows: np.ndarray, g_sum: float, h_sum: float):
        # Exact greedy: candidate splits lie between consecutive distinct values
        # present in the node, so summing g/h per distinct value loses nothing.
        p = self.p
        idx = self.index
        n_feat = self.x.shape[1]
        codes = idx.codes[rows].ravel()
        g_code = np.bincount(codes, weights=np.repeat(self.g[rows], n_feat), minlength=idx.size)
        h_code = np.bincount(codes, weights=np.repeat(self.h[rows], n_feat), minlength=idx.size)
        present = np.flatnonzero(np.bincount(codes, minlength=idx.size))
        feat = idx.feature_of[present]
        # boundary k separates present[k] and present[k + 1] of the same feature
        same = feat[:-1] == feat[1:]
        if not same.any():
            return None
        starts = np.flatnonzero(np.r_[True, ~same])
        seg_len = np.diff(np.r_[starts, len(present)])
        g_cum = np.cumsum(g_code[present])
        h_cum = np.cumsum(h_code[present])
        g_base = np.repeat(np.r_[0.0, g_cum[starts[1:] - 1]], seg_len)
        h_base = np.repeat(np.r_[0.0, h_cum[starts[1:] - 1]], seg_len)
        g_left = (g_cum - g_base)[:-1]
        h_left = (h_cum - h_base)[:-1]
        g_right = g_sum - g_left
        h_right = h_sum - h_left
        valid = same & (h_left >= p.min_child_weight) & (h_right >= p.min_child_weight)
        if not valid.any():
            return None
        gain = np.where(valid, split_gain(g_left, h_left, g_right, h_right, p.reg_lambda, p.gamma), -np.inf)
        # boundaries are ordered by (feature, value): argmax takes the lowest of each on ties
        best = int(np.argmax(gain))
        if not gain[best] > 0:
            return None
        lo, hi = idx.values[present[best]], idx.values[present[best + 1]]
        return int(feat[best]), float(lo + (hi - lo) / 2.0)

    def build(self, rows: np.ndarray, depth: int) -> int:
        g_sum = float(self.g[rows].sum())
        h_sum = float(self.h[rows].sum())
        idx = len(self.nodes)
        self.nodes.append([-1, -1, -1, 0.0, 0.0, h_sum])
        split = None
        if depth < self.p.max_depth and len(rows) > 1:
            split = self._best_split(rows, g_sum, h_sum)
        if split is None:
            self.nodes[idx][4] = float(leaf_weight(g_sum, h_sum, self.p.reg_lambda, self.p.learning_rate))
            return idx
        feat, threshold = split
        go_left = self.x[rows, feat] < threshold
        left = self.build(rows[go_left], depth + 1)
        right = self.build(rows[~go_left], depth + 1)
        self.nodes[idx][:4] = [left, right, feat, threshold]
        # recompute from children so parent cover is their exact sum
        self.nodes[idx][5] = self.nodes[left][5] + self.nodes[right][5]
        return idx

    def tree(self) -> Tree:
        cols = list(zip(*self.nodes))
        return Tree(
            left=np.array(cols[0], dtype=np.int64),
            right=np.array(cols[1], dtype=np.int64),
            feature=np.array(cols[2], dtype=np.int64),
            threshold=np.array(cols[3], dtype=float),
            value=np.array(cols[4], dtype=float),
            cover=np.array(cols[5], dtype=float),
        )


def fit(x, y: Sequence[float], params: BoostParams | None = None, feature_names: Sequence[str] | None = None) -> TreeEnsemble:
    """Fit a boosted ensemble.

    ``x`` may be a FeatureMatrix (its column names are kept) or an array.
    """
    params = params or BoostParams()
    if hasattr(x, "names") and hasattr(x, "values"):
        feature_names = tuple(x.names)
        x = x.values
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ValueError("x must be 2-D with one row per target")
    if x.shape[0] < 2:
        raise ValueError("need at least 2 rows")
    if np.isnan(x).any():
        raise ValueError("NaN in feature matrix")
    if params.objective == "logistic" and not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("logistic objective needs 0/1 labels")
    if feature_names is None:
        feature_names = tuple(f"f{j}" for j in range(x.shape[1]))
    feature_names = tuple(feature_names)

    n = x.shape[0]
    rng = np.random.default_rng(params.seed)
    base = _base_score(params.objective, y)
    margin = np.full(n, base)
    trees: list[Tree] = []
    all_rows = np.arange(n)
    n_sub = max(1, int(round(params.subsample * n)))
    index = _ValueIndex(x)
    for _ in range(params.n_rounds):
        g, h = _gradients(params.objective, margin, y)
        rows = all_rows if n_sub == n else np.sort(rng.choice(n, size=n_sub, replace=False))
        builder = _TreeBuilder(x, g, h, params, index)
        builder.build(rows, 0)
        tree = builder.tree()
        trees.append(tree)
        margin = margin + tree.predict(x)
    return TreeEnsemble(trees, base, params.objective, feature_names, params.to_dict())


def training_loss(e: TreeEnsemble, x, y) -> float:
    y = np.asarray(y, dtype=float)
    m = e.predict_margin(x)
    if e.objective == "logistic":
        return float(np.mean(np.logaddexp(0.0, m) - y * m))
    return float(np.mean(0.5 * (m - y) ** 2))
