import csv

import numpy as np
import pytest

from moralmusic.dataset import FOUNDATIONS, GENRE_SLUGS, default_schema
from moralmusic.synth import default_ground_truth, generate


HEADER = list(default_schema().values())


def make_row(rid, age="25-34", gender="Female", education="College Graduate",
             party="Liberal", ratings=None, scores=None, **extra):
    ratings = ratings or {}
    scores = scores or {}
    row = {"id": rid, "age": age, "gender": gender, "education": education, "party": party}
    for g in GENRE_SLUGS:
        v = ratings.get(g, 3)
        row[f"genre_{g}"] = "" if v is None else str(v)
    for f in FOUNDATIONS:
        row[f"mft_{f}"] = str(scores.get(f, 15.0))
    row.update(extra)
    return row


def write_rows(path, rows, header=None):
    header = header or HEADER + sorted({k for r in rows for k in r} - set(HEADER))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=header)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: r.get(k, "") for k in header})
    return path


@pytest.fixture
def rows_csv(tmp_path):
    def _write(rows, header=None, name="survey.csv"):
        return write_rows(tmp_path / name, rows, header)
    return _write


@pytest.fixture(scope="session")
def small_synth():
    d, g = generate(default_ground_truth(seed=11), 400)
    return d, g


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_tree(rng, n_features, max_depth, value_scale=1.0):
    """Random tree with positive covers whose parents equal the sum of children."""
    from moralmusic.boosting import Tree

    def node(depth):
        if depth >= max_depth or (depth > 0 and rng.random() < 0.3):
            return {"leaf": float(rng.normal(0, value_scale)), "cover": float(rng.uniform(0.5, 10))}
        left, right = node(depth + 1), node(depth + 1)
        return {
            "feature": int(rng.integers(n_features)),
            "threshold": float(rng.integers(0, 9) + 0.5),
            "cover": left["cover"] + right["cover"],
            "children": [left, right],
        }

    return Tree.from_dict(node(0))


def random_ensemble(rng, n_features=None, max_depth=None, n_trees=None):
    from moralmusic.boosting import TreeEnsemble

    m = n_features or int(rng.integers(1, 13))
    depth = max_depth or int(rng.integers(1, 5))
    k = n_trees or int(rng.integers(1, 21))
    trees = [random_tree(rng, m, depth) for _ in range(k)]
    return TreeEnsemble(trees, float(rng.normal()), "logistic", tuple(f"x{j}" for j in range(m)))


def random_inputs(rng, m, n):
    # integer grid around the half-integer thresholds, so both branches are hit
    return rng.integers(0, 10, (n, m)).astype(float)
