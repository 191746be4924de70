import csv
import io
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from moralmusic.prefspace import (
    UnscorableError,
    correlation_report,
    dataset_gs_scores,
    gs_score,
    preference_profile,
    report_to_csv,
    report_to_json,
    spearman,
    user_centroid,
)


def midranks(values):
    """Pure-python average ranks (1-based) for ties."""
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        for k in range(i, j + 1):
            ranks[order[k]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def spearman_oracle(x, y):
    rx, ry = midranks(list(x)), midranks(list(y))
    mx, my = sum(rx) / len(rx), sum(ry) / len(ry)
    num = sum((a - mx) * (b - my) for a, b in zip(rx, ry))
    den = math.sqrt(sum((a - mx) ** 2 for a in rx) * sum((b - my) ** 2 for b in ry))
    return num / den


E = {"a": np.array([1.0, 0.0]), "b": np.array([0.0, 1.0]), "c": np.array([1.0, 1.0])}


class TestGS:
    def test_two_orthogonal_equal_weights(self):
        assert gs_score({"a": 1, "b": 1}, E) == pytest.approx(math.sqrt(2) / 2, abs=1e-12)

    def test_identical_vectors(self):
        v = {"a": np.array([0.3, 0.4]), "b": np.array([0.6, 0.8])}
        assert gs_score({"a": 2, "b": 5}, v) == pytest.approx(1.0, abs=1e-12)

    def test_single_genre_is_exactly_one(self):
        assert gs_score({"c": 4}, E) == 1.0

    def test_no_rated_genres(self):
        with pytest.raises(UnscorableError):
            gs_score({"a": 0, "b": None}, E)

    def test_zero_vector_excluded_with_warning(self):
        v = dict(E, z=np.zeros(2))
        with pytest.warns(UserWarning, match="zero vector"):
            assert gs_score({"a": 1, "b": 1, "z": 5}, v) == pytest.approx(math.sqrt(2) / 2)

    def test_opposite_vectors_zero_centroid(self):
        v = {"p": np.array([1.0, 0.0]), "q": np.array([-1.0, 0.0])}
        with pytest.raises(UnscorableError):
            gs_score({"p": 1, "q": 1}, v)

    def test_count_weighting_ignores_ratings(self):
        w1 = gs_score({"a": 1, "b": 5}, E, weighting="count")
        w2 = gs_score({"a": 3, "b": 3}, E, weighting="count")
        assert w1 == pytest.approx(w2, abs=1e-15)
        assert gs_score({"a": 1, "b": 5}, E) != pytest.approx(w1)

    def test_explicit_oracle(self):
        w = {"a": 2, "b": 1, "c": 4}
        vs = [E[g] for g in w]
        ws = list(w.values())
        cx = sum(wi * v[0] for wi, v in zip(ws, vs)) / sum(ws)
        cy = sum(wi * v[1] for wi, v in zip(ws, vs)) / sum(ws)
        cos = [(v[0] * cx + v[1] * cy) / (math.hypot(*v) * math.hypot(cx, cy)) for v in vs]
        expected = sum(wi * c for wi, c in zip(ws, cos)) / sum(ws)
        assert gs_score(w, E) == pytest.approx(expected, abs=1e-12)
        np.testing.assert_allclose(user_centroid(w, E), [cx, cy])

    def test_profile(self):
        p = preference_profile({"a": 1, "b": 1, "c": 0}, E)
        assert p.weights == {"a": 1.0, "b": 1.0}
        assert p.gs == pytest.approx(math.sqrt(2) / 2)


vec_strategy = st.lists(st.floats(-1, 1, allow_nan=False), min_size=3, max_size=3)


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.tuples(st.integers(1, 5), vec_strategy), min_size=1, max_size=8),
    st.floats(0.01, 100),
    st.floats(0.1, 10),
)
def test_gs_invariants(items, scale_vec, scale_w):
    vectors = {f"g{i}": np.array(v) for i, (_, v) in enumerate(items)}
    weights = {f"g{i}": w for i, (w, _) in enumerate(items)}
    if any(np.linalg.norm(v) < 1e-3 for v in vectors.values()):
        return
    try:
        base = gs_score(weights, vectors)
    except UnscorableError:
        return
    if np.linalg.norm(user_centroid(weights, vectors)) < 1e-6:
        return
    assert -1.0 <= base <= 1.0
    if len(items) == 1:
        assert base == 1.0
    scaled_v = {g: v * scale_vec for g, v in vectors.items()}
    assert gs_score(weights, scaled_v) == pytest.approx(base, abs=1e-9)
    scaled_w = {g: w * scale_w for g, w in weights.items()}
    assert gs_score(scaled_w, vectors) == pytest.approx(base, abs=1e-9)
    # a rotation of the space leaves every cosine unchanged
    q, _ = np.linalg.qr(np.arange(1.0, 10.0).reshape(3, 3) + np.eye(3))
    rotated = {g: q @ v for g, v in vectors.items()}
    assert gs_score(weights, rotated) == pytest.approx(base, abs=1e-9)


class TestSpearman:
    def test_frozen_small_example(self):
        assert spearman([1, 2, 3, 4], [2, 1, 4, 3]) == pytest.approx(0.6, abs=1e-12)

    def test_monotone(self):
        assert spearman([1, 2, 3, 4, 5], [1, 8, 27, 64, 125]) == 1.0
        assert spearman([1, 2, 3], [3, 2, 1]) == -1.0

    def test_constant_raises(self):
        with pytest.raises(ValueError):
            spearman([1, 1, 1, 1], [1, 2, 3, 4])

    def test_too_short(self):
        with pytest.raises(ValueError):
            spearman([1, 2], [2, 1])

    @settings(max_examples=300, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 6), st.integers(0, 6)), min_size=3, max_size=40))
    def test_against_midrank_oracle(self, pairs):
        x, y = zip(*pairs)
        if len(set(x)) == 1 or len(set(y)) == 1:
            return
        assert spearman(x, y) == pytest.approx(spearman_oracle(x, y), abs=1e-12)
        assert spearman(x, y) == pytest.approx(spearman(y, x), abs=1e-15)

    def test_tie_free_closed_form(self, rng):
        for _ in range(50):
            n = int(rng.integers(3, 60))
            x, y = rng.permutation(n), rng.permutation(n)
            d2 = float(((x - y) ** 2).sum())
            assert spearman(x, y) == pytest.approx(1 - 6 * d2 / (n * (n * n - 1)), abs=1e-12)


class TestReport:
    def test_pairs_and_round_trip(self, small_synth):
        d, g = small_synth
        gs = dataset_gs_scores(d, g.genre_vectors())
        rows = correlation_report(d, ["genres", "foundations", "gs"], gs=gs)
        m = 13 + 5 + 1
        assert len(rows) == m * (m - 1) // 2
        parsed = list(csv.DictReader(io.StringIO(report_to_csv(rows))))
        assert len(parsed) == len(rows)
        for r, p in zip(rows, parsed):
            assert (p["var_a"], p["var_b"]) == (r.var_a, r.var_b)
            assert float(p["rho"]) == r.rho
        assert json.loads(report_to_json(rows))[0]["n"] == len(d)

    def test_matches_oracle_entry(self, small_synth):
        d, _ = small_synth
        rows = correlation_report(d, ["genres", "foundations"])
        row = next(r for r in rows if (r.var_a, r.var_b) == ("christian", "purity"))
        x = d.rating_matrix()[:, 1]
        assert row.rho == pytest.approx(spearman_oracle(x, d.scores("purity")), abs=1e-12)
        assert row.rho > 0.3

    def test_nominal_expansion_and_constant_column(self, small_synth):
        d, _ = small_synth
        rows = correlation_report(d, ["gender", "party"], extra={"flat": np.ones(len(d))})
        names = {r.var_a for r in rows} | {r.var_b for r in rows}
        assert "gender_female" in names and "party_green" in names
        assert all(r.rho is None for r in rows if "flat" in (r.var_a, r.var_b))

    def test_empty_selection(self, small_synth):
        with pytest.raises(ValueError):
            correlation_report(small_synth[0], [])

    def test_gs_group_requires_scores(self, small_synth):
        with pytest.raises(ValueError):
            correlation_report(small_synth[0], ["gs"])


def test_agrees_with_scipy(rng):
    from scipy.stats import spearmanr

    for _ in range(50):
        x = rng.integers(0, 6, 40)
        y = x + rng.integers(-3, 4, 40)
        assert spearman(x, y) == pytest.approx(spearmanr(x, y).statistic, abs=1e-12)
