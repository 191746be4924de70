"""Genre preference space: user centroids, the generalist/specialist score and
Spearman correlation reports."""

from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import dataclass
from itertools import combinations
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .dataset import (
    AGE_BRACKETS,
    EDUCATION_LEVELS,
    FOUNDATIONS,
    GENDERS,
    GENRE_SLUGS,
    PARTIES,
    PARTY_SLUGS,
    SUPERIOR,
    Dataset,
)

WEIGHTINGS = ("rating", "count")


class UnscorableError(ValueError):
    """The respondent has no usable rated genre or a zero centroid."""


@dataclass(frozen=True)
class GenreVector:
    genre: str
    vector: np.ndarray


@dataclass(frozen=True)
class UserPreferenceProfile:
    weights: dict[str, float]
    centroid: np.ndarray
    gs: float


def _prepare(weights: Mapping[str, float], vectors: Mapping[str, np.ndarray], weighting: str):
    if weighting not in WEIGHTINGS:
        raise ValueError(f"weighting must be one of {WEIGHTINGS}")
    names, w, rows = [], [], []
    for genre, value in weights.items():
        if value is None or value == 0:
            continue
        if value < 0:
            raise ValueError(f"negative weight for {genre!r}")
        if genre not in vectors:
            raise KeyError(f"no vector for genre {genre!r}")
        vec = np.asarray(vectors[genre], dtype=float)
        if not np.any(vec):
            warnings.warn(f"genre {genre!r} has a zero vector; excluded", stacklevel=3)
            continue
        names.append(genre)
        w.append(1.0 if weighting == "count" else float(value))
        rows.append(vec)
    if not names:
        raise UnscorableError("no rated genre with a nonzero vector")
    return names, np.array(w), np.vstack(rows)


def user_centroid(
    weights: Mapping[str, float], vectors: Mapping[str, np.ndarray], weighting: str = "rating"
) -> np.ndarray:
    """Weighted mean of the rated genres' vectors."""
    _, w, v = _prepare(weights, vectors, weighting)
    return (w @ v) / w.sum()


def gs_score(
    weights: Mapping[str, float], vectors: Mapping[str, np.ndarray], weighting: str = "rating"
) -> float:
    """Weighted mean cosine between each rated genre vector and the user centroid.

    Near 1 means the user's genres sit close together in preference space
    (specialist); lower values mean they are spread out (generalist).
    With ``weighting="count"`` every rated genre gets weight 1.
    """
    _, w, v = _prepare(weights, vectors, weighting)
    if len(w) == 1:
        # centroid is the vector itself
        return 1.0
    centroid = (w @ v) / w.sum()
    c_norm = np.linalg.norm(centroid)
    if c_norm == 0:
        raise UnscorableError("user centroid is the zero vector")
    cos = (v @ centroid) / (np.linalg.norm(v, axis=1) * c_norm)
    return float(np.clip((w @ cos) / w.sum(), -1.0, 1.0))


def preference_profile(
    weights: Mapping[str, float], vectors: Mapping[str, np.ndarray], weighting: str = "rating"
) -> UserPreferenceProfile:
    return UserPreferenceProfile(
        weights={g: float(x) for g, x in weights.items() if x},
        centroid=user_centroid(weights, vectors, weighting),
        gs=gs_score(weights, vectors, weighting),
    )


def dataset_gs_scores(
    d: Dataset, vectors: Mapping[str, np.ndarray], weighting: str = "rating"
) -> np.ndarray:
    """GS score for every respondent; unrated genres carry zero weight."""
    out = np.empty(len(d))
    for i, r in enumerate(d):
        try:
            out[i] = gs_score(r.rated_genres, vectors, weighting)
        except UnscorableError as exc:
            raise UnscorableError(f"respondent {r.id}: {exc}") from None
    return out


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """Spearman's rho as the Pearson correlation of mid-ranks."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-D and of equal length")
    if len(x) < 3:
        raise ValueError("need at least 3 observations")
    rx, ry = rankdata(x), rankdata(y)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = np.sqrt((rx @ rx) * (ry @ ry))
    if denom == 0:
        raise ValueError("spearman is undefined for a constant vector")
    return float(np.clip((rx @ ry) / denom, -1.0, 1.0))


REPORT_GROUPS = ("genres", "age", "education", "gender", "party", "foundations", "superior", "gs")


def _group_columns(d: Dataset, group: str, gs: np.ndarray | None) -> list[tuple[str, np.ndarray]]:
    if group == "genres":
        ratings = d.rating_matrix()
        return [(slug, ratings[:, j]) for j, slug in enumerate(GENRE_SLUGS)]
    if group == "age":
        return [("age", np.array([AGE_BRACKETS.index(r.age_bracket) + 1 for r in d], float))]
    if group == "education":
        return [("education", np.array([EDUCATION_LEVELS.index(r.education) + 1 for r in d], float))]
    if group == "gender":
        return [(f"gender_{g.lower()}", np.array([r.gender == g for r in d], float)) for g in GENDERS]
    if group == "party":
        return [
            (f"party_{PARTY_SLUGS[p]}", np.array([r.political_party == p for r in d], float))
            for p in PARTIES
        ]
    if group == "foundations":
        return [(f, d.scores(f)) for f in FOUNDATIONS]
    if group == "superior":
        return [(s, d.scores(s)) for s in SUPERIOR]
    if group == "gs":
        if gs is None:
            raise ValueError("group 'gs' requested but no GS scores supplied")
        return [("gs_score", np.asarray(gs, dtype=float))]
    raise KeyError(f"unknown variable group {group!r}")


@dataclass(frozen=True)
class CorrelationRow:
    var_a: str
    var_b: str
    rho: float | None
    n: int


def correlation_report(
    d: Dataset,
    groups: Sequence[str],
    gs: np.ndarray | None = None,
    extra: Mapping[str, np.ndarray] | None = None,
) -> list[CorrelationRow]:
    """Spearman rho for every pair of variables across ``groups``.

    Nominal variables are expanded to indicator columns. Each pair uses the
    rows where both values are present; ``rho`` is None when either side is
    constant on those rows.
    """
    if not groups and not extra:
        raise ValueError("empty variable selection")
    columns: list[tuple[str, np.ndarray]] = []
    for g in groups:
        columns.extend(_group_columns(d, g, gs))
    for name, col in (extra or {}).items():
        columns.append((name, np.asarray(col, dtype=float)))
    seen: set[str] = set()
    unique = []
    for name, col in columns:
        if name not in seen:
            seen.add(name)
            unique.append((name, col))

    rows = []
    for (a, xa), (b, xb) in combinations(unique, 2):
        ok = ~(np.isnan(xa) | np.isnan(xb))
        n = int(ok.sum())
        try:
            rho = spearman(xa[ok], xb[ok])
        except ValueError:
            rho = None
        rows.append(CorrelationRow(a, b, rho, n))
    return rows


def report_to_csv(rows: Sequence[CorrelationRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["var_a", "var_b", "rho", "n"])
    for r in rows:
        writer.writerow([r.var_a, r.var_b, "" if r.rho is None else repr(r.rho), r.n])
    return buf.getvalue()


def report_to_json(rows: Sequence[CorrelationRow]) -> str:
    return json.dumps(
        [{"var_a": r.var_a, "var_b": r.var_b, "rho": r.rho, "n": r.n} for r in rows], indent=1
    )
