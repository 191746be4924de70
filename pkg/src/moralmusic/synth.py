"""Synthetic survey generator with a planted factor model and planted moral signal.

Genre ratings come from correlated latent factors plus noise, discretized to a
5-point scale. Foundation scores are a linear function of the standardized
genre ratings, demographics and the (true-loading) GS score, plus noise,
mapped into 0..30.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import (
    AGE_BRACKETS,
    EDUCATION_LEVELS,
    FOUNDATIONS,
    GENRE_SLUGS,
    PARTIES,
    PARTY_SLUGS,
    Dataset,
    Provenance,
    Respondent,
    write_survey,
)
from .prefspace import dataset_gs_scores

# demographic counts of the reference survey sample (after cleaning)
DEFAULT_MARGINALS: dict[str, dict[str, int]] = {
    "age": dict(zip(AGE_BRACKETS, (80, 154, 205, 205, 187, 203))),
    "gender": {"Female": 588, "Male": 474},
    "education": dict(zip(EDUCATION_LEVELS, (35, 195, 154, 115, 349, 205))),
    "party": dict(zip(PARTIES, (328, 279, 184, 66, 56, 149))),
}

# five-factor genre clusters of the reference model, each ordered by decreasing loading
REFERENCE_CLUSTERS: tuple[tuple[str, ...], ...] = (
    ("jazz", "classical", "latin"),
    ("punk", "heavy_metal", "rap"),
    ("pop", "rnb"),
    ("country", "christian", "folk"),
    ("rock", "alternative"),
)

SCORE_CENTER = 15.0
SCORE_SCALE = 3.0
SCORE_RANGE = (0.0, 30.0)


def moral_feature_names() -> tuple[str, ...]:
    parties = tuple(f"party_{PARTY_SLUGS[p]}" for p in PARTIES)
    return GENRE_SLUGS + ("age", "education", "female") + parties + ("gs",)


@dataclass(frozen=True)
class GroundTruth:
    true_loadings: np.ndarray  # 13 x k
    true_phi: np.ndarray  # k x k
    moral_coefficients: dict[str, dict[str, float]]
    noise_sd: float = 0.5
    seed: int = 0
    moral_noise_sd: float = 0.6
    rating_spread: float = 1.2
    missing_rate: float = 0.0
    catch_fail_rate: float = 0.0

    def __post_init__(self):
        loadings = np.asarray(self.true_loadings, dtype=float)
        phi = np.asarray(self.true_phi, dtype=float)
        k = phi.shape[0]
        if loadings.shape != (len(GENRE_SLUGS), k):
            raise ValueError(f"loadings must be {len(GENRE_SLUGS)} x {k}")
        if phi.shape != (k, k) or not np.allclose(phi, phi.T) or not np.allclose(np.diag(phi), 1.0):
            raise ValueError("true_phi must be symmetric with unit diagonal")
        if np.linalg.eigvalsh(phi).min() <= 0:
            raise ValueError("true_phi is not positive definite")
        allowed = set(moral_feature_names())
        for target, coefs in self.moral_coefficients.items():
            if target not in FOUNDATIONS:
                raise ValueError(f"unknown foundation {target!r}")
            bad = set(coefs) - allowed
            if bad:
                raise ValueError(f"unknown moral features {sorted(bad)}")
        object.__setattr__(self, "true_loadings", loadings)
        object.__setattr__(self, "true_phi", phi)

    @property
    def n_factors(self) -> int:
        return self.true_phi.shape[0]

    def genre_vectors(self) -> dict[str, np.ndarray]:
        return {g: self.true_loadings[j] for j, g in enumerate(GENRE_SLUGS)}

    def to_dict(self) -> dict:
        return {
            "true_loadings": self.true_loadings.tolist(),
            "true_phi": self.true_phi.tolist(),
            "moral_coefficients": {
                t: dict(sorted(c.items())) for t, c in sorted(self.moral_coefficients.items())
            },
            "noise_sd": self.noise_sd,
            "seed": self.seed,
            "moral_noise_sd": self.moral_noise_sd,
            "rating_spread": self.rating_spread,
            "missing_rate": self.missing_rate,
            "catch_fail_rate": self.catch_fail_rate,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GroundTruth":
        return cls(**{**data, "true_loadings": np.array(data["true_loadings"]),
                      "true_phi": np.array(data["true_phi"])})


def default_loadings() -> np.ndarray:
    magnitudes = (0.85, 0.8, 0.7)
    loadings = np.zeros((len(GENRE_SLUGS), len(REFERENCE_CLUSTERS)))
    for f, cluster in enumerate(REFERENCE_CLUSTERS):
        for genre, value in zip(cluster, magnitudes):
            loadings[GENRE_SLUGS.index(genre), f] = value
    return loadings


def default_phi() -> np.ndarray:
    phi = np.eye(5)
    pairs = {(0, 3): 0.25, (1, 4): 0.35, (1, 2): 0.2, (2, 4): 0.15, (0, 2): 0.1}
    for (a, b), v in pairs.items():
        phi[a, b] = phi[b, a] = v
    return phi


def default_moral_coefficients() -> dict[str, dict[str, float]]:
    """Care is a pure-noise control; binding foundations are driven by christian."""
    return {
        "care": {},
        "fairness": {"classical": 0.3, "jazz": 0.2, "age": -0.3, "party_ndp": 0.25, "party_green": 0.2},
        "loyalty": {"christian": 0.8, "country": 0.35, "punk": -0.25, "age": 0.2},
        "authority": {"christian": 0.85, "country": 0.3, "rap": -0.25, "party_conservative": 0.3},
        "purity": {"christian": 0.95, "country": 0.2, "punk": -0.25, "heavy_metal": -0.2, "gs": -0.35},
    }


def default_ground_truth(seed: int = 0, **overrides) -> GroundTruth:
    kwargs = dict(
        true_loadings=default_loadings(),
        true_phi=default_phi(),
        moral_coefficients=default_moral_coefficients(),
        seed=seed,
    )
    kwargs.update(overrides)
    return GroundTruth(**kwargs)


def _sample_categorical(rng: np.random.Generator, counts: dict[str, int], n: int) -> list[str]:
    levels = list(counts)
    p = np.array([counts[k] for k in levels], dtype=float)
    return [levels[i] for i in rng.choice(len(levels), size=n, p=p / p.sum())]


def _zscore(col: np.ndarray) -> np.ndarray:
    sd = col.std()
    return (col - col.mean()) / sd if sd > 0 else np.zeros_like(col)


def generate_with_latent(
    g: GroundTruth, n: int, marginals: dict[str, dict[str, int]] | None = None
) -> tuple[Dataset, GroundTruth, np.ndarray]:
    """Like :func:`generate` but also returns the n x k latent factor draws."""
    if n < 50:
        raise ValueError("n must be >= 50")
    marginals = marginals or DEFAULT_MARGINALS
    rng = np.random.default_rng(g.seed)
    k = g.n_factors
    loadings = g.true_loadings

    latent = rng.standard_normal((n, k)) @ np.linalg.cholesky(g.true_phi).T
    continuous = latent @ loadings.T + g.noise_sd * rng.standard_normal((n, len(GENRE_SLUGS)))
    sd = np.sqrt(np.einsum("ij,jk,ik->i", loadings, g.true_phi, loadings) + g.noise_sd**2)
    scaled = 3.0 + g.rating_spread * continuous / np.where(sd > 0, sd, 1.0)
    ratings = np.round(np.clip(scaled, 1.0, 5.0)).astype(int)  # numpy rounds half to even

    missing = rng.random(ratings.shape) < g.missing_rate
    missing[missing.all(axis=1), 0] = False  # keep at least one rated genre

    ages = _sample_categorical(rng, marginals["age"], n)
    genders = _sample_categorical(rng, marginals["gender"], n)
    educations = _sample_categorical(rng, marginals["education"], n)
    parties = _sample_categorical(rng, marginals["party"], n)

    width = len(str(n))
    ids = [f"s{i + 1:0{width}d}" for i in range(n)]
    rated = [
        {slug: (None if missing[i, j] else int(ratings[i, j])) for j, slug in enumerate(GENRE_SLUGS)}
        for i in range(n)
    ]
    draft = Dataset(tuple(
        Respondent(ids[i], ages[i], genders[i], educations[i], parties[i], rated[i],
                   {f: 0.0 for f in FOUNDATIONS})
        for i in range(n)
    ))
    gs = dataset_gs_scores(draft, g.genre_vectors())

    observed = np.where(missing, np.nan, ratings.astype(float))
    row_mean = np.nanmean(observed, axis=1)
    filled = np.where(missing, row_mean[:, None], observed)
    features = {slug: filled[:, j] for j, slug in enumerate(GENRE_SLUGS)}
    features["age"] = np.array([AGE_BRACKETS.index(a) + 1 for a in ages], dtype=float)
    features["education"] = np.array([EDUCATION_LEVELS.index(e) + 1 for e in educations], dtype=float)
    features["female"] = np.array([x == "Female" for x in genders], dtype=float)
    for p in PARTIES:
        features[f"party_{PARTY_SLUGS[p]}"] = np.array([x == p for x in parties], dtype=float)
    features["gs"] = gs
    z = {name: _zscore(col) for name, col in features.items()}

    scores = {}
    for f in FOUNDATIONS:
        coefs = g.moral_coefficients.get(f, {})
        linear = np.zeros(n)
        for name in sorted(coefs):
            linear = linear + coefs[name] * z[name]
        raw = linear + g.moral_noise_sd * rng.standard_normal(n)
        scores[f] = np.round(np.clip(SCORE_CENTER + SCORE_SCALE * raw, *SCORE_RANGE), 2)

    catch_fail = rng.random(n) < g.catch_fail_rate
    respondents = []
    for i in range(n):
        catch = {}
        if g.catch_fail_rate > 0:
            catch = {"catch_1": "2" if catch_fail[i] else "4"}
        respondents.append(Respondent(
            ids[i], ages[i], genders[i], educations[i], parties[i], rated[i],
            {f: float(scores[f][i]) for f in FOUNDATIONS}, catch,
        ))
    prov = Provenance(f"synth:seed={g.seed}:n={n}")
    return Dataset(tuple(respondents), prov), g, latent


def generate(
    g: GroundTruth, n: int, marginals: dict[str, dict[str, int]] | None = None
) -> tuple[Dataset, GroundTruth]:
    """Draw ``n`` synthetic respondents from the planted model; deterministic per ``g.seed``."""
    d, g, _ = generate_with_latent(g, n, marginals)
    return d, g


def write_synthetic(d: Dataset, g: GroundTruth, path: str | Path) -> tuple[Path, Path]:
    """Write the survey CSV and a ``<stem>.truth.json`` sidecar next to it."""
    path = Path(path)
    write_survey(d, path)
    sidecar = path.with_name(path.stem + ".truth.json")
    sidecar.write_text(json.dumps(g.to_dict(), sort_keys=True, indent=1), encoding="utf-8")
    return path, sidecar


def _abs_congruence(est: np.ndarray, tru: np.ndarray) -> np.ndarray:
    norms = np.outer(np.linalg.norm(est, axis=0), np.linalg.norm(tru, axis=0))
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.nan_to_num(np.abs(est.T @ tru) / norms)


def match_factors(estimated: np.ndarray, truth: np.ndarray) -> dict[int, int]:
    """Greedy truth-column -> estimated-column pairing by largest |congruence|."""
    c = _abs_congruence(np.asarray(estimated, dtype=float), np.asarray(truth, dtype=float))
    pairs: dict[int, int] = {}
    free_est = set(range(c.shape[0]))
    free_tru = set(range(c.shape[1]))
    while free_tru and free_est:
        i, j = max(((i, j) for i in free_est for j in free_tru), key=lambda ij: (c[ij], -ij[0], -ij[1]))
        pairs[j] = i
        free_est.remove(i)
        free_tru.remove(j)
    return pairs


def congruence(estimated: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Tucker congruence per truth factor after greedy column matching.

    Signs are aligned, so every entry lies in [0, 1]. Entry ``j`` belongs to
    truth column ``j``.
    """
    est = np.asarray(estimated, dtype=float)
    tru = np.asarray(truth, dtype=float)
    if est.shape[0] != tru.shape[0]:
        raise ValueError("loading matrices need the same variables")
    if est.shape[1] < tru.shape[1]:
        raise ValueError("fewer estimated factors than truth factors")
    c = _abs_congruence(est, tru)
    return np.array([c[i, j] for j, i in sorted(match_factors(est, tru).items())])
