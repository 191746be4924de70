"""Survey ingestion, cleaning, feature encoding and median-split labelling.

The canonical CSV layout is::

    id, age, gender, education, party,
    genre_<slug> x 13, mft_<foundation> x 5, [catch_<k> ...]

Genre ratings are 5-point Likert integers; an empty cell means "not rated".
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

# (slug, display name) in questionnaire order
GENRES: tuple[tuple[str, str], ...] = (
    ("alternative", "alternative pop/rock"),
    ("christian", "christian"),
    ("classical", "classical"),
    ("country", "country"),
    ("folk", "folk"),
    ("heavy_metal", "heavy metal"),
    ("rap", "rap/hip-hop"),
    ("jazz", "jazz"),
    ("latin", "latin"),
    ("pop", "pop"),
    ("punk", "punk"),
    ("rnb", "R&B"),
    ("rock", "rock"),
)
GENRE_SLUGS: tuple[str, ...] = tuple(slug for slug, _ in GENRES)
GENRE_LABELS: dict[str, str] = dict(GENRES)

FOUNDATIONS: tuple[str, ...] = ("care", "fairness", "loyalty", "authority", "purity")
SUPERIOR: tuple[str, ...] = ("individualizing", "binding")
# row order of the result tables
TARGETS: tuple[str, ...] = (
    "care", "fairness", "authority", "purity", "loyalty", "individualizing", "binding",
)

AGE_BRACKETS: tuple[str, ...] = ("18-24", "25-34", "35-44", "45-54", "55-64", "65+")
EDUCATION_LEVELS: tuple[str, ...] = (
    "Less than High School",
    "High school graduate",
    "Some College",
    "Trade or professional school",
    "College Graduate",
    "Post Graduate work or degree",
)
PARTIES: tuple[str, ...] = (
    "Conservative",
    "Liberal",
    "New Democratic Party",
    "Green Party",
    "Party Quebecois",
    "I don't vote",
)
GENDERS: tuple[str, ...] = ("Female", "Male")

PARTY_SLUGS: dict[str, str] = {
    "Conservative": "conservative",
    "Liberal": "liberal",
    "New Democratic Party": "ndp",
    "Green Party": "green",
    "Party Quebecois": "pq",
    "I don't vote": "no_vote",
}

FEATURE_SETS: dict[str, tuple[str, ...]] = {
    "EX1": ("genres",),
    "EX2": ("factors",),
    "EX3": ("gs",),
    "EX4": ("genres", "age", "gender"),
    "EX5": ("genres", "age", "gender", "education"),
    "EX6": ("genres", "age", "gender", "education", "party"),
}
FEATURE_GROUPS = ("genres", "factors", "gs", "age", "gender", "education", "party")

CATCH_PREFIX = "catch_"


class SurveyFormatError(ValueError):
    """Raised when a survey file cannot be ingested at all."""


def default_schema() -> dict[str, str]:
    """Identity mapping from canonical field names to CSV column names."""
    fields = ["id", "age", "gender", "education", "party"]
    fields += [f"genre_{slug}" for slug in GENRE_SLUGS]
    fields += [f"mft_{name}" for name in FOUNDATIONS]
    return {name: name for name in fields}


@dataclass(frozen=True)
class Respondent:
    id: str
    age_bracket: str
    gender: str
    education: str
    political_party: str
    genre_ratings: dict[str, int | None]
    moral_scores: dict[str, float]
    catch_items: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if tuple(self.genre_ratings) != GENRE_SLUGS:
            raise ValueError(f"respondent {self.id}: genre keys must be {GENRE_SLUGS}")
        for slug, value in self.genre_ratings.items():
            if value is not None and value not in (1, 2, 3, 4, 5):
                raise ValueError(f"respondent {self.id}: rating {value!r} for {slug} not in 1..5")
        if set(self.moral_scores) != set(FOUNDATIONS):
            raise ValueError(f"respondent {self.id}: foundation keys must be {FOUNDATIONS}")

    @property
    def rated_genres(self) -> dict[str, int]:
        return {g: r for g, r in self.genre_ratings.items() if r is not None}

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "age_bracket": self.age_bracket,
            "gender": self.gender,
            "education": self.education,
            "political_party": self.political_party,
            "genre_ratings": dict(self.genre_ratings),
            "moral_scores": {f: self.moral_scores[f] for f in FOUNDATIONS},
            "catch_items": dict(sorted(self.catch_items.items())),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "Respondent":
        return cls(
            id=data["id"],
            age_bracket=data["age_bracket"],
            gender=data["gender"],
            education=data["education"],
            political_party=data["political_party"],
            genre_ratings={g: data["genre_ratings"][g] for g in GENRE_SLUGS},
            moral_scores={f: float(data["moral_scores"][f]) for f in FOUNDATIONS},
            catch_items=dict(data.get("catch_items", {})),
        )


@dataclass(frozen=True)
class Provenance:
    source: str
    events: tuple[dict, ...] = ()

    def with_event(self, **event) -> "Provenance":
        return Provenance(self.source, self.events + (event,))

    def to_dict(self) -> dict:
        return {"source": self.source, "events": list(self.events)}


@dataclass(frozen=True)
class Dataset:
    respondents: tuple[Respondent, ...]
    provenance: Provenance = Provenance("<memory>")

    def __post_init__(self):
        ids = [r.id for r in self.respondents]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate respondent ids")

    def __len__(self) -> int:
        return len(self.respondents)

    def __iter__(self):
        return iter(self.respondents)

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.respondents]

    @property
    def catch_columns(self) -> list[str]:
        cols: set[str] = set()
        for r in self.respondents:
            cols.update(r.catch_items)
        return sorted(cols)

    def subset(self, keep: Iterable[bool], event: dict) -> "Dataset":
        rows = tuple(r for r, k in zip(self.respondents, keep) if k)
        return Dataset(rows, self.provenance.with_event(**event))

    def to_json(self) -> str:
        """Canonical serialization; stable bytes for equal datasets."""
        payload = {
            "provenance": self.provenance.to_dict(),
            "respondents": [r.to_dict() for r in self.respondents],
        }
        return json.dumps(payload, sort_keys=True, ensure_ascii=False)

    @classmethod
    def from_json(cls, text: str) -> "Dataset":
        payload = json.loads(text)
        prov = payload["provenance"]
        return cls(
            tuple(Respondent.from_dict(r) for r in payload["respondents"]),
            Provenance(prov["source"], tuple(prov["events"])),
        )

    def content_hash(self) -> str:
        """SHA-256 over respondent content only (provenance excluded)."""
        body = json.dumps([r.to_dict() for r in self.respondents], sort_keys=True)
        return hashlib.sha256(body.encode("utf-8")).hexdigest()

    def scores(self, target: str) -> np.ndarray:
        """Foundation or superior-foundation scores as a float array."""
        if target in FOUNDATIONS:
            return np.array([r.moral_scores[target] for r in self.respondents], dtype=float)
        if target in SUPERIOR:
            pairs = [derive_superior_foundations(r.moral_scores) for r in self.respondents]
            return np.array([p[SUPERIOR.index(target)] for p in pairs], dtype=float)
        raise KeyError(f"unknown target {target!r}")

    def rating_matrix(self) -> np.ndarray:
        """n x 13 matrix of raw ratings with NaN for unrated genres."""
        out = np.full((len(self), len(GENRE_SLUGS)), np.nan)
        for i, r in enumerate(self.respondents):
            for j, slug in enumerate(GENRE_SLUGS):
                v = r.genre_ratings[slug]
                if v is not None:
                    out[i, j] = v
        return out


def _match_level(value: str, levels: Sequence[str]) -> str | None:
    v = value.strip().casefold()
    for level in levels:
        if level.casefold() == v:
            return level
    return None


def _parse_row(raw: Mapping[str, str], schema: Mapping[str, str], catch_cols: Sequence[str]) -> Respondent:
    def get(name: str) -> str:
        return (raw[schema[name]] or "").strip()

    rid = get("id")
    if not rid:
        raise ValueError("empty id")
    age = _match_level(get("age"), AGE_BRACKETS)
    if age is None:
        raise ValueError(f"unknown age bracket {get('age')!r}")
    education = _match_level(get("education"), EDUCATION_LEVELS)
    if education is None:
        raise ValueError(f"unknown education level {get('education')!r}")
    party = _match_level(get("party"), PARTIES)
    if party is None:
        raise ValueError(f"unknown party {get('party')!r}")
    gender = get("gender")
    if not gender:
        raise ValueError("empty gender")
    known_gender = _match_level(gender, GENDERS)
    gender = known_gender or gender

    ratings: dict[str, int | None] = {}
    for slug in GENRE_SLUGS:
        cell = get(f"genre_{slug}")
        if cell == "":
            ratings[slug] = None
            continue
        try:
            value = float(cell)
        except ValueError:
            raise ValueError(f"genre_{slug}: unparseable rating {cell!r}") from None
        if value not in (1, 2, 3, 4, 5):
            raise ValueError(f"genre_{slug}: rating {cell!r} outside 1..5")
        ratings[slug] = int(value)
    if all(v is None for v in ratings.values()):
        raise ValueError("no genre rated")

    scores: dict[str, float] = {}
    for name in FOUNDATIONS:
        cell = get(f"mft_{name}")
        try:
            value = float(cell)
        except ValueError:
            raise ValueError(f"mft_{name}: unparseable score {cell!r}") from None
        if not np.isfinite(value):
            raise ValueError(f"mft_{name}: non-finite score")
        scores[name] = value

    catch = {c: (raw[c] or "").strip() for c in catch_cols}
    return Respondent(rid, age, gender, education, party, ratings, scores, catch)


def load_survey(path: str | Path, schema: Mapping[str, str] | None = None) -> Dataset:
    """Read a survey CSV into a :class:`Dataset`.

    Rows with unparseable required fields (or a duplicate id) are dropped and
    recorded in the provenance log rather than aborting the load.

    Raises
    ------
    FileNotFoundError
        If ``path`` does not exist.
    SurveyFormatError
        If the header lacks a mapped column or no row survives parsing.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"survey file not found: {path}")
    mapping = default_schema()
    if schema:
        mapping.update(schema)

    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames
        if not header:
            raise SurveyFormatError(f"{path}: missing header row")
        missing = [col for col in mapping.values() if col not in header]
        if missing:
            raise SurveyFormatError(f"{path}: header missing columns {missing}")
        catch_cols = [c for c in header if c.startswith(CATCH_PREFIX)]

        prov = Provenance(str(path))
        rows: list[Respondent] = []
        seen: set[str] = set()
        for line_no, raw in enumerate(reader, start=2):
            try:
                resp = _parse_row(raw, mapping, catch_cols)
                if resp.id in seen:
                    raise ValueError(f"duplicate id {resp.id!r}")
            except (ValueError, TypeError) as exc:
                prov = prov.with_event(step="load", line=line_no, reason=str(exc))
                logger.info("dropping line %d: %s", line_no, exc)
                continue
            seen.add(resp.id)
            rows.append(resp)

    if not rows:
        raise SurveyFormatError(f"{path}: zero valid rows")
    prov = prov.with_event(step="load", accepted=len(rows), rejected=len(prov.events))
    return Dataset(tuple(rows), prov)


def _survey_header(catch_cols: Sequence[str]) -> list[str]:
    return list(default_schema().values()) + list(catch_cols)


def survey_csv(d: Dataset) -> str:
    """Render a dataset in the canonical CSV layout (lossless for valid rows)."""
    catch_cols = d.catch_columns
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(_survey_header(catch_cols))
    for r in d.respondents:
        row = [r.id, r.age_bracket, r.gender, r.education, r.political_party]
        row += ["" if r.genre_ratings[g] is None else str(r.genre_ratings[g]) for g in GENRE_SLUGS]
        row += [repr(float(r.moral_scores[f])) for f in FOUNDATIONS]
        row += [r.catch_items.get(c, "") for c in catch_cols]
        writer.writerow(row)
    return buf.getvalue()


def write_survey(d: Dataset, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(survey_csv(d), encoding="utf-8")
    return path


CatchRule = Callable[[str], bool] | str


def filter_catch_failures(d: Dataset, rules: Mapping[str, CatchRule]) -> Dataset:
    """Drop respondents failing any catch-item rule.

    A rule is either a predicate over the raw response or the literal string
    the response must equal.
    """
    available = d.catch_columns
    if not available or not rules:
        return d
    unknown = sorted(set(rules) - set(available))
    if unknown:
        raise KeyError(f"catch rules reference unknown columns {unknown}")

    def passes(r: Respondent) -> bool:
        for col, rule in rules.items():
            answer = r.catch_items.get(col, "")
            ok = rule(answer) if callable(rule) else answer == str(rule)
            if not ok:
                return False
        return True

    keep = [passes(r) for r in d.respondents]
    removed = keep.count(False)
    out = d.subset(keep, {"step": "catch_filter", "rules": sorted(rules), "removed": removed})
    if not len(out):
        warnings.warn("every respondent failed the catch items; dataset is empty", stacklevel=2)
    return out


@dataclass(frozen=True)
class LabelVector:
    foundation: str
    labels: np.ndarray  # 1 = high, 0 = low
    median_used: float

    @property
    def n_high(self) -> int:
        return int(self.labels.sum())


def median_split_labels(d: Dataset, foundation: str) -> LabelVector:
    """Label a respondent "high" iff their score strictly exceeds the median."""
    if not len(d):
        raise ValueError("cannot label an empty dataset")
    scores = d.scores(foundation)
    if np.isnan(scores).any():
        raise ValueError(f"missing {foundation} scores")
    med = float(np.median(scores))
    labels = (scores > med).astype(np.int64)
    labels.setflags(write=False)
    return LabelVector(foundation, labels, med)


def derive_superior_foundations(m: Mapping[str, float]) -> tuple[float, float]:
    """(individualizing, binding) as unweighted means of their constituents."""
    try:
        individualizing = (m["care"] + m["fairness"]) / 2.0
        binding = (m["loyalty"] + m["authority"] + m["purity"]) / 3.0
    except KeyError as exc:
        raise KeyError(f"missing constituent score {exc.args[0]!r}") from None
    return float(individualizing), float(binding)


@dataclass(frozen=True)
class FeatureMatrix:
    names: tuple[str, ...]
    values: np.ndarray
    kinds: tuple[str, ...]
    row_ids: tuple[str, ...] = ()

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim != 2 or values.shape[1] != len(self.names):
            raise ValueError("values must be n x len(names)")
        if len(set(self.names)) != len(self.names):
            raise ValueError("feature names must be unique")
        if len(self.kinds) != len(self.names):
            raise ValueError("one kind per column required")
        if self.row_ids and len(self.row_ids) != values.shape[0]:
            raise ValueError("row_ids length mismatch")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.names.index(name)]

    def take(self, rows: np.ndarray) -> "FeatureMatrix":
        ids = tuple(self.row_ids[i] for i in rows) if self.row_ids else ()
        return FeatureMatrix(self.names, self.values[rows], self.kinds, ids)

    def hstack(self, other: "FeatureMatrix") -> "FeatureMatrix":
        return FeatureMatrix(
            self.names + other.names,
            np.hstack([self.values, other.values]),
            self.kinds + other.kinds,
            self.row_ids or other.row_ids,
        )


def imputed_ratings(d: Dataset) -> np.ndarray:
    """Rating matrix with unrated genres filled by the respondent's own mean rating."""
    ratings = d.rating_matrix()
    row_mean = np.nanmean(ratings, axis=1)
    return np.where(np.isnan(ratings), row_mean[:, None], ratings)


def resolve_feature_set(spec) -> tuple[str, ...]:
    """Accept an EX id, a sequence of group names, or anything with ``feature_set``."""
    if hasattr(spec, "feature_set"):
        spec = spec.feature_set
    if isinstance(spec, str):
        if spec.upper() not in FEATURE_SETS:
            raise KeyError(f"unknown experiment id {spec!r}")
        return FEATURE_SETS[spec.upper()]
    groups = tuple(spec)
    if not groups:
        raise ValueError("empty feature set")
    bad = [g for g in groups if g not in FEATURE_GROUPS]
    if bad:
        raise KeyError(f"unknown feature groups {bad}")
    return groups


def encode_features(
    d: Dataset,
    spec,
    factor_scores: np.ndarray | None = None,
    gs: np.ndarray | None = None,
) -> FeatureMatrix:
    """Build the numeric predictor matrix for an experiment's feature set."""
    groups = resolve_feature_set(spec)
    n = len(d)
    names: list[str] = []
    kinds: list[str] = []
    cols: list[np.ndarray] = []

    def add(name: str, kind: str, col) -> None:
        names.append(name)
        kinds.append(kind)
        cols.append(np.asarray(col, dtype=float))

    for group in groups:
        if group == "genres":
            ratings = imputed_ratings(d)
            for j, slug in enumerate(GENRE_SLUGS):
                add(slug, "likert", ratings[:, j])
        elif group == "factors":
            if factor_scores is None:
                raise ValueError("feature set needs factor scores but none were provided")
            scores = np.asarray(factor_scores, dtype=float)
            if scores.ndim != 2 or scores.shape[0] != n:
                raise ValueError("factor scores must be an n x k matrix")
            for k in range(scores.shape[1]):
                add(f"factor_{k + 1}", "score", scores[:, k])
        elif group == "gs":
            if gs is None:
                raise ValueError("feature set needs GS scores but none were provided")
            gs = np.asarray(gs, dtype=float)
            if gs.shape != (n,):
                raise ValueError("GS scores must be a length-n vector")
            add("gs_score", "score", gs)
        elif group == "age":
            add("age", "ordinal", [AGE_BRACKETS.index(r.age_bracket) + 1 for r in d])
        elif group == "education":
            add("education", "ordinal", [EDUCATION_LEVELS.index(r.education) + 1 for r in d])
        elif group == "gender":
            for level in GENDERS:
                add(f"gender_{level.lower()}", "onehot", [r.gender == level for r in d])
        elif group == "party":
            for party in PARTIES:
                add(f"party_{PARTY_SLUGS[party]}", "onehot", [r.political_party == party for r in d])

    values = np.column_stack(cols) if cols else np.empty((n, 0))
    if np.isnan(values).any():
        raise ValueError("encoded features contain NaN")
    return FeatureMatrix(tuple(names), values, tuple(kinds), tuple(d.ids))
