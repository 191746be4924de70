"""Experiment grid (EX1-EX6), cross-validation, metrics and result tables."""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .boosting import BoostParams, fit
from .dataset import (
    FEATURE_SETS,
    GENRE_SLUGS,
    TARGETS,
    Dataset,
    FeatureMatrix,
    encode_features,
    imputed_ratings,
    median_split_labels,
    resolve_feature_set,
)
from .factors import FactorModel, factor_scores
from .prefspace import dataset_gs_scores

logger = logging.getLogger(__name__)

TASKS = ("classification", "regression")
TASK_ALIASES = {"clf": "classification", "reg": "regression",
                "classification": "classification", "regression": "regression"}
METRICS = {"classification": "weighted_auroc", "regression": "mae"}
SPLIT_MODES = ("kfold", "shuffle_split")

TARGET_LABELS = {
    "care": "Care",
    "fairness": "Fairness",
    "authority": "Authority",
    "purity": "Purity",
    "loyalty": "Loyalty",
    "individualizing": "Individ.",
    "binding": "Binding",
}
TABLE_LAYOUTS = (("EX1", "EX2", "EX3"), ("EX1", "EX4", "EX5", "EX6"))


class ExperimentError(ValueError):
    pass


# --- metrics ---------------------------------------------------------------

def auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Area under the ROC curve via the mid-rank Mann-Whitney statistic."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels)
    if s.shape != y.shape:
        raise ValueError("scores and labels must have equal length")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs both classes")
    ranks = rankdata(s)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def weighted_auroc(scores, labels) -> float:
    """Support-weighted mean of one-vs-rest AUROCs.

    ``scores`` is either a 1-D positive-class score (binary labels) or an
    n x classes score matrix whose columns follow the sorted class labels.
    For binary labels this equals :func:`auroc`.
    """
    y = np.asarray(labels)
    classes = np.unique(y)
    if len(classes) < 2:
        raise ValueError("weighted AUROC needs at least two classes")
    s = np.asarray(scores, dtype=float)
    if s.ndim == 1:
        if len(classes) != 2:
            raise ValueError("1-D scores require binary labels")
        s = np.column_stack([-s, s])
    if s.shape != (len(y), len(classes)):
        raise ValueError("score matrix must be n x n_classes")
    total = 0.0
    for k, c in enumerate(classes):
        member = (y == c).astype(int)
        total += member.sum() * auroc(s[:, k], member)
    return float(total / len(y))


def mae(pred: Sequence[float], actual: Sequence[float]) -> float:
    p = np.asarray(pred, dtype=float)
    a = np.asarray(actual, dtype=float)
    if p.shape != a.shape:
        raise ValueError("length mismatch")
    if p.size == 0:
        raise ValueError("need at least one value")
    return float(np.abs(p - a).mean())


# --- specs and results -----------------------------------------------------

@dataclass(frozen=True)
class ExperimentSpec:
    id: str
    feature_set: tuple[str, ...]
    targets: tuple[str, ...] = TARGETS
    task: str = "classification"
    folds: int = 5
    seed: int = 0
    boost_params: BoostParams = field(default_factory=BoostParams)
    split_mode: str = "kfold"
    test_size: float = 0.3

    def __post_init__(self):
        task = TASK_ALIASES.get(self.task)
        if task is None:
            raise ValueError(f"unknown task {self.task!r}")
        object.__setattr__(self, "task", task)
        object.__setattr__(self, "feature_set", resolve_feature_set(self.feature_set))
        if self.folds < 2:
            raise ValueError("folds must be >= 2")
        if self.split_mode not in SPLIT_MODES:
            raise ValueError(f"split_mode must be one of {SPLIT_MODES}")
        if not 0 < self.test_size < 1:
            raise ValueError("test_size must lie in (0, 1)")
        bad = [t for t in self.targets if t not in TARGETS]
        if bad or not self.targets:
            raise ValueError(f"unknown or empty targets {bad}")
        objective = "logistic" if task == "classification" else "squared_error"
        if self.boost_params.objective != objective:
            object.__setattr__(self, "boost_params", self.boost_params.with_(objective=objective))

    @classmethod
    def from_id(cls, exp_id: str, task: str = "classification", **kwargs) -> "ExperimentSpec":
        exp_id = exp_id.upper()
        if exp_id not in FEATURE_SETS:
            raise KeyError(f"unknown experiment id {exp_id!r}")
        return cls(exp_id, FEATURE_SETS[exp_id], task=task, **kwargs)

    @property
    def metric(self) -> str:
        return METRICS[self.task]

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "feature_set": list(self.feature_set),
            "targets": list(self.targets),
            "task": self.task,
            "folds": self.folds,
            "seed": self.seed,
            "boost_params": self.boost_params.to_dict(),
            "split_mode": self.split_mode,
            "test_size": self.test_size,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentSpec":
        data = dict(data)
        data["boost_params"] = BoostParams(**data["boost_params"])
        data["feature_set"] = tuple(data["feature_set"])
        data["targets"] = tuple(data["targets"])
        return cls(**data)


@dataclass(frozen=True)
class CellResult:
    target: str
    folds: tuple[float, ...]
    baseline: tuple[float, ...] = ()

    @property
    def mean(self) -> float:
        return float(np.mean(self.folds))

    @property
    def std(self) -> float:
        return float(np.std(self.folds))

    @property
    def baseline_mean(self) -> float | None:
        return float(np.mean(self.baseline)) if self.baseline else None

    def to_dict(self) -> dict:
        return {
            "target": self.target,
            "mean": self.mean,
            "std": self.std,
            "folds": list(self.folds),
            "baseline": list(self.baseline),
        }


@dataclass(frozen=True)
class ExperimentResult:
    spec: ExperimentSpec
    cells: tuple[CellResult, ...]
    dataset_hash: str
    feature_names: tuple[str, ...]

    @property
    def metric(self) -> str:
        return self.spec.metric

    def cell(self, target: str) -> CellResult:
        for c in self.cells:
            if c.target == target:
                return c
        raise KeyError(target)

    def to_dict(self) -> dict:
        return {
            "experiment": self.spec.id,
            "task": self.spec.task,
            "metric": self.metric,
            "cells": [c.to_dict() for c in self.cells],
            "provenance": {
                "spec": self.spec.to_dict(),
                "seed": self.spec.seed,
                "dataset_hash": self.dataset_hash,
                "features": list(self.feature_names),
            },
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentResult":
        prov = data["provenance"]
        cells = tuple(
            CellResult(c["target"], tuple(c["folds"]), tuple(c.get("baseline", ())))
            for c in data["cells"]
        )
        return cls(ExperimentSpec.from_dict(prov["spec"]), cells, prov["dataset_hash"],
                   tuple(prov["features"]))


# --- cross-validation --------------------------------------------------------

def fold_assignments(y: Sequence, folds: int, seed: int, stratify: bool) -> np.ndarray:
    """Fold id per row after a seeded shuffle.

    With ``stratify`` the rows of each class are dealt round-robin, continuing
    the deal across classes, so every fold's class counts are within one of
    the proportional share and fold sizes differ by at most one.
    """
    y = np.asarray(y)
    n = len(y)
    if n < folds:
        raise ExperimentError(f"need at least {folds} rows, got {n}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    out = np.empty(n, dtype=np.int64)
    if not stratify:
        out[perm] = np.arange(n) % folds
        return out
    pos = 0
    for c in np.unique(y):
        members = perm[y[perm] == c]
        out[members] = (pos + np.arange(len(members))) % folds
        pos += len(members)
    return out


def split_indices(y: Sequence, spec: ExperimentSpec) -> list[tuple[np.ndarray, np.ndarray]]:
    """(train, test) index pairs for the spec's split mode."""
    y = np.asarray(y)
    stratify = spec.task == "classification"
    if spec.split_mode == "kfold":
        fold_id = fold_assignments(y, spec.folds, spec.seed, stratify)
        return [(np.flatnonzero(fold_id != k), np.flatnonzero(fold_id == k)) for k in range(spec.folds)]

    rng = np.random.default_rng(spec.seed)
    n = len(y)
    groups = [np.arange(n)] if not stratify else [np.flatnonzero(y == c) for c in np.unique(y)]
    splits = []
    for _ in range(spec.folds):
        test_parts = []
        for members in groups:
            shuffled = rng.permutation(members)
            test_parts.append(shuffled[: int(round(spec.test_size * len(members)))])
        test = np.sort(np.concatenate(test_parts))
        train = np.setdiff1d(np.arange(n), test)
        splits.append((train, test))
    return splits


def cross_validate(x: FeatureMatrix, y: Sequence[float], spec: ExperimentSpec) -> CellResult:
    """Fit one model per split and score it on the held-out rows.

    For regression the training-median constant predictor is scored on the
    same splits as a baseline.
    """
    y = np.asarray(y, dtype=float)
    if spec.task == "classification" and len(np.unique(y)) < 2:
        raise ExperimentError("classification needs both classes present")
    folds, baseline = [], []
    for train, test in split_indices(y, spec):
        if spec.task == "classification":
            if len(np.unique(y[train])) < 2 or len(np.unique(y[test])) < 2:
                raise ExperimentError("a fold lost one class; use fewer folds")
            model = fit(x.take(train), y[train], spec.boost_params)
            folds.append(weighted_auroc(model.predict_margin(x.take(test)), y[test].astype(int)))
        else:
            model = fit(x.take(train), y[train], spec.boost_params)
            folds.append(mae(model.predict_margin(x.take(test)), y[test]))
            baseline.append(mae(np.full(len(test), np.median(y[train])), y[test]))
    return CellResult("", tuple(folds), tuple(baseline))


# --- experiment runner -------------------------------------------------------

def derived_features(d: Dataset, fm: FactorModel, weighting: str = "rating") -> tuple[np.ndarray, np.ndarray]:
    """(factor scores, GS scores) for every respondent from a fitted factor model."""
    if tuple(fm.variables) != GENRE_SLUGS:
        raise ExperimentError("factor model must be fitted on the 13 genre columns")
    ratings = imputed_ratings(d)
    scores = factor_scores(ratings, fm)
    gs = dataset_gs_scores(d, fm.genre_vectors(), weighting)
    return scores, gs


def run_experiment(d: Dataset, spec: ExperimentSpec, fm: FactorModel | None = None) -> ExperimentResult:
    """Cross-validated metric for each target of ``spec``."""
    scores = gs = None
    if {"factors", "gs"} & set(spec.feature_set):
        if fm is None:
            raise ExperimentError(f"{spec.id} needs a fitted factor model")
        scores, gs = derived_features(d, fm)
    x = encode_features(d, spec, factor_scores=scores, gs=gs)

    cells = []
    for target in spec.targets:
        try:
            if spec.task == "classification":
                y = median_split_labels(d, target).labels
            else:
                y = d.scores(target)
            cell = cross_validate(x, y, spec)
        except (ValueError, KeyError) as exc:
            raise ExperimentError(f"target {target}: {exc}") from exc
        logger.info("%s %s %s: %.4f", spec.id, spec.task, target, cell.mean)
        cells.append(replace(cell, target=target))
    return ExperimentResult(spec, tuple(cells), d.content_hash(), x.names)


def run_grid(
    d: Dataset,
    fm: FactorModel | None,
    experiments: Sequence[str] = tuple(FEATURE_SETS),
    tasks: Sequence[str] = TASKS,
    **spec_kwargs,
) -> list[ExperimentResult]:
    return [
        run_experiment(d, ExperimentSpec.from_id(e, task=t, **spec_kwargs), fm)
        for t in tasks
        for e in experiments
    ]


def grid_search(
    x: FeatureMatrix, y: Sequence[float], spec: ExperimentSpec, grid: dict[str, Sequence]
) -> tuple[BoostParams, list[tuple[dict, float]]]:
    """Pick boosting parameters by cross-validated metric over a small grid."""
    keys = sorted(grid)
    trials = []
    for combo in itertools.product(*(grid[k] for k in keys)):
        overrides = dict(zip(keys, combo))
        trial = replace(spec, boost_params=spec.boost_params.with_(**overrides))
        trials.append((overrides, cross_validate(x, y, trial).mean))
    sign = 1.0 if spec.task == "classification" else -1.0
    best, _ = max(trials, key=lambda t: sign * t[1])
    return spec.boost_params.with_(**best), trials


# --- reports -----------------------------------------------------------------

def format_cell(mean: float, std: float, metric: str) -> str:
    """Table cell text: mean, then the fold std x 100 in parentheses."""
    if metric == "weighted_auroc":
        text = f"{mean:.2f}"
        if text.startswith("0."):
            text = text[1:]
        return f"{text} ({std * 100:.1f})"
    return f"{mean:.2f} ({std * 100:.1f})"


@dataclass(frozen=True)
class ResultTable:
    task: str
    metric: str
    columns: tuple[str, ...]
    rows: tuple[str, ...]
    cells: dict  # (target, experiment) -> CellResult

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.rows), len(self.columns)

    def best_column(self, target: str) -> str | None:
        present = [(c, self.cells[(target, c)].mean) for c in self.columns if (target, c) in self.cells]
        if not present:
            return None
        if self.metric == "weighted_auroc":
            return max(present, key=lambda t: t[1])[0]
        return min(present, key=lambda t: t[1])[0]


def build_tables(results: Sequence[ExperimentResult]) -> list[ResultTable]:
    """Arrange results into tables: per task, EX1-EX3 and EX1/EX4-EX6."""
    if not results:
        raise ValueError("no results to report")
    tables = []
    for task in TASKS:
        by_exp = {r.spec.id: r for r in results if r.spec.task == task}
        if not by_exp:
            continue
        layouts = []
        demo = [e for e in TABLE_LAYOUTS[1] if e in by_exp]
        feat = [e for e in TABLE_LAYOUTS[0] if e in by_exp]
        has_b = any(e in by_exp for e in ("EX4", "EX5", "EX6"))
        if any(e in by_exp for e in ("EX2", "EX3")) or ("EX1" in by_exp and not has_b):
            layouts.append(feat)
        if has_b:
            layouts.append(demo)
        custom = sorted(e for e in by_exp if e not in FEATURE_SETS)
        if custom:
            layouts.append(custom)
        for cols in layouts:
            cells = {}
            for e in cols:
                for c in by_exp[e].cells:
                    cells[(c.target, e)] = c
            rows = tuple(t for t in TARGETS if any((t, e) in cells for e in cols))
            tables.append(ResultTable(task, METRICS[task], tuple(cols), rows, cells))
    return tables


def _markdown(table: ResultTable) -> str:
    title = "Classification (weighted AUROC)" if table.task == "classification" else "Regression (MAE)"
    lines = [f"### {title}: {', '.join(table.columns)}", ""]
    lines.append("| | " + " | ".join(table.columns) + " |")
    lines.append("|---|" + "---|" * len(table.columns))
    for t in table.rows:
        best = table.best_column(t)
        out = []
        for e in table.columns:
            cell = table.cells.get((t, e))
            if cell is None:
                out.append("")
                continue
            text = format_cell(cell.mean, cell.std, table.metric)
            out.append(f"**{text}**" if e == best and len(table.columns) > 1 else text)
        lines.append(f"| {TARGET_LABELS[t]} | " + " | ".join(out) + " |")
    return "\n".join(lines)


def report(results: Sequence[ExperimentResult], fmt: str = "json") -> str:
    """Render results as canonical JSON, long-format CSV or markdown tables."""
    tables = build_tables(results)
    if fmt == "json":
        payload = {
            "results": [r.to_dict() for r in results],
            "tables": [
                {
                    "task": t.task,
                    "metric": t.metric,
                    "columns": list(t.columns),
                    "rows": list(t.rows),
                    "cells": [
                        [format_cell(t.cells[(r, c)].mean, t.cells[(r, c)].std, t.metric)
                         if (r, c) in t.cells else None for c in t.columns]
                        for r in t.rows
                    ],
                }
                for t in tables
            ],
        }
        return json.dumps(payload, sort_keys=True, indent=1)
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["table", "task", "metric", "target", "experiment", "mean", "std", "cell"])
        for i, t in enumerate(tables):
            for r in t.rows:
                for c in t.columns:
                    cell = t.cells.get((r, c))
                    if cell is None:
                        continue
                    writer.writerow([i, t.task, t.metric, r, c, repr(cell.mean), repr(cell.std),
                                     format_cell(cell.mean, cell.std, t.metric)])
        return buf.getvalue()
    if fmt == "markdown":
        return "\n\n".join(_markdown(t) for t in tables) + "\n"
    raise ValueError(f"unknown report format {fmt!r}")


def results_from_json(text: str) -> list[ExperimentResult]:
    payload = json.loads(text)
    items = payload["results"] if isinstance(payload, dict) else payload
    return [ExperimentResult.from_dict(r) for r in items]
