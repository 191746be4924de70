"""Command-line entry point: ``moralmusic <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .attribution import beeswarm_export, beeswarm_json, global_importance, shap_matrix_csv
from .boosting import BoostParams, fit
from .dataset import (
    FEATURE_SETS,
    Dataset,
    encode_features,
    filter_catch_failures,
    load_survey,
    median_split_labels,
)
from .experiments import (
    TASKS,
    ExperimentSpec,
    derived_features,
    report,
    results_from_json,
    run_experiment,
)
from .factors import FactorModel, fit_factor_model
from .prefspace import REPORT_GROUPS, correlation_report, dataset_gs_scores, report_to_csv, report_to_json
from .synth import default_ground_truth, generate, write_synthetic

log = logging.getLogger("moralmusic")

FLAG_TO_BOOST = {"rounds": "n_rounds", "depth": "max_depth", "lr": "learning_rate", "reg_lambda": "reg_lambda"}


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
        log.info("wrote %s", out)
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _config(args) -> dict:
    cfg = {}
    if getattr(args, "config", None):
        cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
    boost = dict(cfg.get("boost", {}))
    for flag, key in FLAG_TO_BOOST.items():
        value = getattr(args, flag, None)
        if value is not None:
            boost[key] = value
    cfg["boost"] = boost
    for key in ("seed", "folds"):
        if getattr(args, key, None) is not None:
            cfg[key] = getattr(args, key)
    if getattr(args, "split", None):
        cfg["split_mode"] = args.split
    return cfg


def _load(args) -> Dataset:
    schema = None
    if getattr(args, "schema", None):
        schema = json.loads(Path(args.schema).read_text(encoding="utf-8"))
    d = load_survey(args.data, schema)
    rules = {}
    for item in getattr(args, "catch", None) or []:
        col, sep, expected = item.partition("=")
        if not sep:
            raise ValueError(f"--catch expects COLUMN=VALUE, got {item!r}")
        rules[col] = expected
    if rules:
        d = filter_catch_failures(d, rules)
    if not len(d):
        raise ValueError("no respondents left after cleaning")
    return d


def _factor_model(args, d: Dataset, cfg: dict | None = None) -> FactorModel:
    path = getattr(args, "factors", None)
    if path:
        return FactorModel.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
    fcfg = (cfg or {}).get("factors", {})
    return fit_factor_model(
        encode_features(d, "EX1"),
        n_factors=int(getattr(args, "k", None) or fcfg.get("k", 5)),
        rotation=getattr(args, "rotation", None) or fcfg.get("rotation", "promax"),
        kappa=int(getattr(args, "kappa", None) or fcfg.get("kappa", 4)),
    )


def _spec(exp_id: str, task: str, cfg: dict) -> ExperimentSpec:
    return ExperimentSpec.from_id(
        exp_id,
        task=task,
        folds=int(cfg.get("folds", 5)),
        seed=int(cfg.get("seed", 0)),
        boost_params=BoostParams(**cfg["boost"]),
        split_mode=cfg.get("split_mode", "kfold"),
        test_size=float(cfg.get("test_size", 0.3)),
    )


def cmd_synth(args) -> None:
    truth = default_ground_truth(
        seed=args.seed,
        noise_sd=args.noise_sd,
        missing_rate=args.missing_rate,
        catch_fail_rate=args.catch_fail_rate,
    )
    d, g = generate(truth, args.n)
    csv_path, sidecar = write_synthetic(d, g, args.out)
    print(json.dumps({"survey": str(csv_path), "truth": str(sidecar), "n": len(d),
                      "dataset_hash": d.content_hash()}))


def cmd_ingest(args) -> None:
    d = _load(args)
    if args.out:
        Path(args.out).write_text(d.to_json(), encoding="utf-8")
    print(json.dumps({"n": len(d), "provenance": d.provenance.to_dict()}, indent=1))


def cmd_factors(args) -> None:
    d = _load(args)
    fm = _factor_model(args, d, _config(args))
    _emit(json.dumps(fm.to_dict(), sort_keys=True, indent=1), args.out)
    summary = {
        "explained_variance": fm.explained_variance,
        "explained_variance_structure": fm.explained_variance_structure,
        "groupings": fm.groupings(),
        "converged": fm.converged,
        "heywood": fm.heywood,
    }
    print(json.dumps(summary, indent=1), file=sys.stderr)


def cmd_gs(args) -> None:
    d = _load(args)
    fm = _factor_model(args, d, _config(args))
    gs = dataset_gs_scores(d, fm.genre_vectors(), args.weighting)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["id", "gs_score"])
    for rid, value in zip(d.ids, gs):
        writer.writerow([rid, repr(float(value))])
    _emit(buf.getvalue(), args.out)


def cmd_correlate(args) -> None:
    d = _load(args)
    groups = [g.strip() for g in args.groups.split(",") if g.strip()]
    gs = None
    if "gs" in groups:
        fm = _factor_model(args, d, _config(args))
        gs = dataset_gs_scores(d, fm.genre_vectors())
    rows = correlation_report(d, groups, gs=gs)
    _emit(report_to_csv(rows) if args.format == "csv" else report_to_json(rows), args.out)


def _tasks(task: str) -> list[str]:
    return list(TASKS) if task == "both" else [task]


def _experiments(specs: list[str]) -> list[str]:
    if len(specs) == 1 and specs[0].lower() == "all":
        return list(FEATURE_SETS)
    return [s.upper() for s in specs]


def cmd_run(args) -> None:
    d = _load(args)
    cfg = _config(args)
    exps = _experiments(args.spec)
    fm = None
    if any(set(FEATURE_SETS[e]) & {"factors", "gs"} for e in exps if e in FEATURE_SETS):
        fm = _factor_model(args, d, cfg)
    results = []
    for task in _tasks(args.task):
        for e in exps:
            results.append(run_experiment(d, _spec(e, task, cfg), fm))
    _emit(report(results, args.format), args.out)


def cmd_shap(args) -> None:
    d = _load(args)
    cfg = _config(args)
    spec = _spec(args.spec.upper(), args.task, cfg)
    scores = gs = None
    if {"factors", "gs"} & set(spec.feature_set):
        scores, gs = derived_features(d, _factor_model(args, d, cfg))
    x = encode_features(d, spec, factor_scores=scores, gs=gs)
    if spec.task == "classification":
        y = median_split_labels(d, args.target).labels
    else:
        y = d.scores(args.target)
    model = fit(x, y, spec.boost_params)
    g = global_importance(model, x)
    if args.phi_csv:
        Path(args.phi_csv).write_text(shap_matrix_csv(g), encoding="utf-8")
    if args.beeswarm:
        Path(args.beeswarm).write_text(beeswarm_json(beeswarm_export(g, args.top_k)), encoding="utf-8")
    _emit(json.dumps(g.to_dict(), indent=1), args.out)


def cmd_report(args) -> None:
    results = []
    for path in args.results:
        results.extend(results_from_json(Path(path).read_text(encoding="utf-8")))
    _emit(report(results, args.format), args.out)


def _add_data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("data", help="survey CSV")
    p.add_argument("--schema", help="JSON mapping canonical field -> CSV column")
    p.add_argument("--catch", action="append", metavar="COL=VALUE",
                   help="drop respondents whose catch item differs from VALUE (repeatable)")


def _add_factor_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--factors", help="fitted factor model JSON (otherwise fitted on the data)")
    p.add_argument("--k", type=int, help="number of factors (default 5)")
    p.add_argument("--rotation", choices=("none", "varimax", "promax"))
    p.add_argument("--kappa", type=int, help="promax power (default 4)")


def _add_model_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--folds", type=int)
    p.add_argument("--rounds", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lambda", dest="reg_lambda", type=float)
    p.add_argument("--split", choices=("kfold", "shuffle_split"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="moralmusic", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic survey with planted structure")
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise-sd", type=float, default=0.5)
    p.add_argument("--missing-rate", type=float, default=0.0)
    p.add_argument("--catch-fail-rate", type=float, default=0.0)
    p.add_argument("--out", required=True, help="CSV path; truth sidecar is written beside it")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="load, validate and clean a survey CSV")
    _add_data_args(p)
    p.add_argument("--out", help="write the canonical dataset JSON here")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("factors", help="fit the genre factor model")
    _add_data_args(p)
    _add_factor_args(p)
    p.add_argument("--config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_factors)

    p = sub.add_parser("gs", help="generalist/specialist score per respondent")
    _add_data_args(p)
    _add_factor_args(p)
    p.add_argument("--config")
    p.add_argument("--weighting", choices=("rating", "count"), default="rating")
    p.add_argument("--out")
    p.set_defaults(func=cmd_gs)

    p = sub.add_parser("correlate", help="pairwise Spearman correlation report")
    _add_data_args(p)
    _add_factor_args(p)
    p.add_argument("--config")
    p.add_argument("--groups", default="genres,age,education,foundations",
                   help=f"comma-separated subset of {', '.join(REPORT_GROUPS)}")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--out")
    p.set_defaults(func=cmd_correlate)

    p = sub.add_parser("run", help="cross-validated experiments (EX1..EX6)")
    _add_data_args(p)
    _add_factor_args(p)
    _add_model_args(p)
    p.add_argument("--spec", nargs="+", default=["EX1"], help="experiment ids or 'all'")
    p.add_argument("--task", choices=("classification", "regression", "clf", "reg", "both"),
                   default="classification")
    p.add_argument("--format", choices=("json", "csv", "markdown"), default="json")
    p.add_argument("--out")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("shap", help="SHAP global importance and beeswarm export")
    _add_data_args(p)
    _add_factor_args(p)
    _add_model_args(p)
    p.add_argument("--spec", default="EX6")
    p.add_argument("--target", default="binding")
    p.add_argument("--task", choices=("classification", "regression", "clf", "reg"), default="classification")
    p.add_argument("--top-k", type=int, default=10)
    p.add_argument("--beeswarm", help="write beeswarm records JSON here")
    p.add_argument("--phi-csv", help="write the respondent x feature SHAP matrix here")
    p.add_argument("--out")
    p.set_defaults(func=cmd_shap)

    p = sub.add_parser("report", help="render saved results as tables")
    p.add_argument("results", nargs="+", help="JSON files written by 'run'")
    p.add_argument("--format", choices=("json", "csv", "markdown"), default="markdown")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ValueError, KeyError, FileNotFoundError, TypeError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
