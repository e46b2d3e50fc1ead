"""Command-line entry point.

Verbs: synth, ingest, split, train-baseline, predict, build-cases,
evaluate, report. All commands read one TOML config (--config) with CLI
overrides for seed/threshold/strategy/predictor; outputs land in a run
directory named by the config hash.

Exit codes: 0 success, 1 usage/config error, 2 data validation error,
3 transport error, 4 failure cap exceeded.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .baseline import fit, predict_prob, save_model
from .caselib import load_repository
from .cohort import (
    CATEGORICAL_FEATURES,
    CONTINUOUS_FEATURES,
    balance_test,
    ingest_csv,
    split as split_cohort,
    synth_cohort,
    write_csv,
)
from .config import RunConfig, load_config
from .errors import (
    ConfigError,
    FailureCapExceeded,
    SchemaError,
    TransportError,
    UsageError,
    ValidationError,
)
from .metrics import auroc
from .pipeline import run_build_cases, run_evaluate, run_predict, write_meta
from .reports import render_subgroup_csv, render_text, write_report_json
from .retrieval import fit_standardization

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_TRANSPORT = 3
EXIT_FAILURE_CAP = 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file", default=None)
    common.add_argument("--seed", type=int, default=None, help="override run.seed")
    common.add_argument("--threshold", type=float, default=None, help="override run.threshold")
    group = common.add_mutually_exclusive_group()
    group.add_argument("--mock", action="store_true", help="use the mock predictor")
    group.add_argument("--endpoint", action="store_true", help="use the configured endpoint")

    parser = _Parser(prog="faircap", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add_parser(name, **kwargs):
        return sub.add_parser(name, parents=[common], **kwargs)

    p = add_parser("synth", help="generate a synthetic cohort CSV")
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--out", default=None)

    p = add_parser("ingest", help="validate and normalize a cohort CSV")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--no-impute", action="store_true")

    p = add_parser("split", help="stratified train/test split")
    p.add_argument("--in", dest="infile", default=None)
    p.add_argument("--ratio", type=float, default=None)
    p.add_argument("--train-out", default=None)
    p.add_argument("--test-out", default=None)

    p = add_parser("train-baseline", help="fit the logistic comparator")
    p.add_argument("--train", default=None)
    p.add_argument("--model-out", default=None)

    p = add_parser("predict", help="predict for a cohort under one strategy")
    p.add_argument("--strategy", choices=("base", "fairness", "system2", "cap"), default="base")
    p.add_argument("--split", choices=("train", "test", "cohort"), default="test")
    p.add_argument("--cohort", default=None, help="explicit cohort CSV (overrides --split)")
    p.add_argument("--repository", default=None)
    p.add_argument("--model", default=None, help="baseline model file (predictor.kind=baseline)")
    p.add_argument("--out", default=None)
    p.add_argument("--no-resume", action="store_true")

    p = add_parser("build-cases", help="mine, judge and persist the case repository")
    p.add_argument("--train-preds", default=None)
    p.add_argument("--train", default=None)
    p.add_argument("--model", default=None)
    p.add_argument("--out", default=None)

    p = add_parser("evaluate", help="assemble the bias report from prediction files")
    p.add_argument(
        "--pred",
        action="append",
        default=None,
        metavar="STRATEGY=PATH",
        help="prediction file override (repeatable)",
    )
    p.add_argument("--alias-file", default=None)
    p.add_argument("--out-dir", default=None)

    p = add_parser("report", help="re-render an existing report")
    p.add_argument("--report", default=None)
    p.add_argument("--format", choices=("text", "csv", "json"), default="text")
    p.add_argument("--out", default=None)
    return parser


def _config_from_args(args) -> RunConfig:
    overrides: dict = {}
    if args.seed is not None:
        overrides.setdefault("run", {})["seed"] = args.seed
    if args.threshold is not None:
        overrides.setdefault("run", {})["threshold"] = args.threshold
    if args.mock:
        overrides.setdefault("predictor", {})["kind"] = "mock"
    if args.endpoint:
        overrides.setdefault("predictor", {})["kind"] = "endpoint"
    return load_config(args.config, overrides)


def _run_path(config: RunConfig, name: str, override: str | None) -> Path:
    if override:
        return Path(override)
    run_dir = config.run_dir()
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir / name


def _load_cohort(path: Path):
    result = ingest_csv(str(path), impute=True)
    return result.records


def _cmd_synth(args, config: RunConfig) -> int:
    n = args.n if args.n is not None else config.cohort_n
    records = synth_cohort(n, config.seed, config.cohort_bias())
    out = _run_path(config, "cohort.csv", args.out)
    write_csv(records, str(out))
    write_meta(out, config, "synth")
    prevalence = sum(r.died_in_hospital for r in records) / len(records)
    print(f"wrote {len(records)} records to {out} (mortality {prevalence:.3f})")
    return EXIT_OK


def _cmd_ingest(args, config: RunConfig) -> int:
    result = ingest_csv(args.infile, impute=not args.no_impute)
    out = _run_path(config, "cohort.csv", args.out)
    write_csv(result.records, str(out))
    write_meta(out, config, "ingest")
    print(f"accepted {len(result.records)} records -> {out}")
    if result.rejected:
        print(f"rejected {len(result.rejected)} row(s):", file=sys.stderr)
        for reject in result.rejected:
            print(f"  row {reject.row}: {reject.reason}", file=sys.stderr)
    return EXIT_OK


def _cmd_split(args, config: RunConfig) -> int:
    infile = args.infile or str(_run_path(config, "cohort.csv", None))
    ratio = args.ratio if args.ratio is not None else config.split_ratio
    cohort = _load_cohort(Path(infile))
    result = split_cohort(cohort, ratio, config.seed)
    train_out = _run_path(config, "train.csv", args.train_out)
    test_out = _run_path(config, "test.csv", args.test_out)
    write_csv(result.train, str(train_out))
    write_csv(result.test, str(test_out))
    write_meta(train_out, config, "split")
    write_meta(test_out, config, "split")
    print(f"train {len(result.train)} -> {train_out}")
    print(f"test  {len(result.test)} -> {test_out}")
    print(f"{'feature':<18}{'kind':<12}{'statistic':>12}{'p':>10}")
    for feature in CONTINUOUS_FEATURES + CATEGORICAL_FEATURES:
        try:
            res = balance_test(result, feature)
            print(f"{feature:<18}{res.kind:<12}{res.statistic:>12.4f}{res.p_value:>10.4f}")
        except ValidationError as exc:
            print(f"{feature:<18}{'skipped':<12}  {exc}")
    return EXIT_OK


def _cmd_train_baseline(args, config: RunConfig) -> int:
    train_path = Path(args.train or _run_path(config, "train.csv", None))
    records = _load_cohort(train_path)
    model = fit(records, config.fit_config())
    out = _run_path(config, "baseline_model.json", args.model_out)
    save_model(model, str(out))
    write_meta(out, config, "train-baseline")
    scores = [predict_prob(model, r) for r in records]
    labels = [r.died_in_hospital for r in records]
    print(
        f"model -> {out} | final loss {model.loss_history[-1]:.6f} | "
        f"train AUROC {auroc(scores, labels):.4f}"
    )
    return EXIT_OK


def _cmd_predict(args, config: RunConfig) -> int:
    if args.cohort:
        cohort_path = Path(args.cohort)
        split_name = "cohort"
    else:
        split_name = args.split
        cohort_path = _run_path(config, f"{args.split}.csv", None)
    if not cohort_path.exists():
        raise ConfigError(f"cohort file not found: {cohort_path}")
    cohort = _load_cohort(cohort_path)
    repository = None
    if args.strategy == "cap":
        repo_path = Path(args.repository or _run_path(config, "repository.jsonl", None))
        if not repo_path.exists():
            raise ConfigError(f"cap strategy requires a repository file: {repo_path}")
        repository = load_repository(str(repo_path))
    out = _run_path(config, f"predictions_{split_name}_{args.strategy}.jsonl", args.out)
    model_path = Path(args.model) if args.model else _run_path(config, "baseline_model.json", None)
    summary = run_predict(
        config,
        cohort,
        args.strategy,
        out,
        split_name=split_name,
        repository=repository,
        model_path=model_path,
        resume=not args.no_resume,
    )
    print(
        f"{out}: +{summary['new_rows']} rows ({summary['skipped']} resumed, "
        f"{summary['failures']} failed, {summary['fallbacks']} fallbacks)"
    )
    return EXIT_OK


def _cmd_build_cases(args, config: RunConfig) -> int:
    train_path = Path(args.train or _run_path(config, "train.csv", None))
    preds_path = Path(args.train_preds or _run_path(config, "predictions_train_base.jsonl", None))
    if not preds_path.exists():
        raise ConfigError(f"training predictions not found: {preds_path} (run predict --split train)")
    train_cohort = _load_cohort(train_path)
    standardization = fit_standardization(train_cohort, config.retrieval_config())
    out = _run_path(config, "repository.jsonl", args.out)
    model_path = Path(args.model) if args.model else _run_path(config, "baseline_model.json", None)
    repo = run_build_cases(config, preds_path, train_cohort, out, standardization, model_path)
    biased = sum(1 for c in repo.cases if c.bias_type != "none")
    print(f"repository -> {out}: {len(repo.cases)} case(s), {biased} bias-typed")
    return EXIT_OK


def _cmd_evaluate(args, config: RunConfig) -> int:
    paths: dict[str, Path] = {}
    if args.pred:
        for item in args.pred:
            if "=" not in item:
                raise UsageError(f"--pred expects STRATEGY=PATH, got {item!r}")
            strategy, path = item.split("=", 1)
            paths[strategy.strip()] = Path(path)
    else:
        for strategy in config.strategies:
            paths[strategy] = _run_path(config, f"predictions_test_{strategy}.jsonl", None)
    report = run_evaluate(
        config, paths, alias_file=Path(args.alias_file) if args.alias_file else None
    )
    out_dir = Path(args.out_dir) if args.out_dir else config.run_dir()
    out_dir.mkdir(parents=True, exist_ok=True)
    write_report_json(report, out_dir / "report.json")
    text = render_text(report)
    (out_dir / "report.txt").write_text(text, encoding="utf-8")
    (out_dir / "subgroup_panel.csv").write_text(render_subgroup_csv(report), encoding="utf-8")
    print(text, end="")
    print(f"report -> {out_dir / 'report.json'}")
    return EXIT_OK


def _cmd_report(args, config: RunConfig) -> int:
    import json as _json

    report_path = Path(args.report or _run_path(config, "report.json", None))
    if not report_path.exists():
        raise ConfigError(f"report file not found: {report_path} (run evaluate first)")
    with open(report_path, encoding="utf-8") as fh:
        report = _json.load(fh)
    if args.format == "text":
        rendered = render_text(report)
    elif args.format == "csv":
        rendered = render_subgroup_csv(report)
    else:
        rendered = _json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(rendered, encoding="utf-8")
        print(f"wrote {args.out}")
    else:
        print(rendered, end="")
    return EXIT_OK


_COMMANDS = {
    "synth": _cmd_synth,
    "ingest": _cmd_ingest,
    "split": _cmd_split,
    "train-baseline": _cmd_train_baseline,
    "predict": _cmd_predict,
    "build-cases": _cmd_build_cases,
    "evaluate": _cmd_evaluate,
    "report": _cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        config = _config_from_args(args)
        return _COMMANDS[args.command](args, config)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SchemaError, ValidationError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TransportError as exc:
        print(f"transport error: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT
    except FailureCapExceeded as exc:
        print(f"failure cap exceeded: {exc}", file=sys.stderr)
        return EXIT_FAILURE_CAP
    except FileNotFoundError as exc:
        print(f"file not found: {exc.filename}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
