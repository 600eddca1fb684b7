"""Batch command-line runner.

Subcommands: ingest, split, fit, confidence, curve, diagnose, exceptions,
adaptive, synth, claims.  Every command writes a JSON report (plus CSV and
text renderings) into the output directory and prints the selected format
to stdout.  Relative data paths also resolve against $GATECHECK_DATA_DIR.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import confidence as conf_mod
from . import diagnostics as diag
from . import exception_shift as exc_mod
from .data import load_movielens, load_outcome_stream, make_split, write_outcome_stream
from .errors import GatecheckError
from .models import fit_als, load_model, predict_many, rmse, save_model
from .reports import envelope, render_text, table, write_report
from .runner import (ExperimentConfig, resolve_data_path, run_adaptive, run_claims,
                     run_diagnose, run_synth)

__all__ = ["main", "build_parser"]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gatecheck",
        description="Decide whether a confidence gate over a ranked decision "
                    "system will be monotonically beneficial.")
    parser.add_argument("--config", type=Path, default=None,
                        help="JSON experiment config (defaults are built in)")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the backbone seed")
    parser.add_argument("--out", type=Path, default=None,
                        help="output directory (default: config output_dir)")
    parser.add_argument("--format", choices=("json", "csv", "text"), default="text",
                        help="what to print on stdout (files are always written)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate a ratings file and summarize it")
    p.add_argument("--data", type=Path, default=None, help="ratings file (overrides config)")

    p = sub.add_parser("split", help="build a split and report its shape")
    p.add_argument("--data", type=Path, default=None)
    p.add_argument("--kind", choices=("temporal", "cold_user", "cold_item"),
                   default="temporal")

    p = sub.add_parser("fit", help="fit the factorization backbone and save it")
    p.add_argument("--data", type=Path, default=None)
    p.add_argument("--kind", choices=("temporal", "cold_user", "cold_item"),
                   default="temporal")
    p.add_argument("--model-out", type=Path, default=None,
                   help="model file path (default: <out>/model_<kind>.txt)")

    p = sub.add_parser("confidence", help="compute a confidence signal and export it")
    p.add_argument("--data", type=Path, default=None)
    p.add_argument("--kind", choices=("temporal", "cold_user", "cold_item"),
                   default="temporal")
    p.add_argument("--signal", choices=conf_mod.SIGNAL_KINDS, default="count_based")
    p.add_argument("--model", type=Path, default=None,
                   help="reuse a saved backbone instead of refitting")

    p = sub.add_parser("curve", help="abstention curve from a confidence/outcome stream")
    p.add_argument("--stream", type=Path, required=True,
                   help="CSV confidence,outcome (outcome: correctness, or residual "
                        "in regression mode)")
    p.add_argument("--mode", choices=("accuracy", "regression"), default="accuracy")

    p = sub.add_parser("diagnose", help="C1/C2/calibration verdict for a stream")
    p.add_argument("--stream", type=Path, required=True)
    p.add_argument("--mode", choices=("accuracy", "regression"), default="accuracy")
    p.add_argument("--bins", type=int, default=5)

    p = sub.add_parser("exceptions", help="residual-exception shift and classifier decay")
    p.add_argument("--data", type=Path, default=None)
    p.add_argument("--kind", choices=("temporal", "cold_user", "cold_item"),
                   default="temporal")

    sub.add_parser("adaptive", help="sequential-block recalibration experiment")

    p = sub.add_parser("synth", help="structural/contextual checks on synthetic worlds")
    p.add_argument("--kind", choices=("structural", "contextual"), default=None)
    p.add_argument("--spec", type=Path, default=None, help="world spec file")
    p.add_argument("--seeds", type=int, default=10, help="number of world seeds")

    sub.add_parser("claims", help="the full table suite on the configured dataset")
    return parser


def _load_config(args) -> ExperimentConfig:
    if args.config is not None:
        raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
        config = ExperimentConfig.from_dict(raw)
    else:
        config = ExperimentConfig()
    if args.seed is not None:
        config.backbone = type(config.backbone)(**{**vars(config.backbone), "seed": args.seed})
    if getattr(args, "data", None):
        config.dataset = str(args.data)
    if args.out is not None:
        config.output_dir = str(args.out)
    return config


def _emit(report: dict, config_out: str, name: str, fmt: str) -> None:
    paths = write_report(report, config_out, name)
    if fmt == "json":
        print(json.dumps(report, indent=2, sort_keys=True))
    elif fmt == "text":
        print(render_text(report), end="")
    else:
        for path in paths:
            if path.suffix == ".csv":
                print(path.read_text(encoding="utf-8"), end="")
    print(f"[reports written to {Path(config_out).resolve()}]", file=sys.stderr)


def _cmd_ingest(args, config: ExperimentConfig) -> int:
    records = load_movielens(resolve_data_path(config.dataset))
    users = {r.user_id for r in records}
    items = {r.item_id for r in records}
    tables = {"summary": table(
        ["records", "users", "items", "min_ts", "max_ts"],
        [[len(records), len(users), len(items),
          min((r.timestamp for r in records), default=None),
          max((r.timestamp for r in records), default=None)]])}
    report = envelope("ingest", {"dataset": config.dataset}, {}, tables)
    _emit(report, config.output_dir, "ingest", args.format)
    return 0


def _cmd_split(args, config: ExperimentConfig) -> int:
    records = load_movielens(resolve_data_path(config.dataset))
    split = make_split(records, config.splits[args.kind])
    tables = {"split": table(
        ["kind", "n_train", "n_test", "train_users", "train_items"],
        [[args.kind, split.n_train, split.n_test,
          len(split.user_counts), len(split.item_counts)]])}
    report = envelope("split", config.to_dict(), config.seeds(), tables)
    _emit(report, config.output_dir, f"split_{args.kind}", args.format)
    return 0


def _fit_split_model(config: ExperimentConfig, kind: str):
    records = load_movielens(resolve_data_path(config.dataset))
    split = make_split(records, config.splits[kind])
    bb = config.backbone
    model = fit_als(split.train, rank=bb.rank, lam=bb.lam,
                    iterations=bb.iterations, seed=bb.seed)
    return split, model


def _cmd_fit(args, config: ExperimentConfig) -> int:
    split, model = _fit_split_model(config, args.kind)
    out_path = args.model_out or Path(config.output_dir) / f"model_{args.kind}.txt"
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    save_model(model, out_path)
    actual = [r.rating for r in split.test]
    tables = {"fit": table(
        ["kind", "train_rmse", "test_rmse", "model_path"],
        [[args.kind,
          round(rmse(predict_many(model, split.train), [r.rating for r in split.train]), 6),
          round(rmse(predict_many(model, split.test), actual), 6), str(out_path)]])}
    report = envelope("fit", config.to_dict(), config.seeds(), tables)
    _emit(report, config.output_dir, f"fit_{args.kind}", args.format)
    return 0


def _cmd_confidence(args, config: ExperimentConfig) -> int:
    records = load_movielens(resolve_data_path(config.dataset))
    split = make_split(records, config.splits[args.kind])
    if args.model is not None:
        model = load_model(args.model)
    else:
        bb = config.backbone
        model = fit_als(split.train, rank=bb.rank, lam=bb.lam,
                        iterations=bb.iterations, seed=bb.seed)
    cc = config.confidence
    if args.signal == "count_based":
        signal = conf_mod.count_confidence(split)
    elif args.signal == "ensemble":
        signal = conf_mod.ensemble_confidence(split.train, split.test, config.backbone.rank,
                                              config.backbone.lam, config.backbone.iterations,
                                              cc.ensemble_seeds)
    elif args.signal == "recency":
        signal = conf_mod.recency_confidence(split, model, cc.window_days, cc.l2,
                                             cc.protocol_seed)
    elif args.signal == "residual_predicted":
        signal = conf_mod.residual_predicted_confidence(split, model, cc.l2, cc.protocol_seed)
    elif args.signal == "combined_struct_recency":
        signal = conf_mod.combined_confidence(split, model, cc.window_days, cc.l2,
                                              cc.protocol_seed)
    else:
        signal = conf_mod.random_confidence(split.n_test, cc.random_seed)

    pred = (signal.predictions if signal.predictions is not None
            else predict_many(model, split.test)[signal.case_indices])
    actual = np.fromiter((r.rating for r in split.test), dtype=float,
                         count=split.n_test)[signal.case_indices]
    correct = (np.abs(pred - actual) <= config.diagnostics.accuracy_tolerance).astype(float)
    # exported confidence is min-max normalized so the stream format's [0,1]
    # contract holds for every signal kind; rank order is what matters
    lo, hi = float(signal.scores.min()), float(signal.scores.max())
    exported = (signal.scores - lo) / (hi - lo) if hi > lo else np.full(len(signal.scores), 0.5)
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stream_path = out_dir / f"signal_{args.kind}_{args.signal}.csv"
    write_outcome_stream(stream_path, exported, correct)

    tables = {"signal": table(
        ["kind", "signal", "cases", "stream_path", *(["warning"] if signal.warnings else [])],
        [[args.kind, args.signal, len(signal.scores), str(stream_path),
          *(["; ".join(signal.warnings)] if signal.warnings else [])]])}
    report = envelope("confidence", config.to_dict(), config.seeds(), tables, signal.warnings)
    _emit(report, config.output_dir, f"confidence_{args.kind}_{args.signal}", args.format)
    return 0


def _cmd_curve(args, config: ExperimentConfig) -> int:
    stream = load_outcome_stream(resolve_data_path(args.stream))
    if args.mode == "accuracy":
        curve = diag.abstention_curve(stream.outcome, stream.outcome, stream.confidence,
                                      config.fractions, metric="accuracy")
    else:
        # regression stream carries residuals; RMSE of residuals against zero
        curve = diag.abstention_curve(stream.outcome, np.zeros(len(stream)),
                                      stream.confidence, config.fractions, metric="rmse")
    frac_cols = [f"{int(round(f * 100))}%" for f in curve.fractions]
    tables = {"curve": table(
        ["metric", *frac_cols, "violations", "negligible"],
        [[curve.metric, *[round(float(v), 6) for v in curve.values],
          curve.violation_count, curve.negligible_violation_count]]),
        "coverage": table(["fraction", "coverage", "retained"],
                          [[f, float(c), int(r)] for f, c, r in
                           zip(curve.fractions, curve.coverages, curve.retained_counts)])}
    report = envelope("curve", {"stream": str(args.stream), "mode": args.mode},
                      {}, tables)
    _emit(report, config.output_dir, "curve", args.format)
    return 0


def _cmd_diagnose(args, config: ExperimentConfig) -> int:
    report, verdict = run_diagnose(args.stream, args.mode, args.bins,
                                   config.diagnostics.ece_bins)
    _emit(report, config.output_dir, "diagnose", args.format)
    print(f"verdict: {verdict}")
    return 0


def _cmd_exceptions(args, config: ExperimentConfig) -> int:
    split, model = _fit_split_model(config, args.kind)
    report_data = exc_mod.analyze_exceptions(split, model, l2=config.confidence.l2)
    pred = predict_many(model, split.test)
    actual = np.fromiter((r.rating for r in split.test), dtype=float, count=split.n_test)
    fpfn = exc_mod.fp_fn_ratio(pred, actual, config.diagnostics.fp_fn_thresholds)
    tables = {
        "exceptions": table(
            ["kind", "tau", "train_rate", "test_rate", "ks_stat", "ks_p",
             "auc_train", "auc_test"],
            [[args.kind, round(report_data.tau, 6), round(report_data.train_rate, 6),
              round(report_data.test_rate, 6), round(report_data.ks_stat, 6),
              report_data.ks_p, round(report_data.auc_train, 6),
              round(report_data.auc_test, 6)]]),
        "fp_fn_ratio": table(
            ["threshold", "tp", "fp", "fn", "tn", "ratio"],
            [[e.threshold, e.tp, e.fp, e.fn, e.tn,
              None if e.ratio is None else round(e.ratio, 6)] for e in fpfn.entries]),
    }
    report = envelope("exceptions", config.to_dict(), config.seeds(), tables)
    _emit(report, config.output_dir, f"exceptions_{args.kind}", args.format)
    return 0


def _cmd_adaptive(args, config: ExperimentConfig) -> int:
    report = run_adaptive(config)
    _emit(report, config.output_dir, "adaptive", args.format)
    return 0


def _cmd_synth(args, config: ExperimentConfig) -> int:
    if args.kind is None and args.spec is None:
        reports = [run_synth("structural", n_seeds=args.seeds),
                   run_synth("contextual", n_seeds=args.seeds)]
    else:
        reports = [run_synth(args.kind, args.spec, n_seeds=args.seeds)]
    for report in reports:
        _emit(report, config.output_dir, f"synth_{report['header']['config']['kind']}",
              args.format)
        print(report["summary"])
    return 0


def _cmd_claims(args, config: ExperimentConfig) -> int:
    report, exit_code = run_claims(config)
    _emit(report, config.output_dir, "claims", args.format)
    warn = [n for n in report["notes"] if n.startswith("WARN")]
    hard = [n for n in report["notes"] if n.startswith("HARD-FAIL")]
    if warn:
        print(f"{len(warn)} WARN note(s); see report notes", file=sys.stderr)
    if hard:
        print(f"{len(hard)} hard failure(s); see report notes", file=sys.stderr)
    return exit_code


_COMMANDS = {
    "ingest": _cmd_ingest,
    "split": _cmd_split,
    "fit": _cmd_fit,
    "confidence": _cmd_confidence,
    "curve": _cmd_curve,
    "diagnose": _cmd_diagnose,
    "exceptions": _cmd_exceptions,
    "adaptive": _cmd_adaptive,
    "synth": _cmd_synth,
    "claims": _cmd_claims,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = _load_config(args)
        return _COMMANDS[args.command](args, config)
    except GatecheckError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
