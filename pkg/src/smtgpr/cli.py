"""Command-line interface: ``smtgpr <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .experiment import (
    METHODS,
    SMTGPR,
    ExperimentConfig,
    canonical_method,
    evaluate,
    experiment_data,
    fit_method,
    load_config,
    run_experiment,
)
from .io import FORMATS, convert_matrix, load_matrix, load_model, save_matrix, save_model

log = logging.getLogger("smtgpr")

_EXT = {"csv": ".csv", "binary-v1": ".kgpm"}


def _config(args):
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _common(p, *, method=False, p_flag=False, fmt=False, out_help="output path"):
    p.add_argument("--config", metavar="PATH", help="YAML experiment config (defaults apply when omitted)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", metavar="PATH", help=out_help)
    if method:
        p.add_argument("--method", help=f"one of {', '.join(METHODS)} (case-insensitive)")
    if p_flag:
        p.add_argument("--p", type=int, help="number of basis components for S-MTGPR")
    if fmt:
        p.add_argument("--format", choices=FORMATS, help="matrix file format")


def build_parser():
    parser = argparse.ArgumentParser(prog="smtgpr", description="Scalable multi-task GP regression toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    _common(p, fmt=True, out_help="output directory (default: data)")

    p = sub.add_parser("fit", help="fit one method on the config's training data and save the model")
    _common(p, method=True, p_flag=True, out_help="model file to write (default: model.kgpmodel)")

    p = sub.add_parser("predict", help="predict with a saved model")
    _common(p, fmt=True, out_help="output directory for mean and variance (default: prediction)")
    p.add_argument("--model", required=True, metavar="PATH", help="model file written by `fit`")
    p.add_argument("--x", required=True, metavar="PATH", help="test covariate matrix")

    p = sub.add_parser("eval", help="score a saved model on the config's test data")
    _common(p, out_help="JSON metrics file (printed to stdout when omitted)")
    p.add_argument("--model", required=True, metavar="PATH", help="model file written by `fit`")

    p = sub.add_parser("bench", help="run the full experiment and write CSV + JSONL reports")
    _common(p, method=True, p_flag=True, out_help="report path stem (default: config output or 'report')")

    p = sub.add_parser("convert", help="convert a matrix between csv and binary-v1")
    p.add_argument("input", help="source matrix file")
    p.add_argument("output", help="destination matrix file")
    p.add_argument("--format", choices=FORMATS, help="destination format (default: from extension)")
    p.add_argument("--input-format", choices=FORMATS, help="source format (default: from extension or magic)")
    p.add_argument("--header", action="store_true", help="the CSV input has a header row")
    return parser


def cmd_gen_data(args):
    cfg = _config(args)
    if cfg.synthetic is None:
        raise ValueError("gen-data needs a synthetic data source in the config")
    from .synthetic import generate_synthetic

    data = generate_synthetic(cfg.synthetic, cfg.seed)
    fmt = args.format or "csv"
    out = Path(args.out or "data")
    names = ("x_train", "y_train", "x_test", "y_test", "labels")
    for name, arr in zip(names, data):
        save_matrix(out / f"{name}{_EXT[fmt]}", np.asarray(arr, dtype=np.float64), fmt)
    print(f"wrote {len(names)} matrices to {out}")


def cmd_fit(args):
    cfg = _config(args)
    method = canonical_method(args.method or SMTGPR)
    p = args.p if args.p is not None else (cfg.p_grid[0] if method == SMTGPR else None)
    x_train, y_train, x_test, _, _ = experiment_data(cfg, 0)
    means = y_train.mean(axis=0)
    res = fit_method(cfg, method, x_train, y_train - means, x_test[:1], p=p)
    out = Path(args.out or "model.kgpmodel")
    save_model(out, res.model, offset=means)
    print(
        f"{method} fitted in {res.optimization_seconds:.3f}s; final L = {res.model.final_lml:.6g}; "
        f"{res.model.parameter_count} parameters; model written to {out}"
    )
    for w in res.warnings:
        print(f"warning: {w}", file=sys.stderr)


def cmd_predict(args):
    model, offset = load_model(args.model, with_offset=True)
    x = load_matrix(args.x)
    pred = model.predict(x)
    mean = pred.mean if offset is None else pred.mean + offset
    fmt = args.format or "csv"
    out = Path(args.out or "prediction")
    save_matrix(out / f"mean{_EXT[fmt]}", mean, fmt)
    save_matrix(out / f"variance{_EXT[fmt]}", pred.variance_diag, fmt)
    save_matrix(out / f"noise_variance{_EXT[fmt]}", np.atleast_1d(pred.noise_variance), fmt)
    print(f"wrote predictions for {x.shape[0]} samples to {out}")


def cmd_eval(args):
    cfg = _config(args)
    model, offset = load_model(args.model, with_offset=True)
    _, _, x_test, y_test, labels = experiment_data(cfg, 0)
    pred = model.predict(x_test)
    y = y_test if offset is None else y_test - offset
    ev = evaluate(pred, y, labels, cfg.scoring)
    metrics = {
        "mean_r2": ev.r2,
        "auc": ev.auc,
        "r2_masked_tasks": ev.r2_masked,
        "n_test": int(len(labels)),
        "warnings": ev.warnings,
    }
    metrics = {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in metrics.items()}
    text = json.dumps(metrics, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)


def cmd_bench(args):
    cfg = _config(args)
    if args.method:
        cfg = dataclasses.replace(cfg, methods=(canonical_method(args.method),))
    if args.p is not None:
        cfg = dataclasses.replace(cfg, p_grid=(args.p,))
    stem = args.out or cfg.output or "report"
    report = run_experiment(cfg, output=stem)
    for r in report.aggregates:
        if r.repetition == "mean":
            p = "" if r.p is None else f" P={r.p}"
            print(
                f"{r.method}{p}: opt {r.optimization_seconds:.3f}s pred {r.prediction_seconds:.3f}s "
                f"R2 {r.mean_r2:.3f} AUC {r.auc:.3f}"
            )
    print(f"report written to {report.csv_path} and {report.jsonl_path}")


def cmd_convert(args):
    out = convert_matrix(args.input, args.output, args.input_format, args.format, header=args.header)
    print(f"wrote {out}")


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "fit": cmd_fit,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "convert": cmd_convert,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        _COMMANDS[args.command](args)
    except Exception as exc:
        print(f"smtgpr {args.command}: error: {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
