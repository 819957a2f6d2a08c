"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numerical
failure (non-finite loss or a failed self-check).
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .analysis import SWEEP_KEYS, attention_summary, run_sweep, stage_adjacency
from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig, format_config, load_config
from .data import STAGES, SyntheticSpec, generate_synthetic, load_dataset, save_dataset
from .errors import (DimensionError, EvaluationError, FormatError, LabelError, OrderingError,
                     ParameterError, ParseError)
from .metrics import Metrics
from .selfcheck import run_all
from .training import HISTORY_COLUMNS, cross_validate, evaluate, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("mstgcn")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


# -- CSV helpers ----------------------------------------------------------------------

def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path, header, rows, comment: str | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if comment:
            for line in comment.splitlines():
                fh.write(f"# {line}\n")
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def write_history(path, history: list, extra: dict | None = None) -> None:
    extra = extra or {}
    header = list(extra) + list(HISTORY_COLUMNS)
    write_csv(path, header, [[*extra.values(), *(row[c] for c in HISTORY_COLUMNS)] for row in history])


def metrics_row(label: str, m: Metrics) -> list:
    return [label, m.n, m.accuracy, m.macro_f1, m.kappa, *m.per_class_f1]


METRIC_HEADER = ["split", "n", "accuracy", "macro_f1", "kappa"] + [f"f1_{s}" for s in STAGES]


# -- config handling ---------------------------------------------------------------------

def add_config_flags(parser) -> None:
    parser.add_argument("--config", help="key = value configuration file")
    group = parser.add_argument_group("configuration overrides")
    for f in fields(TrainConfig):
        group.add_argument(f"--{f.name.replace('_', '-')}", dest=f"cfg_{f.name}", metavar=f.type.upper())


def resolve_config(args) -> TrainConfig:
    text = ""
    if args.config:
        try:
            text = Path(args.config).read_text(encoding="utf-8")
        except OSError as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
    overrides = {f.name: getattr(args, f"cfg_{f.name}") for f in fields(TrainConfig)
                 if getattr(args, f"cfg_{f.name}") is not None}
    try:
        return load_config(text, overrides)
    except (ParseError, ParameterError, TypeError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(path):
    try:
        return load_dataset(path)
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from None


# -- commands -----------------------------------------------------------------------------

def cmd_synth_data(args) -> int:
    spec = SyntheticSpec(subjects=args.subjects, epochs_per_subject=args.epochs, channels=args.channels,
                         bias_strength=args.bias, noise_sigma=args.noise, seed=args.seed,
                         samples_per_epoch=args.samples)
    try:
        spec.validate()
    except ParameterError as exc:
        raise UsageError(str(exc)) from None
    dataset = generate_synthetic(spec)
    save_dataset(dataset, args.output)
    print(f"wrote {len(dataset)} epochs ({dataset.n_channels} channels, {len(dataset.subjects)} subjects) "
          f"to {args.output}")
    return EXIT_OK


def _run_meta(dataset, result) -> dict:
    return {"channels": ",".join(dataset.channel_names),
            "domain_subjects": ",".join(str(s) for s in result.domain_subjects)}


def cmd_train(args) -> int:
    config = resolve_config(args)
    dataset = _load(args.data)
    out = _out_dir(args.output)
    cfg_text = format_config(config)
    (out / "effective.cfg").write_text(cfg_text, encoding="utf-8")
    result = train(dataset, config)
    write_history(out / "history.csv", result.history)
    rows = [metrics_row("train", evaluate(result.model, dataset, warn=False).metrics)]
    if args.test_data:
        rows.append(metrics_row("test", evaluate(result.model, _load(args.test_data), warn=False).metrics))
    write_csv(out / "metrics.csv", METRIC_HEADER, rows)
    save_checkpoint(out / "model.ckpt", result.model, cfg_text, _run_meta(dataset, result))
    print(f"trained {len(result.history)} epochs; outputs in {out}")
    return EXIT_OK


def cmd_cross_validate(args) -> int:
    config = resolve_config(args)
    dataset = _load(args.data)
    out = _out_dir(args.output)
    cfg_text = format_config(config)
    (out / "effective.cfg").write_text(cfg_text, encoding="utf-8")
    try:
        cv = cross_validate(dataset, args.folds, config, jobs=args.jobs, keep_models=True)
    except ParameterError as exc:
        raise UsageError(str(exc)) from None
    header = ["fold"] + list(HISTORY_COLUMNS)
    write_csv(out / "history.csv", header,
              [[f.split.fold, *(row[c] for c in HISTORY_COLUMNS)] for f in cv.folds for row in f.history])
    rows = [metrics_row(f"fold{f.split.fold}", f.metrics) for f in cv.folds]
    rows.append(metrics_row("pooled", cv.pooled))
    write_csv(out / "metrics.csv", METRIC_HEADER, rows)
    summary = cv.summary()
    write_csv(out / "summary.csv", ["metric", "mean", "std"],
              [[k, summary[f"{k}_mean"], summary[f"{k}_std"]] for k in ("accuracy", "macro_f1", "kappa")])
    write_csv(out / "folds.csv", ["fold", "train_subjects", "test_subjects"],
              [[f.split.fold, " ".join(map(str, f.split.train_subjects)),
                " ".join(map(str, f.split.test_subjects))] for f in cv.folds])
    for f in cv.folds:
        meta = {"channels": ",".join(dataset.channel_names),
                "domain_subjects": ",".join(map(str, f.split.train_subjects))}
        save_checkpoint(out / f"fold{f.split.fold}.ckpt", f.model, cfg_text, meta)
    print(f"{args.folds}-fold accuracy {summary['accuracy_mean']:.4f} +/- {summary['accuracy_std']:.4f}, "
          f"pooled {cv.pooled.accuracy:.4f}; outputs in {out}")
    return EXIT_OK


def _model_and_data(args):
    model, config, meta = load_checkpoint(args.model)
    dataset = _load(args.data)
    channels = meta.get("channels")
    if channels and channels.split(",") != list(dataset.channel_names):
        raise DimensionError(f"model channels {channels} differ from dataset channels "
                             f"{','.join(dataset.channel_names)}")
    return model, config, dataset


def cmd_eval(args) -> int:
    model, _, dataset = _model_and_data(args)
    m = evaluate(model, dataset, warn=False).metrics
    if args.output:
        write_csv(args.output, METRIC_HEADER, [metrics_row("eval", m)])
    print(f"accuracy {m.accuracy:.4f}  macro-F1 {m.macro_f1:.4f}  kappa {m.kappa:.4f}  (n={m.n})")
    return EXIT_OK


def cmd_export_adjacency(args) -> int:
    model, _, dataset = _model_and_data(args)
    if model.config.adjacency != "learned":
        raise UsageError("export-adjacency needs a model trained with adjacency = learned")
    out = _out_dir(args.output)
    names = list(dataset.channel_names)
    for stage, (matrix, count) in stage_adjacency(model, dataset).items():
        comment = (f"mean learned adjacency of the centre epoch over the {count} correctly classified "
                   f"windows of true stage {stage}; rows are source channels")
        write_csv(out / f"adjacency_{stage}.csv", ["channel"] + names,
                  [[nm, *row] for nm, row in zip(names, matrix)], comment)
    print(f"wrote per-stage adjacency matrices to {out}")
    return EXIT_OK


def cmd_export_attention(args) -> int:
    model, _, dataset = _model_and_data(args)
    out = _out_dir(args.output)
    summary = attention_summary(model, dataset, layer=args.layer)
    d = model.config.d
    offsets = list(range(-d, d + 1))
    for view in ("fc", "dc"):
        write_csv(out / f"temporal_attention_{view}.csv",
                  ["offset"] + [f"to_{o:+d}" for o in offsets],
                  [[o, *row] for o, row in zip(offsets, summary["temporal"][view])],
                  f"mean temporal attention of layer {args.layer}, {view} view; each row sums to 1")
        write_csv(out / f"spatial_attention_{view}.csv", ["stage", "windows"] + list(dataset.channel_names),
                  [[s, int(c), *row] for s, c, row in zip(STAGES, summary["counts"], summary["spatial"][view])],
                  f"mean column weight of the spatial attention of layer {args.layer}, {view} view")
    print(f"wrote attention summaries to {out}")
    return EXIT_OK


def _int_list(text):
    return [int(v) for v in text.split(",") if v.strip()]


def _float_list(text):
    return [float(v) for v in text.split(",") if v.strip()]


def cmd_sweep(args) -> int:
    config = resolve_config(args)
    dataset = _load(args.data)
    out = _out_dir(args.output)
    (out / "effective.cfg").write_text(format_config(config), encoding="utf-8")
    try:
        grid = {"layers": _int_list(args.grid_layers), "time_filters": _int_list(args.grid_kernels),
                "K": _int_list(args.grid_K), "lam": _float_list(args.grid_lam),
                "adjacency": [v.strip() for v in args.grid_adjacency.split(",") if v.strip()]}
    except ValueError as exc:
        raise UsageError(f"bad grid value: {exc}") from None
    grid = {k: v for k, v in grid.items() if v}
    try:
        rows = run_sweep(dataset, config, grid, n_folds=args.folds, jobs=args.jobs)
    except ParameterError as exc:
        raise UsageError(str(exc)) from None
    keys = [k for k in SWEEP_KEYS if k in grid]
    write_csv(out / "sweep.csv", keys + ["accuracy", "macro_f1", "kappa"],
              [[r[k] for k in keys] + [r["accuracy"], r["macro_f1"], r["kappa"]] for r in rows])
    print(f"evaluated {len(rows)} configurations; table in {out / 'sweep.csv'}")
    return EXIT_OK


def cmd_self_check(args) -> int:
    results = run_all(seed=args.seed)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status}  {r.name:<36} error {r.error:.3e} (tolerance {r.tolerance:.0e}, {r.seconds:.2f}s)")
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} suites passed")
    return EXIT_OK if failed == 0 else EXIT_NUMERIC


# -- entry point -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mstgcn", description="Multi-view spatial-temporal graph networks for sleep staging.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth-data", help="write a synthetic dataset container")
    p.add_argument("--subjects", type=int, default=5)
    p.add_argument("--epochs", type=int, default=200, help="epochs per subject")
    p.add_argument("--channels", type=int, default=6)
    p.add_argument("--samples", type=int, default=3000, help="samples per 30 s epoch")
    p.add_argument("--bias", type=float, default=0.5, help="per-subject bias strength")
    p.add_argument("--noise", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="train one model on a whole dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--test-data", help="optional held-out dataset to score")
    p.add_argument("-o", "--output", required=True)
    add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("cross-validate", help="subject-independent cross-validation")
    p.add_argument("--data", required=True)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("-o", "--output", required=True)
    add_config_flags(p)
    p.set_defaults(func=cmd_cross_validate)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("-o", "--output", help="metrics CSV path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-adjacency", help="per-stage mean learned adjacency as CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_export_adjacency)

    p = sub.add_parser("export-attention", help="temporal and spatial attention summaries as CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_export_attention)

    p = sub.add_parser("sweep", help="grid over layers, kernels, K, lambda and adjacency mode")
    p.add_argument("--data", required=True)
    p.add_argument("--grid-layers", default="", help="comma-separated layer counts")
    p.add_argument("--grid-kernels", default="", help="comma-separated temporal kernel counts")
    p.add_argument("--grid-K", default="", help="comma-separated Chebyshev orders")
    p.add_argument("--grid-lam", default="", help="comma-separated graph-loss lambdas")
    p.add_argument("--grid-adjacency", default="",
                   help="comma-separated adjacency modes (learned, full, knn, pcc, plv, mi)")
    p.add_argument("--folds", type=int, default=None, help="cross-validate each point (default: one held-out subject)")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("-o", "--output", required=True)
    add_config_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("self-check", help="run the gradient-check and oracle suites")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_self_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"mstgcn: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except EvaluationError as exc:
        print(f"mstgcn: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, DimensionError, LabelError, OrderingError, ParameterError, OSError) as exc:
        print(f"mstgcn: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
