"""Command-line entry point: ``actsparse <subcommand> [flags]``.

Every subcommand writes its files under ``--out`` and is byte-reproducible
for a fixed config and seed. Exit codes are listed in :data:`EXIT_CODES`.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import logging
import sys
from pathlib import Path

import numpy as np
from scipy import stats

from . import data as D
from .instrument import neuron_frequencies
from .linalg import make_rng
from .metrics import PredictionBatch, accuracy, ece
from .plot import collect_series, render_png, render_svg
from .theory import (
    LemmaD1Params,
    QuadratureError,
    Theorem1Config,
    lemma_d1_check,
    mse_closed_form,
    theorem1_mc,
)
from .train import (
    SWEEP_AXES,
    ConfigError,
    TrainingDiverged,
    forward_in_batches,
    fmt_value,
    load_config,
    make_splits,
    read_report,
    sweep,
    train,
    write_report,
    write_run,
)

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_USAGE = 2  # argparse's own code for unknown flags / bad values
EXIT_CONFIG_NOT_FOUND = 3
EXIT_CONFIG_MALFORMED = 4
EXIT_MISSING_FILE = 5
EXIT_DIVERGED = 6

EXIT_CODES = {
    EXIT_OK: "success",
    EXIT_VERIFY_FAILED: "a verification verdict failed",
    EXIT_USAGE: "unknown subcommand, flag or flag value",
    EXIT_CONFIG_NOT_FOUND: "config file not found",
    EXIT_CONFIG_MALFORMED: "malformed config",
    EXIT_MISSING_FILE: "missing or unreadable input file",
    EXIT_DIVERGED: "training produced a non-finite loss",
}

FAST_EPOCHS = 20
FAST_STEPS = 1000
LEMMA_GRID = (0.1, 1.0, 10.0)
LEMMA_P = (0.5, 1.0, 2.0)
CORRUPTIONS = ("gaussian", "impulse", "shot")

log = logging.getLogger("actsparse")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# --------------------------------------------------------------------------
# helpers


def _config(args, model_type=None):
    path = Path(args.config)
    if not path.is_file():
        raise CliError(EXIT_CONFIG_NOT_FOUND, f"config not found: {path}")
    try:
        cfg = load_config(path)
    except ConfigError as exc:
        raise CliError(EXIT_CONFIG_MALFORMED, str(exc)) from exc
    if model_type and cfg.model.type != model_type:
        raise CliError(EXIT_CONFIG_MALFORMED, f"{args.subcommand} needs model.type {model_type!r}, got {cfg.model.type!r}")
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "fast", False):
        cfg.epochs = min(cfg.epochs, FAST_EPOCHS)
        if cfg.steps is not None:
            cfg.steps = min(cfg.steps, FAST_STEPS)
    cfg.out = None
    return cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _plot(rows, out: Path, metric: str, logy: bool, png: bool) -> None:
    series = collect_series(rows, metric)
    render_svg(series, out / f"{metric}.svg", metric, logy)
    if png:
        render_png(series, out / f"{metric}.png", metric, logy)


def _as_dicts(rows):
    return [dict(zip(("experiment", "step", "layer", "metric", "value"), r)) for r in rows]


def _train(cfg):
    try:
        return train(cfg, write=False)
    except TrainingDiverged as exc:
        raise CliError(EXIT_DIVERGED, str(exc)) from exc


def _write_run(art, out: Path, args) -> None:
    write_run(art, out)
    _plot(_as_dicts(art.rows), out, "nonzero_fraction", True, args.png)


# --------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    cfg = _config(args, "mlp" if args.subcommand == "train-mlp" else "encoder")
    art = _train(cfg)
    _write_run(art, _out(args), args)
    print(f"{cfg.name}: final nonzero_fraction {', '.join(f'{f:.4f}' for f in art.final_nonzero)}; "
          f"train_acc {art.final_train_acc:.4f}; eval_acc {art.final_eval_acc:.4f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _config(args)
    try:
        values = [float(v) if args.axis in ("lr", "label-noise-fraction") else int(v) for v in args.values.split(",")]
    except ValueError as exc:
        raise CliError(EXIT_USAGE, f"bad --values: {exc}") from exc
    out = _out(args)
    try:
        arts = sweep(cfg, args.axis, values, jobs=args.jobs, out_dir=out)
    except TrainingDiverged as exc:
        raise CliError(EXIT_DIVERGED, str(exc)) from exc
    _plot(_as_dicts([r for a in arts for r in a.rows]), out, "nonzero_fraction", True, args.png)
    for a in arts:
        print(f"{a.experiment}: final nonzero_fraction {', '.join(f'{f:.4f}' for f in a.final_nonzero)}; "
              f"train_acc {a.final_train_acc:.4f}; eval_acc {a.final_eval_acc:.4f}")
    return EXIT_OK


def theorem_rows(loss: str, trials: int, samples: int, seed: int) -> list[tuple]:
    rng = make_rng(seed, 40)
    rows = []
    for t in range(trials):
        cfg = Theorem1Config.random(loss, rng, samples=samples, seed=seed * 1000 + t)
        res = theorem1_mc(cfg)
        closed = fmt_value(mse_closed_form(cfg)) if loss == "mse" else ""
        rows.append((t, loss, cfg.num_classes, cfg.d_ff, cfg.i_star, fmt_value(cfg.p[cfg.i_star]),
                     fmt_value(res.mean), fmt_value(res.se), res.samples, closed, int(res.verdict)))
    return rows


THEOREM_HEADER = ("trial", "loss", "num_classes", "d_ff", "i_star", "p_i_star", "mean", "se", "samples",
                  "closed_form", "verdict")
LEMMA_HEADER = ("c1", "c2", "c3", "p", "v_mean", "lhs", "rhs", "abserr", "verdict")


def cmd_verify_theorem(args) -> int:
    losses = ("mse", "ce") if args.loss == "both" else (args.loss,)
    if args.samples < 1000 or args.trials < 1:
        raise CliError(EXIT_USAGE, "need --trials >= 1 and --samples >= 1000")
    rows = []
    for loss in losses:
        rows += theorem_rows(loss, args.trials, args.samples, args.seed or 0)
    _write_csv(_out(args) / "theorem_report.csv", THEOREM_HEADER, rows)
    failed = [r for r in rows if not r[-1]]
    print(f"theorem: {len(rows) - len(failed)}/{len(rows)} configurations with mean > 3 SE")
    return EXIT_VERIFY_FAILED if failed else EXIT_OK


def lemma_rows(v_mean: float = 0.0, rtol: float = 1e-8) -> list[tuple]:
    rows = []
    for c1, c2, c3, p in itertools.product(LEMMA_GRID, LEMMA_GRID, LEMMA_GRID, LEMMA_P):
        res = lemma_d1_check(LemmaD1Params(c1, c2, c3, p, stats.norm(v_mean, 1.0)), rtol=rtol)
        rows.append((c1, c2, c3, p, v_mean, fmt_value(res.lhs), fmt_value(res.rhs), fmt_value(res.abserr), int(res.verdict)))
    return rows


def cmd_verify_lemma(args) -> int:
    try:
        rows = lemma_rows(args.v_mean)
    except QuadratureError as exc:
        print(f"quadrature failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY_FAILED
    _write_csv(_out(args) / "lemma_report.csv", LEMMA_HEADER, rows)
    failed = [r for r in rows if not r[-1]]
    print(f"lemma: {len(rows) - len(failed)}/{len(rows)} grid points with lhs > rhs")
    return EXIT_VERIFY_FAILED if failed else EXIT_OK


def cmd_neuron_freq(args) -> int:
    cfg = _config(args)
    art = _train(cfg)
    splits = make_splits(cfg)
    ds = splits.train if splits.train is not None else splits.eval
    n = min(len(ds), cfg.measure_limit)
    mask = None if ds.mask is None else ds.mask[:n]
    freqs = neuron_frequencies(art.model, ds.inputs[:n], mask)
    out = _out(args)
    detail, summary = [], []
    for nf in freqs:
        f = nf.frequencies
        order = np.argsort(-f, kind="stable")
        detail += [(cfg.name, nf.layer, rank, int(i), fmt_value(f[i])) for rank, i in enumerate(order)]
        s = nf.summary()
        summary.append((cfg.name, nf.layer, nf.total, fmt_value(s["min"]), fmt_value(s["max"]), fmt_value(s["median"]),
                        fmt_value(s["frac_below_10pct"])))
    _write_csv(out / "neuron_freq.csv", ("experiment", "layer", "rank", "neuron", "frequency"), detail)
    _write_csv(out / "neuron_summary.csv",
               ("experiment", "layer", "inputs", "min", "max", "median", "frac_below_10pct"), summary)
    write_report(art.rows, out / "report.csv")
    for row in summary:
        print(f"layer {row[1]}: max {float(row[4]):.4f} median {float(row[5]):.4f} below 10% {float(row[6]):.4f}")
    return EXIT_OK


CORRUPT_HEADER = ("experiment", "corruption", "severity", "layer", "metric", "value")


def corrupt_eval_rows(art, cfg) -> list[tuple]:
    """Accuracy, ECE and per-layer nonzero fraction on the corrupted eval split."""
    splits = make_splits(cfg)
    if splits.eval.image_shape is None:
        raise CliError(EXIT_CONFIG_MALFORMED, "corrupt-eval needs image data (data.kind 'mnist')")
    rows = []
    for kind in CORRUPTIONS:
        for sev in range(0, 6):
            ds = D.corrupt_inputs(splits.eval, kind, sev, cfg.seed)
            logits, fracs, _ = forward_in_batches(art.model, ds)
            rows.append((cfg.name, kind, sev, -1, "eval_acc", fmt_value(accuracy(logits, ds.labels))))
            rows.append((cfg.name, kind, sev, -1, "ece", fmt_value(ece(PredictionBatch.from_logits(logits, ds.labels)))))
            rows += [(cfg.name, kind, sev, i, "nonzero_fraction", fmt_value(f)) for i, f in enumerate(fracs)]
    return rows


def cmd_corrupt_eval(args) -> int:
    cfg = _config(args)
    art = _train(cfg)
    rows = corrupt_eval_rows(art, cfg)
    out = _out(args)
    _write_csv(out / "corrupt_eval.csv", CORRUPT_HEADER, rows)
    write_report(art.rows, out / "report.csv")
    for r in rows:
        if r[4] == "eval_acc":
            print(f"{r[1]} severity {r[2]}: eval_acc {float(r[5]):.4f}")
    return EXIT_OK


CALIBRATION_HEADER = ("experiment", "bin_lo", "bin_hi", "count", "accuracy", "confidence")


def cmd_calibrate(args) -> int:
    cfg = _config(args)
    art = _train(cfg)
    ev = make_splits(cfg).eval
    logits, _, _ = forward_in_batches(art.model, ev)
    batch = PredictionBatch.from_logits(logits, ev.labels)
    bins = args.bins
    idx = np.clip(np.ceil(batch.confidence * bins).astype(int) - 1, 0, bins - 1)
    rows = []
    for b in range(bins):
        sel = idx == b
        n = int(sel.sum())
        acc = fmt_value(batch.correct[sel].mean()) if n else ""
        conf = fmt_value(batch.confidence[sel].mean()) if n else ""
        rows.append((cfg.name, fmt_value(b / bins), fmt_value((b + 1) / bins), n, acc, conf))
    out = _out(args)
    _write_csv(out / "calibration.csv", CALIBRATION_HEADER, rows)
    write_report(art.rows, out / "report.csv")
    print(f"{cfg.name}: eval ECE ({bins} bins) {ece(batch, bins):.4f}; eval_acc {art.final_eval_acc:.4f}")
    return EXIT_OK


def cmd_plot(args) -> int:
    path = Path(args.report)
    if not path.is_file():
        raise CliError(EXIT_MISSING_FILE, f"report not found: {path}")
    try:
        rows = read_report(path)
        series = collect_series(rows, args.metric)
    except (ValueError, KeyError) as exc:
        raise CliError(EXIT_MISSING_FILE, f"{path}: {exc}") from exc
    target = Path(args.out)
    if target.suffix.lower() != ".svg":
        target.mkdir(parents=True, exist_ok=True)
        target = target / f"{args.metric}.svg"
    else:
        target.parent.mkdir(parents=True, exist_ok=True)
    render_svg(series, target, args.metric, args.logy)
    if args.png:
        render_png(series, target.with_suffix(".png"), args.metric, args.logy)
    print(f"wrote {target} ({len(series)} series)")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="actsparse", description="Activation-sparsity experiments and checks.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="subcommand", required=True, metavar="SUBCOMMAND")

    def run_flags(p, default_out):
        p.add_argument("--config", required=True, metavar="PATH", help="experiment JSON file")
        p.add_argument("--out", default=default_out, metavar="DIR")
        p.add_argument("--seed", type=int, default=None, metavar="U64", help="override the config seed")
        p.add_argument("--fast", action="store_true", help=f"cap epochs at {FAST_EPOCHS} and steps at {FAST_STEPS}")
        p.add_argument("--png", action="store_true", help="also render matplotlib PNG figures")

    for name, help_ in (("train-mlp", "train an MLP"), ("train-encoder", "train a transformer encoder")):
        p = sub.add_parser(name, help=help_)
        run_flags(p, "out")
        p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="train one arm per value of a config axis")
    run_flags(p, "out")
    p.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("verify-theorem", help="Monte-Carlo sign check of the pre-activation gradient")
    p.add_argument("--loss", choices=("mse", "ce", "both"), default="both")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--samples", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0, metavar="U64")
    p.add_argument("--out", default="out", metavar="DIR")
    p.set_defaults(func=cmd_verify_theorem)

    p = sub.add_parser("verify-lemma", help="quadrature check of the expectation inequality")
    p.add_argument("--v-mean", type=float, default=0.0, help="mean of the normal V (unit variance)")
    p.add_argument("--out", default="out", metavar="DIR")
    p.set_defaults(func=cmd_verify_lemma)

    for name, func, help_ in (("neuron-freq", cmd_neuron_freq, "per-neuron activation frequencies after training"),
                              ("corrupt-eval", cmd_corrupt_eval, "evaluate under input corruptions"),
                              ("calibrate", cmd_calibrate, "reliability bins and ECE after training")):
        p = sub.add_parser(name, help=help_)
        run_flags(p, "out")
        if name == "calibrate":
            p.add_argument("--bins", type=int, default=15)
        p.set_defaults(func=func)

    p = sub.add_parser("plot", help="render a report metric as an SVG line chart")
    p.add_argument("--report", required=True, metavar="CSV")
    p.add_argument("--metric", required=True)
    p.add_argument("--logy", action="store_true")
    p.add_argument("--out", default="out", metavar="DIR|FILE.svg")
    p.add_argument("--png", action="store_true")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG_MALFORMED
    except (FileNotFoundError, D.IdxFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING_FILE


if __name__ == "__main__":
    sys.exit(main())
