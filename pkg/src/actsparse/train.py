"""Experiment configs, the instrumented training loop and parameter sweeps."""

from __future__ import annotations

import copy
import csv
import dataclasses
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

from . import data as D
from .instrument import batch_nonzero_fraction, preact_histogram
from .linalg import make_rng
from .metrics import PredictionBatch, accuracy, ece
from .nn import MLP, Activation, Encoder, LossKind, loss_and_grads
from .optim import Optimizer, OptimizerKind

log = logging.getLogger(__name__)

REPORT_HEADER = ("experiment", "step", "layer", "metric", "value")
METRICS = frozenset({"nonzero_fraction", "train_acc", "eval_acc", "ece", "flop_reduction", "preact_mean", "neuron_freq"})
MODEL_LEVEL = -1  # layer id of rows that describe the whole model

_STREAM_INIT = 0
_STREAM_SHUFFLE = 2
_STREAM_EVAL = 3


class ConfigError(ValueError):
    pass


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step


# --------------------------------------------------------------------------
# configuration


@dataclass
class ModelSpec:
    type: str = "mlp"
    hidden: list = field(default_factory=lambda: [512])
    activation: str = "relu"
    topk: Optional[int] = None
    bias: bool = True
    d_model: int = 64
    d_ff: int = 256
    blocks: int = 4


@dataclass
class DataSpec:
    kind: str = "mnist"
    images: Optional[str] = None
    labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    limit: Optional[int] = None
    holdout: float = 0.1
    label_noise: float = 0.0
    random_images: bool = False
    dim: int = 784
    num_classes: int = 10
    n: int = 2048
    epoch_size: int = 9000
    eval_size: int = 2048
    vocab: int = 8
    min_len: int = 6
    max_len: int = 12


@dataclass
class LossSpec:
    kind: str = "ce"
    reg: str = "none"
    lam: float = 0.0


@dataclass
class OptimSpec:
    name: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class ExperimentConfig:
    name: str = "run"
    model: ModelSpec = field(default_factory=ModelSpec)
    data: DataSpec = field(default_factory=DataSpec)
    loss: LossSpec = field(default_factory=LossSpec)
    optimizer: OptimSpec = field(default_factory=OptimSpec)
    epochs: int = 20
    steps: Optional[int] = None
    batch_size: int = 128
    record_every: int = 50
    measure_limit: int = 10000
    hist_bins: int = 50
    seed: int = 0
    out: Optional[str] = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def validate(self) -> None:
        for name in ("batch_size", "record_every", "measure_limit", "hist_bins"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.epochs < 0 or (self.steps is not None and self.steps < 0):
            raise ConfigError("epochs/steps must be non-negative")
        if self.model.type not in ("mlp", "encoder"):
            raise ConfigError(f"unknown model type {self.model.type!r}")
        if self.model.type == "mlp" and (not self.model.hidden or min(self.model.hidden) < 1):
            raise ConfigError("mlp needs at least one positive hidden width")
        if self.data.kind not in ("mnist", "random_finite", "infinite", "blobs", "sequence"):
            raise ConfigError(f"unknown data kind {self.data.kind!r}")
        if (self.model.type == "encoder") != (self.data.kind == "sequence"):
            raise ConfigError("encoder models train on sequence data and only on it")
        try:
            Activation(self.model.activation)
            LossKind(self.loss.kind, self.loss.reg, self.loss.lam)
            OptimizerKind(**dataclasses.asdict(self.optimizer))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if not 0.0 <= self.data.label_noise <= 1.0:
            raise ConfigError("label_noise must lie in [0, 1]")


def _build(cls, raw: Any, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for key, val in raw.items():
        sub = {"model": ModelSpec, "data": DataSpec, "loss": LossSpec, "optimizer": OptimSpec}.get(key)
        kwargs[key] = _build(sub, val, f"{where}.{key}") if cls is ExperimentConfig and sub else val
    return cls(**kwargs)


def config_from_dict(raw: dict) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, raw, "config")
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    """Parse a JSON experiment file. Unknown keys are rejected."""
    text = Path(path).read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(raw)


# --------------------------------------------------------------------------
# data plumbing


@dataclass
class Splits:
    train: Optional[D.Dataset]
    eval: D.Dataset
    stream: Optional[D.StreamSpec] = None


def make_splits(cfg: ExperimentConfig) -> Splits:
    ds_cfg = cfg.data
    seed = cfg.seed
    if ds_cfg.kind == "infinite":
        spec = D.StreamSpec(ds_cfg.dim, ds_cfg.num_classes, seed, "infinite")
        rng = make_rng(seed, _STREAM_EVAL)
        ev = D.Dataset(rng.uniform(-1.0, 1.0, (ds_cfg.eval_size, ds_cfg.dim)),
                       rng.integers(0, ds_cfg.num_classes, ds_cfg.eval_size), ds_cfg.num_classes)
        return Splits(None, ev, spec)
    if ds_cfg.kind == "mnist":
        if not ds_cfg.images or not ds_cfg.labels:
            raise ConfigError("mnist data needs 'images' and 'labels' paths")
        full = D.idx_load(ds_cfg.images, ds_cfg.labels, ds_cfg.num_classes)
        if ds_cfg.limit:
            full = full.subset(slice(0, ds_cfg.limit))
        if ds_cfg.test_images and ds_cfg.test_labels:
            train, ev = full, D.idx_load(ds_cfg.test_images, ds_cfg.test_labels, ds_cfg.num_classes)
        else:
            train, ev = D.split_holdout(full, ds_cfg.holdout)
    elif ds_cfg.kind == "random_finite":
        full = D.random_finite(D.StreamSpec(ds_cfg.dim, ds_cfg.num_classes, seed, "random_finite", ds_cfg.n))
        train, ev = D.split_holdout(full, ds_cfg.holdout)
    elif ds_cfg.kind == "blobs":
        train, ev = D.split_holdout(D.blobs(ds_cfg.n, ds_cfg.dim, seed), ds_cfg.holdout)
    else:
        full = D.sequence_task(ds_cfg.n, seed, ds_cfg.vocab, ds_cfg.num_classes, ds_cfg.min_len, ds_cfg.max_len)
        train, ev = D.split_holdout(full, ds_cfg.holdout)
    if ds_cfg.random_images:
        train = D.random_images(train, seed)
    if ds_cfg.label_noise:
        train = D.corrupt_labels(train, ds_cfg.label_noise, seed)
    return Splits(train, ev)


def build_model(cfg: ExperimentConfig, input_dim: int, num_classes: int):
    m = cfg.model
    rng = make_rng(cfg.seed, _STREAM_INIT)
    if m.type == "mlp":
        return MLP([input_dim, *m.hidden, num_classes], m.activation, m.topk, m.bias, rng=rng)
    return Encoder(input_dim, m.d_model, m.d_ff, m.blocks, num_classes, m.activation, m.topk, rng=rng)


# --------------------------------------------------------------------------
# training


@dataclass
class RunArtifacts:
    config: ExperimentConfig
    model: Any
    rows: list = field(default_factory=list)
    histograms: list = field(default_factory=list)
    initial_nonzero: list = field(default_factory=list)
    final_nonzero: list = field(default_factory=list)
    final_train_acc: float = float("nan")
    final_eval_acc: float = float("nan")
    steps: int = 0
    losses: list = field(default_factory=list)

    @property
    def experiment(self) -> str:
        return self.config.name


def forward_in_batches(model, ds: D.Dataset, limit: Optional[int] = None, batch: int = 1024):
    """Logits plus per-layer (nonzero count, map count) and pre-activations."""
    n = len(ds) if limit is None else min(limit, len(ds))
    logits, pos, maps, pres = [], None, None, None
    for s in range(0, n, batch):
        e = min(n, s + batch)
        mb = None if ds.mask is None else ds.mask[s:e]
        logits.append(model.forward(ds.inputs[s:e], mb))
        if pos is None:
            pos = [0] * model.n_hidden
            maps = [0] * model.n_hidden
            pres = [[] for _ in range(model.n_hidden)]
        for i, (a, p) in enumerate(zip(model.hidden, model.preacts)):
            frac, cnt = batch_nonzero_fraction(a, mb)
            pos[i] += frac * cnt
            maps[i] += cnt
            pres[i].append(p[mb] if mb is not None else p.reshape(-1, p.shape[-1]))
    fracs = [pos[i] / maps[i] for i in range(model.n_hidden)]
    return np.concatenate(logits), fracs, [np.concatenate(p) for p in pres]


def _steps_per_epoch(cfg: ExperimentConfig, splits: Splits) -> int:
    n = cfg.data.epoch_size if splits.train is None else len(splits.train)
    return max(1, math.ceil(n / cfg.batch_size))


def train(cfg: ExperimentConfig, write: bool = True) -> RunArtifacts:
    """Train one model as described by ``cfg`` and collect its instrumentation.

    Recorded rows (``experiment, step, layer, metric, value``):

    * ``nonzero_fraction`` per hidden layer at step 0 and at the final step
      over the measurement set (training set, capped at ``measure_limit``;
      a fixed fresh batch for the infinite stream), and every
      ``record_every`` steps in between on the current training batch;
    * ``train_acc``, ``eval_acc`` and ``ece`` at the end of every epoch;
    * ``preact_mean`` per layer at the start, middle and end, with the full
      histograms kept in :attr:`RunArtifacts.histograms`.
    """
    cfg.validate()
    splits = make_splits(cfg)
    first = splits.eval
    input_dim = first.inputs.shape[-1]
    model = build_model(cfg, input_dim, first.num_classes)
    opt = Optimizer(OptimizerKind(**dataclasses.asdict(cfg.optimizer)))
    loss_kind = LossKind(cfg.loss.kind, cfg.loss.reg, cfg.loss.lam)
    spe = _steps_per_epoch(cfg, splits)
    total = cfg.steps if cfg.steps is not None else cfg.epochs * spe
    art = RunArtifacts(cfg, model, steps=total)
    name = cfg.name
    measure = splits.train if splits.train is not None else splits.eval

    def row(step, layer, metric, value):
        art.rows.append((name, int(step), int(layer), metric, float(value)))

    def snapshot(step):
        logits, fracs, pres = forward_in_batches(model, measure, cfg.measure_limit)
        for i, p in enumerate(pres):
            h = preact_histogram(p, cfg.hist_bins, layer=i, step=step)
            art.histograms.append(h)
            row(step, i, "preact_mean", h.mean)
        return logits, fracs

    _, fracs0 = snapshot(0)
    art.initial_nonzero = fracs0
    for i, f in enumerate(fracs0):
        row(0, i, "nonzero_fraction", f)
    middle = total // 2

    order = None
    epoch_correct = epoch_seen = 0
    for step in range(total):
        epoch, pos = divmod(step, spe)
        if splits.train is None:
            xb, yb = D.infinite_stream(splits.stream, cfg.batch_size, step)
            mb = None
        else:
            if pos == 0:
                order = make_rng(cfg.seed, _STREAM_SHUFFLE, epoch).permutation(len(splits.train))
            idx = order[pos * cfg.batch_size:(pos + 1) * cfg.batch_size]
            xb, yb = splits.train.inputs[idx], splits.train.labels[idx]
            mb = None if splits.train.mask is None else splits.train.mask[idx]
        value, logits, grads = loss_and_grads(model, xb, yb, loss_kind, mb)
        if not np.isfinite(value):
            raise TrainingDiverged(step, value)
        art.losses.append(value)
        if step % cfg.record_every == 0 and step > 0:
            for i, a in enumerate(model.hidden):
                row(step, i, "nonzero_fraction", batch_nonzero_fraction(a, mb)[0])
        epoch_correct += int(np.sum(np.argmax(logits, axis=1) == yb))
        epoch_seen += len(yb)
        opt.step(model.params, grads)
        done = step + 1
        if done == middle and 0 < middle < total:
            snapshot(done)
        if pos == spe - 1 or done == total:
            if splits.train is None:
                train_acc = epoch_correct / epoch_seen
            else:
                tl, _, _ = forward_in_batches(model, splits.train, cfg.measure_limit)
                train_acc = accuracy(tl, splits.train.labels[:len(tl)])
            el, _, _ = forward_in_batches(model, splits.eval)
            eval_acc = accuracy(el, splits.eval.labels)
            row(done, MODEL_LEVEL, "train_acc", train_acc)
            row(done, MODEL_LEVEL, "eval_acc", eval_acc)
            row(done, MODEL_LEVEL, "ece", ece(PredictionBatch.from_logits(el, splits.eval.labels)))
            art.final_train_acc, art.final_eval_acc = train_acc, eval_acc
            epoch_correct = epoch_seen = 0
            log.info("%s step %d/%d loss %.4f train %.4f eval %.4f", name, done, total, value, train_acc, eval_acc)

    if total > 0:
        _, fracs = snapshot(total)
        for i, f in enumerate(fracs):
            row(total, i, "nonzero_fraction", f)
            row(total, i, "flop_reduction", 1.0 - f)
        art.final_nonzero = fracs
    else:
        art.final_nonzero = fracs0
        art.histograms = art.histograms[: model.n_hidden]

    if write and cfg.out:
        write_run(art, cfg.out)
    return art


# --------------------------------------------------------------------------
# outputs


def fmt_value(v: float) -> str:
    return repr(float(v))


def write_report(rows, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for exp, step, layer, metric, value in rows:
            if metric not in METRICS:
                raise ValueError(f"metric {metric!r} outside the report vocabulary")
            w.writerow((exp, step, layer, metric, fmt_value(value)))


def read_report(path) -> list[dict]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != REPORT_HEADER:
            raise ValueError(f"{path}: header must be {','.join(REPORT_HEADER)}")
        return [
            {"experiment": r["experiment"], "step": int(r["step"]), "layer": int(r["layer"]),
             "metric": r["metric"], "value": float(r["value"])}
            for r in reader
        ]


def write_histograms(art_list, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("experiment", "step", "layer", "bin_lo", "bin_hi", "count"))
        for art in art_list:
            for h in art.histograms:
                for lo, hi, c in zip(h.edges[:-1], h.edges[1:], h.counts):
                    w.writerow((art.experiment, h.step, h.layer, fmt_value(lo), fmt_value(hi), int(c)))


def write_run(art: RunArtifacts, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_report(art.rows, out / "report.csv")
    write_histograms([art], out / "preact_hist.csv")
    (out / "config.json").write_text(json.dumps(art.config.to_dict(), indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# sweeps

SWEEP_AXES = ("width", "depth", "lr", "topk", "label-noise-fraction")


def arm_config(template: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    cfg = copy.deepcopy(template)
    cfg.name = f"{template.name}/{axis}={value}"
    cfg.out = None
    m = cfg.model
    if axis == "width":
        if m.type == "mlp":
            m.hidden = [int(value)] * len(m.hidden)
        else:
            m.d_ff = int(value)
    elif axis == "depth":
        if m.type == "mlp":
            m.hidden = [m.hidden[0]] * int(value)
        else:
            m.blocks = int(value)
    elif axis == "lr":
        cfg.optimizer.lr = float(value)
    elif axis == "topk":
        m.topk = int(value)
    elif axis == "label-noise-fraction":
        cfg.data.label_noise = float(value)
    else:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {', '.join(SWEEP_AXES)}")
    cfg.validate()
    return cfg


def _train_quiet(cfg):
    return train(cfg, write=False)


def sweep(template: ExperimentConfig, axis: str, values, jobs: int = 1, out_dir=None) -> list[RunArtifacts]:
    """Train one arm per value with the template's seed and collate the rows.

    Arms are independent; ``jobs > 1`` runs them in worker processes.
    """
    values = list(values)
    if not values:
        raise ConfigError("sweep needs at least one value")
    cfgs = [arm_config(template, axis, v) for v in values]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            arts = list(ex.map(_train_quiet, cfgs))
    else:
        arts = [_train_quiet(c) for c in cfgs]
    if out_dir:
        out = Path(out_dir)
        write_report([r for a in arts for r in a.rows], out / "report.csv")
        write_histograms(arts, out / "preact_hist.csv")
    return arts
