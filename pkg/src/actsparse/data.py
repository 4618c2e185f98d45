"""Datasets: IDX (MNIST) ingestion, label/input corruption and synthetic generators.

Image pixels are kept in the normalized range [-1, 1] (0 -> -1, 255 -> +1).
Every generator is a pure function of its arguments and seed.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .linalg import make_rng

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049

GAUSSIAN_SIGMA = (0.04, 0.08, 0.12, 0.18, 0.26)
IMPULSE_RATE = (0.01, 0.02, 0.05, 0.10, 0.17)
SHOT_LAMBDA = (500.0, 250.0, 100.0, 60.0, 25.0)

# stream ids under the user seed, so generators never share randomness
_STREAM_LABELS = 11
_STREAM_IMAGES = 12
_STREAM_INFINITE = 13
_STREAM_CORRUPT = 14
_STREAM_BLOBS = 15
_STREAM_SEQUENCE = 16
_STREAM_RANDOM_FINITE = 17


class IdxFormatError(ValueError):
    pass


@dataclass
class Dataset:
    """Inputs, integer labels and class count.

    Flat datasets have ``inputs`` of shape ``(n, d)``. Sequence datasets
    have ``(n, N, d)`` inputs plus a boolean ``mask`` of valid tokens.
    """

    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    image_shape: Optional[tuple] = None
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) != len(self.labels):
            raise ValueError(f"{len(self.inputs)} inputs vs {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.inputs.shape[-1]

    def subset(self, idx) -> "Dataset":
        return replace(self, inputs=self.inputs[idx], labels=self.labels[idx],
                       mask=None if self.mask is None else self.mask[idx])


def _open(path):
    path = Path(path)
    with open(path, "rb") as f:
        head = f.read(2)
    return gzip.open(path, "rb") if head == b"\x1f\x8b" else open(path, "rb")


def _read_idx(path, expected_magic: int, kind: str) -> np.ndarray:
    with _open(path) as f:
        raw = f.read()
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: truncated header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IdxFormatError(f"{kind} magic mismatch in {path}: expected {expected_magic}, found {magic}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    n = int(np.prod(dims))
    if len(raw) - header < n:
        raise IdxFormatError(f"{path}: truncated file, expected {n} bytes of data, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=n, offset=header).reshape(dims)


def idx_load(images_path, labels_path, num_classes: int = 10) -> Dataset:
    """Load an IDX image/label pair (optionally gzipped) as a flat dataset."""
    images = _read_idx(images_path, IMAGE_MAGIC, "image")
    labels = _read_idx(labels_path, LABEL_MAGIC, "label")
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(f"count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels")
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 127.5 - 1.0
    return Dataset(x, labels.astype(np.int64), num_classes, tuple(images.shape[1:]))


def idx_save(ds: Dataset, images_path, labels_path) -> None:
    """Write a flat dataset back to uncompressed IDX (pixels re-quantized to bytes)."""
    shape = ds.image_shape or (ds.dim,)
    if len(shape) != 2:
        raise ValueError("IDX image files hold 2-d images")
    pixels = np.rint((ds.inputs + 1.0) * 127.5).clip(0, 255).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IMAGE_MAGIC, len(ds), *shape))
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", LABEL_MAGIC, len(ds)))
        f.write(ds.labels.astype(np.uint8).tobytes())


def split_holdout(ds: Dataset, fraction: float = 0.1) -> tuple[Dataset, Dataset]:
    """Hold out the last ``fraction`` of the examples for evaluation."""
    n_eval = int(round(len(ds) * fraction))
    cut = len(ds) - n_eval
    return ds.subset(slice(0, cut)), ds.subset(slice(cut, len(ds)))


def corrupt_labels(ds: Dataset, fraction: float, seed: int) -> Dataset:
    """Re-draw the labels of ``round(fraction * n)`` examples uniformly over all classes.

    The redrawn label may coincide with the original one.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"label-noise fraction must lie in [0, 1], got {fraction}")
    rng = make_rng(seed, _STREAM_LABELS)
    m = int(round(fraction * len(ds)))
    labels = ds.labels.copy()
    if m:
        idx = rng.choice(len(ds), size=m, replace=False)
        labels[idx] = rng.integers(0, ds.num_classes, size=m)
    return replace(ds, labels=labels)


def random_images(ds: Dataset, seed: int) -> Dataset:
    """Replace every input with i.i.d. Uniform[-1, 1] pixels; labels are kept.

    Uniform over [0, 255] before normalization is the same distribution.
    """
    rng = make_rng(seed, _STREAM_IMAGES)
    return replace(ds, inputs=rng.uniform(-1.0, 1.0, size=ds.inputs.shape))


@dataclass(frozen=True)
class StreamSpec:
    dim: int = 784
    num_classes: int = 10
    seed: int = 0
    mode: str = "infinite"
    n: Optional[int] = None

    def __post_init__(self):
        if self.mode not in ("infinite", "random_finite"):
            raise ValueError(f"unknown stream mode {self.mode!r}")
        if self.mode == "random_finite" and not self.n:
            raise ValueError("random_finite streams need a size n")


def infinite_stream(spec: StreamSpec, batch: int, step: int) -> tuple[np.ndarray, np.ndarray]:
    """Fresh random images and labels for training step ``step``.

    Each step draws from its own counter-derived stream, so the batch is a
    pure function of ``(seed, step)`` and no example repeats across steps.
    """
    if spec.mode != "infinite":
        raise ValueError("infinite_stream needs an infinite StreamSpec")
    rng = make_rng(spec.seed, _STREAM_INFINITE, step)
    x = rng.uniform(-1.0, 1.0, size=(batch, spec.dim))
    y = rng.integers(0, spec.num_classes, size=batch)
    return x, y


def random_finite(spec: StreamSpec) -> Dataset:
    """A fixed dataset of ``spec.n`` random images with random labels."""
    rng = make_rng(spec.seed, _STREAM_RANDOM_FINITE)
    x = rng.uniform(-1.0, 1.0, size=(spec.n, spec.dim))
    y = rng.integers(0, spec.num_classes, size=spec.n)
    return Dataset(x, y, spec.num_classes)


def corrupt_inputs(ds: Dataset, kind: str, severity: Optional[int], seed: int) -> Dataset:
    """Additive Gaussian, impulse (salt-and-pepper) or shot (Poisson) noise.

    ``severity`` 1..5 indexes the tables above; ``None`` or 0 returns the
    dataset unchanged.
    """
    if severity is None or severity == 0:
        return ds
    if severity not in (1, 2, 3, 4, 5):
        raise ValueError(f"severity must be 1..5, got {severity}")
    rng = make_rng(seed, _STREAM_CORRUPT)
    x = ds.inputs
    s = severity - 1
    if kind == "gaussian":
        out = np.clip(x + rng.standard_normal(x.shape) * GAUSSIAN_SIGMA[s], -1.0, 1.0)
    elif kind == "impulse":
        hit = rng.random(x.shape) < IMPULSE_RATE[s]
        salt = np.where(rng.random(x.shape) < 0.5, -1.0, 1.0)
        out = np.where(hit, salt, x)
    elif kind == "shot":
        lam = SHOT_LAMBDA[s]
        unit = (x + 1.0) / 2.0
        out = np.clip(2.0 * rng.poisson(lam * unit) / lam - 1.0, -1.0, 1.0)
    else:
        raise ValueError(f"unknown corruption {kind!r}")
    return replace(ds, inputs=out)


def blobs(n: int = 1000, dim: int = 2, seed: int = 0, separation: float = 6.0) -> Dataset:
    """Two unit-variance Gaussian blobs ``separation`` apart (linearly separable)."""
    rng = make_rng(seed, _STREAM_BLOBS)
    y = rng.integers(0, 2, size=n)
    centers = np.zeros((2, dim))
    centers[0, 0] = -separation / 2
    centers[1, 0] = separation / 2
    x = centers[y] + rng.standard_normal((n, dim))
    # truncate the overlap so the classes are strictly separable
    x[:, 0] = np.where(y == 0, np.minimum(x[:, 0], -0.5), np.maximum(x[:, 0], 0.5))
    return Dataset(x, y, 2)


def sequence_task(n: int, seed: int = 0, vocab: int = 8, num_classes: int = 4,
                  min_len: int = 6, max_len: int = 12, concentration: float = 0.3) -> Dataset:
    """Sequence classification over token strings drawn from class-specific grammars.

    Class ``c`` owns a seeded first-order Markov chain over ``vocab`` tokens;
    a sequence's label is the chain that produced it. Token features are a
    one-hot token id concatenated with a one-hot position, and sequences
    shorter than ``max_len`` are padded (``mask`` False).
    """
    grammar_rng = make_rng(seed, _STREAM_SEQUENCE, 0)
    start = grammar_rng.dirichlet(np.full(vocab, concentration), size=num_classes)
    trans = grammar_rng.dirichlet(np.full(vocab, concentration), size=(num_classes, vocab))
    rng = make_rng(seed, _STREAM_SEQUENCE, 1)
    labels = rng.integers(0, num_classes, size=n)
    lengths = rng.integers(min_len, max_len + 1, size=n)
    x = np.zeros((n, max_len, vocab + max_len))
    mask = np.zeros((n, max_len), dtype=bool)
    for i in range(n):
        c = labels[i]
        tok = rng.choice(vocab, p=start[c])
        for t in range(lengths[i]):
            if t:
                tok = rng.choice(vocab, p=trans[c, tok])
            x[i, t, tok] = 1.0
            x[i, t, vocab + t] = 1.0
            mask[i, t] = True
    return Dataset(x, labels, num_classes, mask=mask)
