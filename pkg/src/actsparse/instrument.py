"""Sparsity statistics of activation maps: nonzero fractions, per-neuron
firing frequencies, pre-activation histograms and second-layer FLOP counts."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np


@dataclass
class SparsityRecord:
    layer: int
    step: int
    nonzero_fraction: float
    sample_count: int

    def __post_init__(self):
        if not 0.0 <= self.nonzero_fraction <= 1.0:
            raise ValueError(f"nonzero fraction {self.nonzero_fraction} outside [0, 1]")
        if self.sample_count < 1:
            raise ValueError("a record aggregates at least one activation map")

    def merge(self, other: "SparsityRecord") -> "SparsityRecord":
        """Sample-weighted combination of two records of the same layer and step."""
        if (self.layer, self.step) != (other.layer, other.step):
            raise ValueError("can only merge records of the same layer and step")
        n = self.sample_count + other.sample_count
        frac = (self.nonzero_fraction * self.sample_count + other.nonzero_fraction * other.sample_count) / n
        return SparsityRecord(self.layer, self.step, frac, n)


def nonzero_fraction(a) -> float:
    """Fraction of strictly positive entries of one activation map."""
    a = np.asarray(a)
    return float(np.count_nonzero(a > 0)) / a.shape[-1] if a.size else 0.0


def batch_nonzero_fraction(acts: np.ndarray, mask: Optional[np.ndarray] = None) -> tuple[float, int]:
    """Mean nonzero fraction over all maps in ``acts`` (``(..., d_ff)``).

    ``mask`` marks valid tokens; padded positions are excluded. Returns
    ``(fraction, number_of_maps)``.
    """
    pos = acts > 0
    if mask is not None:
        pos = pos[np.asarray(mask, dtype=bool)]
    else:
        pos = pos.reshape(-1, acts.shape[-1])
    n = pos.shape[0]
    if n == 0:
        raise ValueError("no activation maps to measure")
    return float(np.count_nonzero(pos)) / (n * acts.shape[-1]), n


@dataclass
class NeuronFrequency:
    layer: int
    counts: np.ndarray
    total: int = 0

    @classmethod
    def empty(cls, layer: int, d_ff: int) -> "NeuronFrequency":
        return cls(layer, np.zeros(d_ff, dtype=np.int64), 0)

    def update(self, acts: np.ndarray, mask: Optional[np.ndarray] = None) -> None:
        pos = acts > 0
        pos = pos[np.asarray(mask, dtype=bool)] if mask is not None else pos.reshape(-1, acts.shape[-1])
        self.counts += pos.sum(axis=0)
        self.total += pos.shape[0]

    def merge(self, other: "NeuronFrequency") -> "NeuronFrequency":
        return NeuronFrequency(self.layer, self.counts + other.counts, self.total + other.total)

    @property
    def frequencies(self) -> np.ndarray:
        if self.total == 0:
            raise ValueError("no inputs observed")
        return self.counts / self.total

    def sorted_desc(self) -> np.ndarray:
        return np.sort(self.frequencies)[::-1]

    def summary(self) -> dict:
        f = self.frequencies
        return {
            "layer": self.layer,
            "min": float(f.min()),
            "max": float(f.max()),
            "median": float(np.median(f)),
            "frac_below_10pct": float(np.mean(f < 0.10)),
        }


def neuron_frequencies(model, inputs, mask=None, batch_size: int = 512) -> list[NeuronFrequency]:
    """Per-layer firing counts of every hidden neuron over a dataset pass.

    Sequence models count per token, skipping padded positions.
    """
    inputs = np.asarray(inputs)
    if len(inputs) == 0:
        raise ValueError("dataset is empty")
    freqs = None
    for start in range(0, len(inputs), batch_size):
        xb = inputs[start:start + batch_size]
        mb = None if mask is None else mask[start:start + batch_size]
        model.forward(xb, mb)
        if freqs is None:
            freqs = [NeuronFrequency.empty(i, a.shape[-1]) for i, a in enumerate(model.hidden)]
        for f, a in zip(freqs, model.hidden):
            f.update(a, mb)
    return freqs


@dataclass
class PreActHistogram:
    layer: int
    step: int
    edges: np.ndarray
    counts: np.ndarray
    mean: float
    median: float
    extra: dict = field(default_factory=dict)


def preact_histogram(values, bins: int = 50, layer: int = 0, step: int = 0) -> PreActHistogram:
    values = np.asarray(values, dtype=np.float64).ravel()
    if bins < 2:
        raise ValueError("need at least 2 bins")
    if np.unique(values).size < 2:
        raise ValueError("need at least 2 distinct values for a histogram")
    counts, edges = np.histogram(values, bins=bins, range=(values.min(), values.max()))
    return PreActHistogram(layer, step, edges, counts, float(values.mean()), float(np.median(values)))


def flop_count_mlp(d_model: int, d_ff: int, s: int) -> tuple[int, int, float]:
    """Dense and sparse FLOPs of the second MLP layer ``V a`` for ``s`` nonzeros.

    Returns ``(dense, sparse, reduction)`` with ``reduction = 1 - s / d_ff``.
    """
    if not 0 <= s <= d_ff:
        raise ValueError(f"nonzero count s={s} must lie in [0, d_ff={d_ff}]")
    return 2 * d_model * d_ff, 2 * d_model * s, 1.0 - s / d_ff
