"""Accuracy and expected calibration error."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import softmax


@dataclass
class PredictionBatch:
    confidence: np.ndarray
    correct: np.ndarray

    @classmethod
    def from_logits(cls, logits, labels) -> "PredictionBatch":
        logits = np.asarray(logits, dtype=np.float64)
        probs = softmax(logits, axis=1)
        pred = np.argmax(logits, axis=1)
        return cls(probs.max(axis=1), pred == np.asarray(labels))


def ece(batch: PredictionBatch, bins: int = 15) -> float:
    """Expected calibration error with ``bins`` equal-width confidence bins on [0, 1].

    Bins are right-closed, ``(lo, hi]``, with confidence 0 falling in the
    first bin.
    """
    conf = np.asarray(batch.confidence, dtype=np.float64)
    correct = np.asarray(batch.correct, dtype=np.float64)
    if conf.size == 0:
        raise ValueError("ECE of an empty batch is undefined")
    if bins < 1:
        raise ValueError("need at least one bin")
    idx = np.clip(np.ceil(conf * bins).astype(np.int64) - 1, 0, bins - 1)
    n = np.bincount(idx, minlength=bins)
    acc_sum = np.bincount(idx, weights=correct, minlength=bins)
    conf_sum = np.bincount(idx, weights=conf, minlength=bins)
    nz = n > 0
    gaps = np.abs(acc_sum[nz] - conf_sum[nz])
    return float(gaps.sum() / conf.size)


def accuracy(predictions, labels) -> float:
    """Fraction of rows whose argmax (lowest index on ties) equals the label."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape[0] != labels.shape[0]:
        raise ValueError(f"{predictions.shape[0]} predictions vs {labels.shape[0]} labels")
    if predictions.ndim == 2:
        predictions = np.argmax(predictions, axis=1)
    return float(np.mean(predictions == labels))
