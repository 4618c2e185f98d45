"""Dense float64 primitives and seeded random streams.

Matrices and vectors are plain ``numpy`` float64 arrays. Random streams are
``numpy.random.Generator`` instances backed by the counter-based Philox
bit generator, keyed by ``(seed, *stream)`` so independent runs never share
a stream.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    pass


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Return a Philox generator for ``seed`` and an optional stream id path.

    ``make_rng(s, 3)`` and ``make_rng(s, 4)`` are statistically independent;
    the same arguments always reproduce the same sequence.
    """
    ss = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.Philox(ss))


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"{what} contains non-finite entries")


def matvec(m, v) -> np.ndarray:
    """Dense ``m @ v`` with a fixed summation order.

    Accumulates ``m[:, j] * v[j]`` for ascending ``j``. The sparse kernel in
    :mod:`actsparse.sparse` walks the same order over the nonzero ``j`` only,
    which makes the two paths agree to the last bit on ReLU outputs.
    """
    m = np.asarray(m, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if m.ndim != 2 or v.ndim != 1 or m.shape[1] != v.shape[0]:
        raise ShapeError(f"matvec shape mismatch: matrix {m.shape} vs vector {v.shape}")
    out = np.zeros(m.shape[0])
    for j in range(m.shape[1]):
        out += m[:, j] * v[j]
    _check_finite(out, "matvec result")
    return out


def he_init(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    """I.i.d. ``N(0, 2 / rows)`` matrix; ``rows`` is the fan-in of the map."""
    if rows < 1 or cols < 1:
        raise ShapeError(f"he_init needs positive shape, got ({rows}, {cols})")
    return rng.standard_normal((rows, cols)) * np.sqrt(2.0 / rows)


def softmax(v, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    z = v - np.max(v, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(v, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    z = v - np.max(v, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))
