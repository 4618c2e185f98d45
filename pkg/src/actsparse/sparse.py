"""Second MLP layer evaluated over the nonzero activations only."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SparseActivation:
    """Strictly positive coordinates of a ReLU activation map, ascending by index."""

    dim: int
    indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        val = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", val)
        if idx.shape != val.shape or idx.ndim != 1:
            raise ValueError("indices and values must be 1-d and equally long")
        if idx.size:
            if idx[0] < 0 or idx[-1] >= self.dim:
                raise IndexError(f"activation index out of range for dim {self.dim}")
            if np.any(np.diff(idx) <= 0):
                raise ValueError("indices must be strictly increasing")
            if np.any(val <= 0):
                raise ValueError("sparse activation values must be strictly positive")

    @property
    def s(self) -> int:
        return int(self.indices.size)

    def densify(self) -> np.ndarray:
        out = np.zeros(self.dim)
        out[self.indices] = self.values
        return out


def sparsify(a) -> SparseActivation:
    a = np.asarray(a, dtype=np.float64)
    idx = np.flatnonzero(a > 0)
    return SparseActivation(a.shape[0], idx, a[idx])


def sparse_second_layer(V, a: SparseActivation) -> tuple[np.ndarray, int]:
    """Compute ``V @ a`` as a sum of scaled columns ``a_i * v_i`` over the nonzeros.

    Columns are gathered in ascending index order, the same order
    :func:`actsparse.linalg.matvec` uses, so the result matches the dense
    path exactly. Returns ``(out, flops)`` with ``flops = 2 * d_model * s``.
    """
    V = np.asarray(V, dtype=np.float64)
    if V.ndim != 2 or V.shape[1] != a.dim:
        raise ValueError(f"V shape {V.shape} does not match activation dim {a.dim}")
    d_model = V.shape[0]
    out = np.zeros(d_model)
    flops = 0
    for i, val in zip(a.indices, a.values):
        out += V[:, i] * val
        flops += 2 * d_model
    return out, flops


def sparse_mlp_forward(layer, x) -> tuple[np.ndarray, np.ndarray, int]:
    """Single-input MLP block with the second layer on the sparse path.

    Returns ``(a, out, flops_second_layer)``.
    """
    from .nn import mlp_forward

    a, _ = mlp_forward(layer, x)
    out, flops = sparse_second_layer(layer.V, sparsify(a))
    if layer.b2 is not None:
        out = out + layer.b2
    return a, out, flops


def sparse_classifier_forward(model, x) -> tuple[np.ndarray, int]:
    """Evaluate a classifier :class:`~actsparse.nn.MLP` on one input, running
    every layer that consumes a ReLU map through :func:`sparse_second_layer`.

    Returns ``(logits, flops)`` where ``flops`` counts the sparse layers only.
    """
    from .nn import activate, topk_threshold

    h = np.asarray(x, dtype=np.float64)
    flops = 0
    n_layers = len(model.sizes) - 1
    for i in range(n_layers):
        W = model.params[f"W{i}"]
        if i == 0:
            z = h @ W
        else:
            z, f = sparse_second_layer(W.T, sparsify(h))
            flops += f
        if model.bias:
            z = z + model.params[f"b{i}"]
        if i == n_layers - 1:
            return z, flops
        h = activate(model.activation, z)
        if model.topk is not None and model.topk < h.shape[-1]:
            h = topk_threshold(h, model.topk)
    raise AssertionError("unreachable")
