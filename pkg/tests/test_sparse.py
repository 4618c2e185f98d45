import numpy as np
import pytest

from actsparse.linalg import make_rng, matvec
from actsparse.nn import MLP, MlpLayer, mlp_forward
from actsparse.sparse import (
    SparseActivation,
    sparse_classifier_forward,
    sparse_mlp_forward,
    sparse_second_layer,
    sparsify,
)


def test_sparsify_examples():
    s = sparsify([0.0, 2.0, 0.0, 5.0])
    assert s.indices.tolist() == [1, 3] and s.values.tolist() == [2.0, 5.0]
    assert sparsify(np.zeros(4)).s == 0


def test_round_trip(rng):
    a = np.maximum(rng.standard_normal(100), 0)
    assert np.array_equal(sparsify(a).densify(), a)


def test_second_layer_hand_case():
    V = np.array([[2.0, 5.0], [3.0, 7.0]])
    out, flops = sparse_second_layer(V, SparseActivation(2, [0], [1.0]))
    assert out.tolist() == [2.0, 3.0] and flops == 4
    out, flops = sparse_second_layer(V, SparseActivation(2, [], []))
    assert out.tolist() == [0.0, 0.0] and flops == 0


def test_invalid_sparse_activation():
    with pytest.raises(IndexError):
        SparseActivation(3, [5], [1.0])
    with pytest.raises(ValueError):
        SparseActivation(3, [2, 1], [1.0, 1.0])
    with pytest.raises(ValueError):
        SparseActivation(3, [1], [-1.0])
    with pytest.raises(ValueError):
        sparse_second_layer(np.zeros((2, 4)), SparseActivation(3, [], []))


def test_matches_dense_matvec_and_counts_flops():
    rng = make_rng(42)
    for _ in range(200):
        d_model = int(rng.integers(1, 65))
        d_ff = int(rng.integers(1, 257))
        density = rng.uniform(0, 0.2)
        a = np.where(rng.random(d_ff) < density, rng.exponential(1.0, d_ff), 0.0)
        V = rng.standard_normal((d_model, d_ff))
        sa = sparsify(a)
        out, flops = sparse_second_layer(V, sa)
        assert np.max(np.abs(out - matvec(V, a))) <= 1e-12
        assert flops == 2 * d_model * sa.s


def test_flops_monotone_in_s(rng):
    V = rng.standard_normal((4, 20))
    a = np.abs(rng.standard_normal(20)) + 0.1
    flops = [sparse_second_layer(V, sparsify(np.where(np.arange(20) < s, a, 0.0)))[1] for s in range(21)]
    assert flops == sorted(flops)


def test_sparse_mlp_block_equals_dense():
    layer = MlpLayer.init(make_rng(1), 16, 64)
    x = make_rng(2).standard_normal(16)
    a, out, flops = sparse_mlp_forward(layer, x)
    a2, out2 = mlp_forward(layer, x)
    assert np.array_equal(a, a2)
    np.testing.assert_allclose(out, out2, atol=1e-12, rtol=0)
    assert flops == 2 * 16 * np.count_nonzero(a)


def test_sparse_classifier_equals_dense():
    model = MLP([10, 32, 32, 4], seed=3)
    x = make_rng(5).standard_normal((20, 10))
    dense = model.forward(x)
    for xi, di in zip(x, dense):
        logits, flops = sparse_classifier_forward(model, xi)
        np.testing.assert_allclose(logits, di, atol=1e-12, rtol=0)
        assert flops > 0
