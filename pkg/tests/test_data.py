import gzip
import struct

import numpy as np
import pytest
from scipy import stats

from actsparse import data as D


def _write_idx(path, magic, dims, payload, compress=False):
    raw = struct.pack(f">I{len(dims)}I", magic, *dims) + bytes(payload)
    opener = gzip.open if compress else open
    with opener(path, "wb") as f:
        f.write(raw)


@pytest.fixture
def tiny_idx(tmp_path):
    pix = np.arange(3 * 2 * 2, dtype=np.uint8) * 20
    pix[0] = 0
    pix[-1] = 255
    _write_idx(tmp_path / "img", D.IMAGE_MAGIC, (3, 2, 2), pix.tobytes())
    _write_idx(tmp_path / "lbl", D.LABEL_MAGIC, (3,), bytes([1, 0, 9]))
    return tmp_path / "img", tmp_path / "lbl"


def test_idx_load_scaling(tiny_idx):
    ds = D.idx_load(*tiny_idx)
    assert len(ds) == 3 and ds.dim == 4 and ds.num_classes == 10
    assert ds.inputs[0, 0] == -1.0
    assert ds.inputs[-1, -1] == 1.0
    assert ds.labels.tolist() == [1, 0, 9]


def test_idx_gzip(tmp_path):
    _write_idx(tmp_path / "i.gz", D.IMAGE_MAGIC, (1, 1, 2), b"\x00\xff", compress=True)
    _write_idx(tmp_path / "l.gz", D.LABEL_MAGIC, (1,), b"\x03", compress=True)
    ds = D.idx_load(tmp_path / "i.gz", tmp_path / "l.gz")
    assert ds.inputs.tolist() == [[-1.0, 1.0]]


def test_idx_errors(tiny_idx, tmp_path):
    img, lbl = tiny_idx
    with pytest.raises(D.IdxFormatError, match="label magic mismatch"):
        D.idx_load(img, img)
    _write_idx(tmp_path / "short", D.IMAGE_MAGIC, (3, 2, 2), b"\x00" * 5)
    with pytest.raises(D.IdxFormatError, match="truncated"):
        D.idx_load(tmp_path / "short", lbl)
    _write_idx(tmp_path / "two", D.LABEL_MAGIC, (2,), b"\x00\x01")
    with pytest.raises(D.IdxFormatError, match="count mismatch"):
        D.idx_load(img, tmp_path / "two")


def test_idx_round_trip(tiny_idx, tmp_path):
    ds = D.idx_load(*tiny_idx)
    D.idx_save(ds, tmp_path / "a", tmp_path / "b")
    back = D.idx_load(tmp_path / "a", tmp_path / "b")
    assert np.array_equal(back.inputs, ds.inputs) and np.array_equal(back.labels, ds.labels)


def test_bundled_mnist(mnist_paths):
    ds = D.idx_load(*mnist_paths)
    assert ds.dim == 784 and ds.num_classes == 10 and len(ds) == 10000
    assert ds.inputs.min() == -1.0 and ds.inputs.max() == 1.0
    train, ev = D.split_holdout(ds)
    assert len(train) == 9000 and len(ev) == 1000


def _dataset(n=2000, c=10, seed=0):
    rng = np.random.default_rng(seed)
    return D.Dataset(rng.uniform(-1, 1, (n, 6)), rng.integers(0, c, n), c)


def test_corrupt_labels():
    ds = _dataset(20000)
    assert np.array_equal(D.corrupt_labels(ds, 0.0, 1).labels, ds.labels)
    full = D.corrupt_labels(ds, 1.0, 1)
    assert abs(np.mean(full.labels == ds.labels) - 0.1) < 0.01
    part = D.corrupt_labels(ds, 0.4, 2)
    assert abs(np.mean(part.labels != ds.labels) - 0.4 * 0.9) < 0.01
    assert len(part) == len(ds) and part.dim == ds.dim
    assert np.array_equal(part.labels, D.corrupt_labels(ds, 0.4, 2).labels)
    with pytest.raises(ValueError):
        D.corrupt_labels(ds, 1.5, 0)


def test_corrupt_labels_touches_exact_count():
    ds = D.Dataset(np.zeros((1000, 1)), np.zeros(1000, dtype=int), 1000)
    out = D.corrupt_labels(ds, 0.3, 5)
    # with 1000 classes nearly every redraw differs; never more than round(0.3 n)
    assert 280 <= np.count_nonzero(out.labels) <= 300


def test_random_images():
    ds = D.Dataset(np.zeros((1000, 1000)), np.zeros(1000, dtype=int), 10)
    out = D.random_images(ds, 3)
    assert out.inputs.shape == ds.inputs.shape and np.array_equal(out.labels, ds.labels)
    assert abs(out.inputs.mean()) < 0.005
    assert out.inputs.min() >= -1 and out.inputs.max() <= 1
    other = D.Dataset(np.ones((1000, 1000)), np.ones(1000, dtype=int), 10)
    assert np.array_equal(D.random_images(other, 3).inputs, out.inputs)


def test_infinite_stream():
    spec = D.StreamSpec(dim=20, num_classes=10, seed=4)
    a = D.infinite_stream(spec, 64, 0)
    b = D.infinite_stream(spec, 64, 0)
    c = D.infinite_stream(spec, 64, 1)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    rows0 = {r.tobytes() for r in a[0]}
    assert not rows0 & {r.tobytes() for r in c[0]}


def test_infinite_stream_labels_uniform():
    spec = D.StreamSpec(dim=1, num_classes=10, seed=8)
    labels = np.concatenate([D.infinite_stream(spec, 1000, s)[1] for s in range(100)])
    counts = np.bincount(labels, minlength=10)
    assert stats.chisquare(counts).pvalue > 0.01


def test_random_finite_stream():
    ds = D.random_finite(D.StreamSpec(dim=5, num_classes=3, seed=0, mode="random_finite", n=40))
    assert ds.inputs.shape == (40, 5) and ds.labels.max() < 3
    with pytest.raises(ValueError):
        D.StreamSpec(mode="random_finite")


def test_gaussian_noise_level():
    ds = D.Dataset(np.zeros((200, 500)), np.zeros(200, dtype=int), 10)
    for s, sigma in enumerate(D.GAUSSIAN_SIGMA, start=1):
        out = D.corrupt_inputs(ds, "gaussian", s, 0)
        assert out.inputs.std() == pytest.approx(sigma, rel=0.02)


def test_impulse_noise_rate():
    ds = D.Dataset(np.zeros((200, 500)), np.zeros(200, dtype=int), 10)
    for s, rho in enumerate(D.IMPULSE_RATE, start=1):
        out = D.corrupt_inputs(ds, "impulse", s, 0)
        # zero pixels never coincide with the +-1 salt, so every hit changes
        assert np.mean(out.inputs != 0) == pytest.approx(rho, rel=0.05)


def test_shot_noise_unbiased():
    ds = D.Dataset(np.zeros((100, 500)), np.zeros(100, dtype=int), 10)
    out = D.corrupt_inputs(ds, "shot", 5, 0)
    assert abs(out.inputs.mean()) < 0.01
    assert out.inputs.min() >= -1 and out.inputs.max() <= 1


def test_corrupt_inputs_passthrough_and_errors():
    ds = _dataset(10)
    assert D.corrupt_inputs(ds, "gaussian", None, 0) is ds
    assert D.corrupt_inputs(ds, "gaussian", 0, 0) is ds
    with pytest.raises(ValueError):
        D.corrupt_inputs(ds, "gaussian", 6, 0)
    with pytest.raises(ValueError):
        D.corrupt_inputs(ds, "fog", 1, 0)
    for kind in ("gaussian", "impulse", "shot"):
        a = D.corrupt_inputs(ds, kind, 3, 9)
        assert a.inputs.shape == ds.inputs.shape
        assert np.array_equal(a.inputs, D.corrupt_inputs(ds, kind, 3, 9).inputs)


def test_sequence_task_shapes():
    ds = D.sequence_task(50, seed=1)
    assert ds.inputs.shape == (50, 12, 20) and ds.mask.shape == (50, 12)
    lengths = ds.mask.sum(axis=1)
    assert lengths.min() >= 6 and lengths.max() <= 12
    assert np.all(ds.inputs[~ds.mask] == 0)
    assert np.all(ds.inputs[ds.mask].sum(axis=1) == 2)
    assert np.array_equal(D.sequence_task(50, seed=1).inputs, ds.inputs)


def test_blobs_separable():
    ds = D.blobs(500, 3, seed=2)
    assert np.all((ds.inputs[:, 0] > 0) == (ds.labels == 1))
