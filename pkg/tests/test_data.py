import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from noprop.data import DatasetHandle, load_idx, load_mnist, synth_blobs
from noprop.errors import DataError, FormatError


def _write_idx(path, magic, arr):
    arr = np.asarray(arr, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic) + struct.pack(">" + "I" * arr.ndim, *arr.shape) + arr.tobytes())


@pytest.fixture
def idx_pair(tmp_path):
    images = np.arange(3 * 4 * 5, dtype=np.uint8).reshape(3, 4, 5) * 4
    labels = np.array([0, 9, 3], dtype=np.uint8)
    ip, lp = tmp_path / "img", tmp_path / "lab"
    _write_idx(ip, 2051, images)
    _write_idx(lp, 2049, labels)
    return ip, lp, images, labels


def test_idx_round_trip(idx_pair):
    ip, lp, images, labels = idx_pair
    ds = load_idx(ip, lp)
    assert ds.images.shape == (3, 4, 5, 1) and ds.input_shape == (4, 5, 1)
    np.testing.assert_array_equal(ds.images[..., 0], images / 255.0)
    np.testing.assert_array_equal(ds.labels, labels)
    assert ds.images.max() <= 1.0


def test_idx_swapped_magic(idx_pair):
    ip, lp, _, _ = idx_pair
    with pytest.raises(FormatError):
        load_idx(ip, ip)
    with pytest.raises(FormatError):
        load_idx(lp, lp)


def test_idx_empty_and_truncated(tmp_path, idx_pair):
    ip, lp, _, _ = idx_pair
    empty = tmp_path / "empty"
    empty.write_bytes(b"")
    with pytest.raises(IOError):
        load_idx(empty, lp)
    cut = tmp_path / "cut"
    cut.write_bytes(ip.read_bytes()[:-7])
    with pytest.raises(IOError):
        load_idx(cut, lp)


def test_idx_count_mismatch(tmp_path, idx_pair):
    ip, _, _, _ = idx_pair
    lp = tmp_path / "lab2"
    _write_idx(lp, 2049, [1, 2])
    with pytest.raises(DataError):
        load_idx(ip, lp)


def test_label_range_checked():
    with pytest.raises(DataError):
        DatasetHandle(np.zeros((2, 1)), np.array([0, 2]), 2)
    with pytest.raises(DataError):
        DatasetHandle(np.zeros((0, 1)), np.zeros(0, dtype=int), 2)


def test_mnist_files(mnist_dir):
    train, test = load_mnist(mnist_dir)
    assert (len(train), len(test)) == (60000, 10000)
    assert train.input_shape == (28, 28, 1)
    assert 0.0 <= train.images.min() and train.images.max() == 1.0
    assert set(np.unique(train.labels)) == set(range(10))


def perceptron_accuracy(x, y, epochs=200):
    """Classic perceptron with bias; reaches 100% on linearly separable data."""
    xb = np.hstack([x, np.ones((len(x), 1))])
    s = np.where(y == 1, 1.0, -1.0)
    w = np.zeros(xb.shape[1])
    for _ in range(epochs):
        mistakes = 0
        for xi, si in zip(xb, s):
            if si * (xi @ w) <= 0:
                w += si * xi
                mistakes += 1
        if mistakes == 0:
            break
    return float(np.mean(np.sign(xb @ w) == s))


def test_blobs_separable_by_perceptron():
    ds = synth_blobs(100, 2, separation=10.0, std=1.0, seed=0)
    assert perceptron_accuracy(ds.images, ds.labels) == 1.0


@given(st.integers(0, 2**16))
def test_blobs_deterministic_and_balanced(seed):
    a, b = synth_blobs(10, 3, seed=seed), synth_blobs(10, 3, seed=seed)
    np.testing.assert_array_equal(a.images, b.images)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert set(a.labels) == {0, 1, 2} and np.all(np.bincount(a.labels) == 10)
    assert not np.array_equal(synth_blobs(10, 3, seed=seed, split="test").images, a.images)
