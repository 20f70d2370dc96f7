import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gped.data import (Dataset, MaskSpec, apply_mask, load_idx, masking_rate, minibatch, read_csv,
                       read_idx_images, subsample, synth_gaussian_mixture, write_csv, write_idx)
from gped.errors import FormatError, RangeError


def _idx_bytes(magic, dims, payload):
    return struct.pack(">I", magic) + struct.pack(f">{len(dims)}I", *dims) + bytes(int(v) for v in payload)


def test_load_idx_header_arithmetic(tmp_path):
    pixels = np.arange(1568) % 256
    (tmp_path / "img").write_bytes(_idx_bytes(0x803, (2, 28, 28), pixels))
    (tmp_path / "lab").write_bytes(_idx_bytes(0x801, (2,), [3, 7]))
    d = load_idx(tmp_path / "img", tmp_path / "lab")
    assert d.features.shape == (2, 28, 28)
    assert d.features.max() == 1.0  # byte 255
    assert d.features.flat[255] == 1.0
    assert list(d.labels) == [3, 7]


def test_bad_magic(tmp_path):
    (tmp_path / "img").write_bytes(_idx_bytes(0x801, (2, 28, 28), np.zeros(1568, int)))
    with pytest.raises(FormatError) as e:
        load_idx(tmp_path / "img")
    assert e.value.field == "magic"


def test_truncated(tmp_path):
    (tmp_path / "img").write_bytes(_idx_bytes(0x803, (2, 28, 28), np.zeros(1000, int)))
    with pytest.raises(FormatError):
        load_idx(tmp_path / "img")


def test_count_mismatch(tmp_path):
    (tmp_path / "img").write_bytes(_idx_bytes(0x803, (2, 28, 28), np.zeros(1568, int)))
    (tmp_path / "lab").write_bytes(_idx_bytes(0x801, (3,), [0, 1, 2]))
    with pytest.raises(FormatError) as e:
        load_idx(tmp_path / "img", tmp_path / "lab")
    assert e.value.field == "count"


@pytest.mark.parametrize("suffix", ["", ".gz"])
def test_idx_roundtrip_bit_identical(tmp_path, suffix):
    arr = np.random.default_rng(0).integers(0, 256, size=(5, 28, 28), dtype=np.uint8)
    path = tmp_path / ("x.idx" + suffix)
    write_idx(path, arr)
    assert read_idx_images(path).tobytes() == arr.tobytes()


def test_vendored_mnist_subset():
    d = load_idx("tests/data/mnist5k-images-idx3-ubyte.gz", "tests/data/mnist5k-labels-idx1-ubyte.gz")
    assert d.features.shape == (5000, 28, 28)
    assert 0.0 <= d.features.min() and d.features.max() <= 1.0
    assert np.bincount(d.labels).tolist() == [500] * 10


def test_subsample():
    d = synth_gaussian_mixture(3, 20, 0.1, 0)
    full = subsample(d, len(d), 1)
    assert sorted(map(tuple, full.features)) == sorted(map(tuple, d.features))
    a, b = subsample(d, 1, 5), subsample(d, 1, 5)
    np.testing.assert_array_equal(a.features, b.features)
    with pytest.raises(RangeError):
        subsample(d, len(d) + 1, 0)


def test_masking_rates():
    assert masking_rate(14) == 0.25
    assert masking_rate(26) == pytest.approx(0.8622, abs=1e-4)
    assert MaskSpec(26).rate == 676 / 784
    with pytest.raises(RangeError):
        MaskSpec(29)


def test_mask_zero_is_identity():
    d = Dataset(np.random.default_rng(0).random((4, 28, 28)))
    assert apply_mask(d, MaskSpec(0)) is d


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 28), st.integers(0, 2**32 - 1))
def test_mask_zeroes_exactly_one_block(m, seed):
    # strictly positive pixels so pre-existing zeros do not blur the count
    imgs = np.random.default_rng(seed).uniform(0.1, 1.0, size=(6, 28, 28))
    out = apply_mask(Dataset(imgs), MaskSpec(m, 28, seed)).features
    for before, after in zip(imgs, out):
        zero = after == 0
        assert zero.sum() == m * m
        rows, cols = np.flatnonzero(zero.any(1)), np.flatnonzero(zero.any(0))
        assert rows[-1] - rows[0] == m - 1 and cols[-1] - cols[0] == m - 1
        np.testing.assert_array_equal(after[~zero], before[~zero])


def test_subsample_and_mask_commute_in_distribution():
    base = load_idx("tests/data/mnist5k-images-idx3-ubyte.gz", "tests/data/mnist5k-labels-idx1-ubyte.gz")
    a = apply_mask(subsample(base, 2000, 1), MaskSpec(14, 28, 2)).features.reshape(2000, -1).mean(axis=1)
    b = subsample(apply_mask(base, MaskSpec(14, 28, 3)), 2000, 4).features.reshape(2000, -1).mean(axis=1)
    se = np.sqrt(a.var() / len(a) + b.var() / len(b))
    assert abs(a.mean() - b.mean()) < 3 * se
    assert abs(a.var() - b.var()) < 3 * np.sqrt(2 * a.var() ** 2 / len(a) + 2 * b.var() ** 2 / len(b))


def test_gaussian_mixture():
    d = synth_gaussian_mixture(4, 5, 0.0, 0)
    angles = 2 * np.pi * d.labels / 4
    np.testing.assert_allclose(d.features, np.stack([np.cos(angles), np.sin(angles)], 1), atol=1e-15)
    with pytest.raises(RangeError):
        synth_gaussian_mixture(1, 5, 0.1, 0)


def test_gaussian_mixture_linearly_separable():
    d = synth_gaussian_mixture(3, 100, 0.1, 0)
    # least-squares one-vs-rest linear probe as a stand-in for logistic regression
    X = np.hstack([d.features, np.ones((len(d), 1))])
    W, *_ = np.linalg.lstsq(X, np.eye(3)[d.labels], rcond=None)
    assert np.mean(np.argmax(X @ W, 1) == d.labels) > 0.95


def test_minibatch():
    d = synth_gaussian_mixture(3, 10, 0.1, 0)
    idx, x, y = minibatch(d, len(d), np.random.default_rng(0))
    assert sorted(idx) == list(range(len(d)))
    np.testing.assert_array_equal(x, d.features[idx])
    i1 = minibatch(d, 5, np.random.default_rng(9))[0]
    i2 = minibatch(d, 5, np.random.default_rng(9))[0]
    np.testing.assert_array_equal(i1, i2)
    with pytest.raises(RangeError):
        minibatch(d, len(d) + 1, np.random.default_rng(0))


def test_minibatch_uniform_frequency():
    d = synth_gaussian_mixture(2, 25, 0.1, 0)
    rng = np.random.default_rng(1)
    counts = np.zeros(len(d))
    draws = 100_000
    for _ in range(draws // 10):
        counts[minibatch(d, 10, rng)[0]] += 1
    p = 10 / len(d)
    expected, sd = draws / 10 * p, np.sqrt(draws / 10 * p * (1 - p))
    assert np.all(np.abs(counts - expected) < 3.5 * sd)


def test_csv_roundtrip(tmp_path):
    d = synth_gaussian_mixture(3, 4, 0.3, 0)
    write_csv(d, tmp_path / "d.csv")
    assert (tmp_path / "d.csv").read_text().splitlines()[0] == "feature_0,feature_1,label"
    back = read_csv(tmp_path / "d.csv")
    np.testing.assert_array_equal(back.features, d.features)
    np.testing.assert_array_equal(back.labels, d.labels)


def test_labels_validated():
    with pytest.raises(FormatError):
        Dataset(np.zeros((3, 2)), np.array([0, 1]))
    with pytest.raises(RangeError):
        Dataset(np.zeros((2, 2)), np.array([0, 3]), num_classes=3)
