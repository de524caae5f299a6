import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_split
from cutnmix.datasets import (
    Split,
    decode_records,
    denormalize,
    encode_records,
    encode_split,
    export_cifar10,
    make_synthetic,
    normalize,
    read_cifar10,
    read_cifar100,
    record_size,
    shuffled_batches,
)
from cutnmix.errors import FormatError, ParameterError


def test_record_sizes():
    assert record_size(1) * 10_000 == 30_730_000
    assert record_size(2) * 50_000 == 153_700_000


@pytest.fixture(scope="module")
def cifar10_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("c10")
    export_cifar10(random_split(50_000, 10, 0), random_split(10_000, 10, 1), root / "cifar-10-batches-bin")
    return root


def test_cifar10_files_and_round_trip(cifar10_dir):
    d = cifar10_dir / "cifar-10-batches-bin"
    assert (d / "data_batch_1.bin").stat().st_size == 30_730_000
    train, test = read_cifar10(cifar10_dir)
    assert len(train) == 50_000 and len(test) == 10_000 and train.num_classes == 10
    assert 0 <= train.labels[0] < 10
    assert encode_split(test) == (d / "test_batch.bin").read_bytes()
    assert encode_records(train.labels[:10_000, None], train.images[:10_000]) == (d / "data_batch_1.bin").read_bytes()


def test_cifar10_env_root(cifar10_dir, monkeypatch):
    monkeypatch.setenv("CUTNMIX_DATA", str(cifar10_dir))
    train, _ = read_cifar10()
    assert len(train) == 50_000


def test_missing_root(monkeypatch):
    monkeypatch.delenv("CUTNMIX_DATA", raising=False)
    with pytest.raises(ParameterError):
        read_cifar10()


def test_cifar10_truncated_file(tmp_path):
    export_cifar10(random_split(50_000, 10, 0), random_split(10_000, 10, 1), tmp_path)
    raw = (tmp_path / "data_batch_3.bin").read_bytes()
    (tmp_path / "data_batch_3.bin").write_bytes(raw[:-1])
    with pytest.raises(FormatError, match="30,730,000"):
        read_cifar10(tmp_path)


def test_cifar100_round_trip(cifar100_dir):
    d = cifar100_dir / "cifar-100-binary"
    assert (d / "train.bin").stat().st_size == 153_700_000
    train, test = read_cifar100(cifar100_dir)
    assert len(train) == 50_000 and train.num_classes == 100
    assert train.labels.max() < 100
    raw = (d / "test.bin").read_bytes()
    assert encode_split(test, "cifar100") == raw
    # the label used is the second (fine) byte
    assert np.array_equal(test.labels, np.frombuffer(raw, np.uint8).reshape(-1, 3074)[:, 1])


def test_cifar100_wrong_length(tmp_path):
    (tmp_path / "train.bin").write_bytes(b"\0" * 3074 * 3)
    (tmp_path / "test.bin").write_bytes(b"\0" * 3074 * 3)
    with pytest.raises(FormatError, match="153,700,000"):
        read_cifar100(tmp_path)


def test_decode_rejects_partial_records():
    with pytest.raises(FormatError):
        decode_records(b"\0" * 3074, 1)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 5), label_bytes=st.sampled_from([1, 2]))
def test_codec_round_trip(seed, n, label_bytes):
    raw = np.random.default_rng(seed).integers(0, 256, n * record_size(label_bytes), dtype=np.uint8).tobytes()
    cols, images = decode_records(raw, label_bytes, n)
    assert images.shape == (n, 3, 32, 32)
    assert encode_records(cols, images) == raw


# --- normalization --------------------------------------------------------------


def test_normalization_invertible():
    s = random_split(200, 10, 3)
    x = s.normalize(s.images)
    assert np.abs(denormalize(x, s.mean, s.std) - s.images / 255.0).max() <= 1e-6
    assert np.abs(x.mean(axis=(0, 2, 3))).max() < 0.05


def test_stats_come_from_training_split():
    train, test = make_synthetic(3, 60, 30, seed=2)
    assert train.mean is test.mean
    flat = train.images.astype(np.float64) / 255
    np.testing.assert_allclose(train.mean, flat.mean(axis=(0, 2, 3)))


def test_splits_are_read_only():
    train, _ = make_synthetic(3, 30, 9)
    with pytest.raises(ValueError):
        train.images[0, 0, 0, 0] = 1


# --- synthetic -------------------------------------------------------------------


def test_synthetic_deterministic():
    a, b = make_synthetic(5, 100, 50, seed=7), make_synthetic(5, 100, 50, seed=7)
    c = make_synthetic(5, 100, 50, seed=8)
    assert all(np.array_equal(x.images, y.images) and np.array_equal(x.labels, y.labels) for x, y in zip(a, b))
    assert not np.array_equal(a[0].images, c[0].images)


@pytest.mark.parametrize("K,n", [(10, 5000), (7, 103), (2, 3)])
def test_synthetic_balanced(K, n):
    train, _ = make_synthetic(K, n, 2, seed=0)
    counts = np.bincount(train.labels, minlength=K)
    assert counts.max() - counts.min() <= 1
    assert train.images.shape == (n, 3, 32, 32) and train.images.dtype == np.uint8


@pytest.mark.parametrize("difficulty", [0.0, 0.5, 1.0])
def test_synthetic_nearest_centroid_beats_chance(difficulty):
    """Class separability: nearest class centroid on raw pixels scores well above 1/K."""
    K = 10
    train, test = make_synthetic(K, 2000, 1000, seed=0, difficulty=difficulty)
    flat = lambda s: s.images.reshape(len(s), -1).astype(np.float64)  # noqa: E731
    cent = np.stack([flat(train)[train.labels == k].mean(0) for k in range(K)])
    d2 = (flat(test) ** 2).sum(1)[:, None] - 2 * flat(test) @ cent.T + (cent**2).sum(1)[None]
    acc = (d2.argmin(1) == test.labels).mean()
    # chance is 0.1; 1.5x chance is ~5 binomial standard deviations above it at n=1000
    assert acc > 1.5 / K


def test_synthetic_bad_params():
    with pytest.raises(ParameterError):
        make_synthetic(1, 10, 10)
    with pytest.raises(ParameterError):
        make_synthetic(3, 10, 10, difficulty=1.5)


# --- shuffling ---------------------------------------------------------------------


def test_shuffled_batches():
    train, _ = make_synthetic(3, 41, 3)
    a = shuffled_batches(train, 8, seed=0, epoch=0)
    b = shuffled_batches(train, 8, seed=0, epoch=0)
    c = shuffled_batches(train, 8, seed=0, epoch=1)
    assert [x.tolist() for x in a.chunks] == [x.tolist() for x in b.chunks]
    assert [x.tolist() for x in a.chunks] != [x.tolist() for x in c.chunks]
    idx = np.concatenate(a.chunks)
    assert len(idx) == 40 and len(set(idx.tolist())) == 40  # one leftover sample dropped
    assert all(len(x) >= 2 for x in a)
    batch = a[0]
    np.testing.assert_array_equal(batch.labels, train.labels[a.chunks[0]])


def test_shuffled_batches_keeps_pairs_and_rejects_tiny_batches():
    train, _ = make_synthetic(3, 42, 3)
    assert sum(len(c) for c in shuffled_batches(train, 8, 0, 0).chunks) == 42
    with pytest.raises(ParameterError):
        shuffled_batches(train, 1, 0, 0)


def test_epoch_orders_differ_monte_carlo():
    train, _ = make_synthetic(3, 100, 3)
    firsts = [tuple(shuffled_batches(train, 100, 0, e).chunks[0]) for e in range(50)]
    assert len(set(firsts)) == 50
