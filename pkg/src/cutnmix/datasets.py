"""CIFAR binary readers/writers, a synthetic shape dataset, batching.

CIFAR record layout (bit-exact with the official ``*-bin`` archives):

* CIFAR-10: 1 label byte followed by 3072 pixel bytes, 10,000 records per
  file (``data_batch_1.bin`` .. ``data_batch_5.bin``, ``test_batch.bin``).
* CIFAR-100: 1 coarse-label byte, 1 fine-label byte, 3072 pixel bytes
  (``train.bin`` with 50,000 records, ``test.bin`` with 10,000).

Pixels are three 32x32 row-major planes in R, G, B order, i.e. exactly the
``[C, H, W]`` layout used everywhere in this package.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .augment import ImageBatch
from .errors import FormatError, ParameterError
from .seeding import DATA, SHUFFLE, stream

IMAGE_SHAPE = (3, 32, 32)
PIXEL_BYTES = 3 * 32 * 32
CIFAR10_RECORDS_PER_FILE = 10_000
CIFAR10_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR10_TEST_FILE = "test_batch.bin"
CIFAR100_TRAIN_RECORDS = 50_000
CIFAR100_TEST_RECORDS = 10_000
DATA_ROOT_ENV = "CUTNMIX_DATA"


@dataclass
class Split:
    """An immutable in-memory split: raw ``uint8`` images plus normalization stats.

    ``coarse`` is only populated for CIFAR-100 and only so that re-encoding
    reproduces the source bytes; training never looks at it.
    """

    name: str
    images: np.ndarray  # [n, 3, 32, 32] uint8
    labels: np.ndarray  # [n] int64
    num_classes: int
    mean: np.ndarray = field(repr=False)  # [3]
    std: np.ndarray = field(repr=False)
    coarse: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        self.images.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self) -> int:
        return self.images.shape[0]

    def normalize(self, images: np.ndarray) -> np.ndarray:
        return normalize(images, self.mean, self.std)

    def batch(self, idx: np.ndarray | slice) -> ImageBatch:
        return ImageBatch(self.normalize(self.images[idx]), np.asarray(self.labels[idx]), self.num_classes)

    def batches(self, batch_size: int = 500) -> Iterator[ImageBatch]:
        """Sequential batches covering every sample (for evaluation)."""
        for start in range(0, len(self), batch_size):
            yield self.batch(slice(start, start + batch_size))


def channel_stats(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean/std of ``uint8`` images scaled to [0, 1]."""
    x = images.astype(np.float64) / 255.0
    return x.mean(axis=(0, 2, 3)), x.std(axis=(0, 2, 3))


def normalize(images: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    x = images.astype(np.float32) / np.float32(255.0)
    return (x - mean.astype(np.float32)[:, None, None]) / std.astype(np.float32)[:, None, None]


def denormalize(pixels: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    """Inverse of :func:`normalize`, returning intensities in [0, 1]."""
    return pixels * std.astype(np.float32)[:, None, None] + mean.astype(np.float32)[:, None, None]


# --- binary records -------------------------------------------------------


def record_size(label_bytes: int) -> int:
    return label_bytes + PIXEL_BYTES


def decode_records(raw: bytes, label_bytes: int, expected_records: int | None = None, source: str = "<bytes>"):
    """Split raw bytes into ``(label_columns [n, label_bytes], images [n, 3, 32, 32])``."""
    rec = record_size(label_bytes)
    if expected_records is not None and len(raw) != expected_records * rec:
        raise FormatError(
            f"{source}: expected {expected_records * rec:,} bytes "
            f"({expected_records:,} records x {rec:,}), found {len(raw):,}"
        )
    if len(raw) % rec:
        raise FormatError(f"{source}: length {len(raw):,} is not a multiple of the {rec:,}-byte record size")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, rec)
    return arr[:, :label_bytes].copy(), arr[:, label_bytes:].reshape(-1, *IMAGE_SHAPE).copy()


def encode_records(label_columns: np.ndarray, images: np.ndarray) -> bytes:
    n = images.shape[0]
    cols = np.asarray(label_columns, dtype=np.uint8).reshape(n, -1)
    body = np.asarray(images, dtype=np.uint8).reshape(n, PIXEL_BYTES)
    return np.concatenate([cols, body], axis=1).tobytes()


def _read(path: Path, label_bytes: int, expected: int | None):
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read dataset file {path}: {exc.strerror or exc}") from exc
    return decode_records(raw, label_bytes, expected, str(path))


def _resolve_root(path: str | os.PathLike | None, subdir: str) -> Path:
    if path is None:
        env = os.environ.get(DATA_ROOT_ENV)
        if not env:
            raise ParameterError(f"no dataset path given and ${DATA_ROOT_ENV} is unset")
        path = env
    root = Path(path)
    if (root / subdir).is_dir():
        root = root / subdir
    return root


# keyed by (dataset dir, mtime of first train file) so edited files get fresh stats
_STATS: dict[tuple[str, int], tuple[np.ndarray, np.ndarray]] = {}


def _stats_for(root: Path, probe: Path, images: np.ndarray):
    key = (str(root.resolve()), probe.stat().st_mtime_ns)
    if key not in _STATS:
        _STATS[key] = channel_stats(images)
    return _STATS[key]


def read_cifar10(path: str | os.PathLike | None = None) -> tuple[Split, Split]:
    root = _resolve_root(path, "cifar-10-batches-bin")
    labels, images = [], []
    for name in CIFAR10_TRAIN_FILES:
        lab, img = _read(root / name, 1, CIFAR10_RECORDS_PER_FILE)
        labels.append(lab[:, 0])
        images.append(img)
    tr_lab, tr_img = np.concatenate(labels), np.concatenate(images)
    te_cols, te_img = _read(root / CIFAR10_TEST_FILE, 1, CIFAR10_RECORDS_PER_FILE)
    for lab, src in ((tr_lab, "train"), (te_cols[:, 0], "test")):
        if lab.max() >= 10:
            raise FormatError(f"{root}: CIFAR-10 {src} label {lab.max()} outside [0, 10)")
    mean, std = _stats_for(root, root / CIFAR10_TRAIN_FILES[0], tr_img)
    train = Split("cifar10-train", tr_img, tr_lab.astype(np.int64), 10, mean, std)
    test = Split("cifar10-test", te_img, te_cols[:, 0].astype(np.int64), 10, mean, std)
    return train, test


def read_cifar100(path: str | os.PathLike | None = None) -> tuple[Split, Split]:
    root = _resolve_root(path, "cifar-100-binary")
    tr_cols, tr_img = _read(root / "train.bin", 2, CIFAR100_TRAIN_RECORDS)
    te_cols, te_img = _read(root / "test.bin", 2, CIFAR100_TEST_RECORDS)
    for cols, src in ((tr_cols, "train"), (te_cols, "test")):
        if cols[:, 1].max() >= 100:
            raise FormatError(f"{root}: CIFAR-100 {src} fine label {cols[:, 1].max()} outside [0, 100)")
    mean, std = _stats_for(root, root / "train.bin", tr_img)
    train = Split("cifar100-train", tr_img, tr_cols[:, 1].astype(np.int64), 100, mean, std, coarse=tr_cols[:, 0])
    test = Split("cifar100-test", te_img, te_cols[:, 1].astype(np.int64), 100, mean, std, coarse=te_cols[:, 0])
    return train, test


def encode_split(split: Split, layout: str = "cifar10") -> bytes:
    """Serialize a split to CIFAR-10 (1 label byte) or CIFAR-100 (coarse + fine) records."""
    if layout == "cifar10":
        if split.num_classes > 256:
            raise ParameterError("CIFAR-10 layout stores labels in one byte")
        return encode_records(split.labels[:, None], split.images)
    if layout == "cifar100":
        coarse = split.coarse if split.coarse is not None else np.zeros(len(split), np.uint8)
        return encode_records(np.stack([coarse, split.labels], axis=1), split.images)
    raise ParameterError(f"unknown layout {layout!r}")


def export_cifar10(train: Split, test: Split, out_dir: str | os.PathLike) -> Path:
    """Write a split pair in the CIFAR-10 file set (train must hold 50,000 records)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = CIFAR10_RECORDS_PER_FILE
    if len(train) != n * len(CIFAR10_TRAIN_FILES) or len(test) != n:
        raise ParameterError(f"CIFAR-10 layout needs 50,000 train and 10,000 test records")
    for i, name in enumerate(CIFAR10_TRAIN_FILES):
        sl = slice(i * n, (i + 1) * n)
        (out / name).write_bytes(encode_records(train.labels[sl, None], train.images[sl]))
    (out / CIFAR10_TEST_FILE).write_bytes(encode_split(test))
    return out


# --- synthetic textures ----------------------------------------------------
# Class identity lives in full-frame texture statistics, so any rectangle cut
# from an image carries evidence of its class in proportion to its area, and
# every class is invariant under horizontal flips (the base distortion).

PATTERNS = ("vstripes", "hstripes", "cross", "checker", "dots", "rings")
FREQS = (0.6, 1.2, 0.85, 1.5, 0.45)  # radians per pixel
DUTY = (0.0, 0.55, -0.55, 0.3)  # threshold on the [-1, 1] waveform
TINT = 0.12  # amplitude of the class colour prior


def class_attributes(K: int) -> np.ndarray:
    """``[K, 3]`` (pattern, frequency, duty) index per class."""
    P, F, D = len(PATTERNS), len(FREQS), len(DUTY)
    if K > P * F * D:
        raise ParameterError(f"synthetic dataset supports at most {P * F * D} classes")
    c = np.arange(K)
    return np.stack([c % P, (c // P) % F, c // (P * F)], axis=1)


def _class_tints(K: int) -> np.ndarray:
    """``[K, 3]`` colour offsets: class hues spread evenly around the colour wheel."""
    hue = 2 * np.pi * np.arange(K) / K
    return TINT * np.stack([np.cos(hue), np.cos(hue - 2 * np.pi / 3), np.cos(hue + 2 * np.pi / 3)], axis=1)


def _waveform(pattern, k, xx, yy, rng, n, difficulty):
    col = lambda v: np.asarray(v, np.float32)[:, None, None]  # noqa: E731
    jitter = col(rng.normal(0, 0.08 * difficulty, n))
    c, s = np.cos(jitter), np.sin(jitter)
    u, v = c * xx - s * yy, s * xx + c * yy
    ph1, ph2 = col(rng.uniform(0, 2 * np.pi, n)), col(rng.uniform(0, 2 * np.pi, n))
    r = np.sqrt((xx - col(rng.uniform(0, 32, n))) ** 2 + (yy - col(rng.uniform(0, 32, n))) ** 2)
    diag = k / np.float32(np.sqrt(2))
    waves = (
        np.sin(k * u + ph1),
        np.sin(k * v + ph1),
        0.5 * (np.sin(diag * (u + v) + ph1) + np.sin(diag * (u - v) + ph2)),
        np.sin(k * u + ph1) * np.sin(k * v + ph2),
        0.5 * (np.cos(k * u + ph1) + np.cos(k * v + ph2)),
        np.sin(k * r + ph1),
    )
    out = np.zeros_like(waves[0])
    for i, w in enumerate(waves):
        out = np.where(pattern == i, w, out)
    return out


def _render(labels: np.ndarray, attrs: np.ndarray, rng: np.random.Generator, difficulty: float) -> np.ndarray:
    n = labels.shape[0]
    yy, xx = np.mgrid[0:32, 0:32].astype(np.float32)
    col = lambda v: np.asarray(v, np.float32)[:, None, None]  # noqa: E731
    a = attrs[labels]
    k = col(np.asarray(FREQS)[a[:, 1]] * rng.uniform(0.9, 1.1, n))
    g = _waveform(col(a[:, 0]), k, xx, yy, rng, n, difficulty)
    duty = col(np.asarray(DUTY)[a[:, 2]])
    val = 0.5 + 0.5 * np.tanh(3.0 * (g - duty))

    # a weak class colour prior, as in natural images; the per-image spread dominates it
    tint = _class_tints(attrs.shape[0])[labels][:, :, None, None]
    c1 = np.clip(rng.uniform(0.2, 0.8, (n, 3, 1, 1)) + tint, 0, 1).astype(np.float32)
    sign = np.where(rng.random((n, 1, 1, 1)) < 0.5, -1.0, 1.0).astype(np.float32)
    contrast = rng.uniform(0.5 - 0.3 * difficulty, 0.6, (n, 3, 1, 1)).astype(np.float32)
    c2 = np.clip(c1 + sign * contrast, 0, 1)
    img = c1 * val[:, None] + c2 * (1 - val[:, None])

    # occluding discs of random color
    for _ in range(int(round(1 + 4 * difficulty))):
        cx, cy = col(rng.uniform(0, 32, n)), col(rng.uniform(0, 32, n))
        rad = col(rng.uniform(2, 3 + 4 * difficulty, n))
        m = ((xx - cx) ** 2 + (yy - cy) ** 2 <= rad * rad)[:, None]
        img = np.where(m, rng.uniform(0, 1, (n, 3, 1, 1)).astype(np.float32), img)
    img = img + rng.normal(0, 0.03 + 0.3 * difficulty, img.shape).astype(np.float32)
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def make_synthetic(K: int = 10, n_train: int = 5000, n_test: int = 1000, seed: int = 0, difficulty: float = 0.5) -> tuple[Split, Split]:
    """Procedural 32x32 RGB textures; each class is a (pattern, frequency, duty cycle) triple.

    Colors (around a weak per-class tint), contrast, phase, ring centre,
    occluders and pixel noise are per-image nuisances. ``difficulty`` in [0, 1] scales noise, occlusion,
    contrast spread and angle jitter. Labels are balanced to within one
    sample per class.
    """
    if K < 2:
        raise ParameterError(f"need at least 2 classes, got {K}")
    if not 0.0 <= difficulty <= 1.0:
        raise ParameterError("difficulty must lie in [0, 1]")
    attrs = class_attributes(K)
    splits = []
    for part, n in ((0, n_train), (1, n_test)):
        rng = stream(seed, DATA, part)
        labels = rng.permutation(np.arange(n) % K).astype(np.int64)
        splits.append((labels, _render(labels, attrs, rng, difficulty)))
    (tr_lab, tr_img), (te_lab, te_img) = splits
    mean, std = channel_stats(tr_img)
    return (
        Split(f"synthetic{K}-train", tr_img, tr_lab, K, mean, std),
        Split(f"synthetic{K}-test", te_img, te_lab, K, mean, std),
    )


class BatchSequence(Sequence[ImageBatch]):
    """Lazily materialized batches over fixed index chunks."""

    def __init__(self, split: Split, chunks: list[np.ndarray]):
        self._split = split
        self.chunks = chunks

    def __len__(self) -> int:
        return len(self.chunks)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[k] for k in range(*i.indices(len(self)))]
        return self._split.batch(self.chunks[i])


def shuffled_batches(split: Split, batch_size: int, seed: int, epoch: int) -> BatchSequence:
    """Epoch-specific shuffled batches; a trailing batch smaller than 2 is dropped."""
    if batch_size < 2:
        raise ParameterError(f"batch_size must be >= 2, got {batch_size}")
    order = stream(seed, SHUFFLE, epoch).permutation(len(split))
    chunks = [order[s : s + batch_size] for s in range(0, len(order), batch_size)]
    if chunks and len(chunks[-1]) < 2:
        chunks.pop()
    return BatchSequence(split, chunks)
