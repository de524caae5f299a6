"""Per-peer distortion, CutMix and Cut^nMix mixing.

Everything here is a pure function of its inputs and an explicit
``numpy.random.Generator``. Pixels are ``float32`` arrays laid out as
``[n, C, H, W]``; a rectangle's ``x0``/``w`` run along ``W`` (columns) and
``y0``/``h`` along ``H`` (rows).

The rectangle (mask value 1) carries the *paired* image ``x[perm[i]]`` and
its area fraction tracks ``lam``, which is also the weight the paired label
receives. Rectangles are never clipped, so ``lam`` is never recomputed and
every peer keeps the same mixing ratio.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import BatchSizeError, ConfigurationError, ConsistencyError, ParameterError, ValidationError

SIMPLEX_TOL = 1e-6


@dataclass(frozen=True)
class ImageBatch:
    pixels: np.ndarray  # [n, C, H, W]
    labels: np.ndarray  # [n] int64
    num_classes: int

    def __post_init__(self) -> None:
        if self.pixels.ndim != 4:
            raise ValidationError(f"pixels must be [n, C, H, W], got shape {self.pixels.shape}")
        n = self.pixels.shape[0]
        if n < 1:
            raise ValidationError("an ImageBatch needs at least one sample")
        if self.labels.shape != (n,):
            raise ValidationError(f"labels shape {self.labels.shape} does not match n={n}")
        if self.num_classes < 1:
            raise ValidationError("num_classes must be positive")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValidationError(f"labels must lie in [0, {self.num_classes})")
        if not np.isfinite(self.pixels).all():
            raise ValidationError("pixels contain NaN or Inf")

    def __len__(self) -> int:
        return self.pixels.shape[0]

    @property
    def image_size(self) -> tuple[int, int]:
        """``(W, H)``."""
        return self.pixels.shape[3], self.pixels.shape[2]


@dataclass(frozen=True)
class RectMask:
    x0: int
    y0: int
    w: int
    h: int

    @property
    def area(self) -> int:
        return self.w * self.h

    def to_array(self, W: int, H: int) -> np.ndarray:
        """Binary ``[H, W]`` array with ones inside the rectangle."""
        if not (0 <= self.x0 and self.x0 + self.w <= W and 0 <= self.y0 and self.y0 + self.h <= H):
            raise ValidationError(f"{self} does not fit in a {W}x{H} image")
        m = np.zeros((H, W), dtype=np.uint8)
        m[self.y0 : self.y0 + self.h, self.x0 : self.x0 + self.w] = 1
        return m


@dataclass(frozen=True)
class SoftLabelBatch:
    probs: np.ndarray  # [n, K]

    def __post_init__(self) -> None:
        p = self.probs
        if p.ndim != 2:
            raise ValidationError(f"soft labels must be [n, K], got {p.shape}")
        if (p < 0).any() or np.abs(p.sum(axis=1) - 1.0).max() > SIMPLEX_TOL:
            raise ValidationError("soft-label rows must be nonnegative and sum to 1")

    @property
    def dominant(self) -> np.ndarray:
        """Index of the heaviest class per row (lowest index on ties)."""
        return self.probs.argmax(axis=1)


@dataclass(frozen=True)
class MixedBatch:
    pixels: np.ndarray
    soft_labels: SoftLabelBatch

    def __len__(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True)
class MixPlan:
    """One Cut^nMix draw.

    ``boxes[j, i]`` holds ``(x0, y0, w, h)`` of the rectangle used by peer
    ``j`` for sample ``i``. ``lam`` and ``perm`` are shared by all peers.
    """

    lam: float
    perm: np.ndarray
    boxes: np.ndarray = field(repr=False)  # [J, n, 4] int64

    @property
    def num_peers(self) -> int:
        return self.boxes.shape[0]

    def mask(self, j: int, i: int) -> RectMask:
        x0, y0, w, h = (int(v) for v in self.boxes[j, i])
        return RectMask(x0, y0, w, h)

    @property
    def masks(self) -> tuple[tuple[RectMask, ...], ...]:
        J, n, _ = self.boxes.shape
        return tuple(tuple(self.mask(j, i) for i in range(n)) for j in range(J))


def _round_half_up(v: float) -> int:
    # inputs are nonnegative, so half-up == half-away-from-zero
    return int(math.floor(v + 0.5))


def sample_lambda(rng: np.random.Generator, a: float = 1.0, b: float = 1.0) -> float:
    """Draw the mixing ratio from ``Beta(a, b)``."""
    if not (a > 0 and b > 0):
        raise ParameterError(f"Beta shape parameters must be positive, got a={a}, b={b}")
    return float(rng.beta(a, b))


def box_side(size: int, lam: float) -> int:
    return _round_half_up(size * math.sqrt(lam))


def sample_rect_mask(rng: np.random.Generator, W: int, H: int, lam: float) -> RectMask:
    """Rectangle of area ~``lam * W * H`` placed uniformly inside the image."""
    if W < 1 or H < 1:
        raise ParameterError("image sides must be >= 1")
    if not 0.0 <= lam <= 1.0:
        raise ParameterError(f"lam must lie in [0, 1], got {lam}")
    w, h = box_side(W, lam), box_side(H, lam)
    x0 = int(rng.integers(0, W - w + 1))
    y0 = int(rng.integers(0, H - h + 1))
    return RectMask(x0, y0, w, h)


def _draw_plan(n: int, W: int, H: int, J: int, rng: np.random.Generator) -> MixPlan:
    # Draw order is lam, perm, then each peer's corners in turn. A J=1 draw is
    # therefore a prefix of any J>1 draw on the same generator.
    lam = sample_lambda(rng)
    perm = rng.permutation(n)
    w, h = box_side(W, lam), box_side(H, lam)
    boxes = np.empty((J, n, 4), dtype=np.int64)
    for j in range(J):
        boxes[j, :, 0] = rng.integers(0, W - w + 1, size=n)
        boxes[j, :, 1] = rng.integers(0, H - h + 1, size=n)
        boxes[j, :, 2] = w
        boxes[j, :, 3] = h
    return MixPlan(lam=lam, perm=perm, boxes=boxes)


def cutnmix_plan(n: int, W: int, H: int, J: int, rng: np.random.Generator) -> MixPlan:
    """Shared ``lam`` and pairing, independent rectangles for each of ``J`` peers."""
    if J < 2:
        raise ConfigurationError(f"Cut^nMix needs at least two peers, got J={J}")
    if n < 2:
        raise BatchSizeError(f"mixing needs a batch of at least 2 samples, got {n}")
    return _draw_plan(n, W, H, J, rng)


def mix_labels(labels: np.ndarray, perm: np.ndarray, lam: float, num_classes: int) -> SoftLabelBatch:
    n = labels.shape[0]
    probs = np.zeros((n, num_classes), dtype=np.float64)
    rows = np.arange(n)
    probs[rows, labels] = 1.0 - lam
    probs[rows, labels[perm]] += lam
    probs.setflags(write=False)
    return SoftLabelBatch(probs)


def box_masks(boxes: np.ndarray, W: int, H: int) -> np.ndarray:
    """Boolean ``[n, H, W]`` masks from an ``[n, 4]`` box array."""
    x0, y0, w, h = (boxes[:, k : k + 1] for k in range(4))
    cols = np.arange(W)[None, :]
    rows = np.arange(H)[None, :]
    in_cols = (cols >= x0) & (cols < x0 + w)
    in_rows = (rows >= y0) & (rows < y0 + h)
    return in_rows[:, :, None] & in_cols[:, None, :]


def _paste(pixels: np.ndarray, perm: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    H, W = pixels.shape[2:]
    inside = box_masks(boxes, W, H)[:, None]
    return np.where(inside, pixels[perm], pixels)


def apply_mix_plan(peer_batches: Sequence[ImageBatch], plan: MixPlan) -> list[MixedBatch]:
    """Mix each peer's batch with its own rectangles and the shared pairing.

    The soft labels are computed once and the same object is handed to every
    peer, so all peers train against identical targets.
    """
    if len(peer_batches) != plan.num_peers:
        raise ConsistencyError(f"plan is for {plan.num_peers} peers, got {len(peer_batches)} batches")
    ref = peer_batches[0]
    for b in peer_batches[1:]:
        if b.pixels.shape != ref.pixels.shape:
            raise ConsistencyError("peer batches differ in shape")
        if b.num_classes != ref.num_classes or not np.array_equal(b.labels, ref.labels):
            raise ConsistencyError("peer batches must carry identical labels")
    if plan.boxes.shape[1] != len(ref) or plan.perm.shape[0] != len(ref):
        raise ConsistencyError("plan batch size does not match the peer batches")
    soft = mix_labels(ref.labels, plan.perm, plan.lam, ref.num_classes)
    return [MixedBatch(_paste(b.pixels, plan.perm, plan.boxes[j]), soft) for j, b in enumerate(peer_batches)]


def cutmix_batch(batch: ImageBatch, rng: np.random.Generator) -> tuple[MixedBatch, float, np.ndarray]:
    """Single-network CutMix with the same conventions as Cut^nMix."""
    if len(batch) < 2:
        raise BatchSizeError(f"CutMix needs a batch of at least 2 samples, got {len(batch)}")
    W, H = batch.image_size
    plan = _draw_plan(len(batch), W, H, 1, rng)
    soft = mix_labels(batch.labels, plan.perm, plan.lam, batch.num_classes)
    return MixedBatch(_paste(batch.pixels, plan.perm, plan.boxes[0]), soft), plan.lam, plan.perm


def one_hot_batch(batch: ImageBatch) -> MixedBatch:
    """Wrap an unmixed batch with one-hot targets."""
    probs = np.zeros((len(batch), batch.num_classes), dtype=np.float64)
    probs[np.arange(len(batch)), batch.labels] = 1.0
    return MixedBatch(batch.pixels, SoftLabelBatch(probs))


def hflip(pixels: np.ndarray) -> np.ndarray:
    return pixels[..., ::-1]


def pad_crop(pixels: np.ndarray, offsets: np.ndarray, pad: int) -> np.ndarray:
    """Reflect-pad by ``pad`` and crop back to the original size at ``offsets`` (dy, dx)."""
    n, _, H, W = pixels.shape
    padded = np.pad(pixels, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="reflect")
    out = np.empty_like(pixels)
    for i in range(n):
        dy, dx = offsets[i]
        out[i] = padded[i, :, dy : dy + H, dx : dx + W]
    return out


def base_distort(batch: ImageBatch, rng: np.random.Generator, pad: int = 4) -> ImageBatch:
    """Reflect-pad, random crop back to size, random horizontal flip (p=0.5)."""
    n = len(batch)
    offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
    flips = rng.random(n) < 0.5
    out = pad_crop(batch.pixels, offsets, pad)
    out[flips] = hflip(out[flips])
    return ImageBatch(np.ascontiguousarray(out), batch.labels, batch.num_classes)
