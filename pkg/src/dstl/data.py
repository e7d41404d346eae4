"""Dataset loading, augmentation, and clean/distorted pair construction.

Two data sources are supported: the CIFAR-10 binary record format (1 label
byte + 3072 channel-planar pixel bytes per record) and a deterministic
synthetic shapes dataset used for tests and desk-scale experiments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import distortions
from .distortions import DistortionSpec, make_rng, mix_seed
from .errors import ConfigError, FormatError, ParameterError

RECORD_BYTES = 3073  # 1 label byte + 32*32*3 pixels, channel-planar


@dataclass
class LabeledImage:
    image: np.ndarray  # (H, W, C) float32 in [0, 1]
    label: int


@dataclass
class PairBatch:
    clean: np.ndarray      # (B, H, W, C)
    distorted: np.ndarray  # (B, H, W, C)
    labels: Optional[np.ndarray] = None


def load_cifar_binary(path) -> List[LabeledImage]:
    """Parse CIFAR-10 style binary records; scales pixel bytes to [0, 1]."""
    data = Path(path).read_bytes()
    if len(data) % RECORD_BYTES != 0:
        offset = (len(data) // RECORD_BYTES) * RECORD_BYTES
        raise FormatError(
            f"{path}: length {len(data)} is not a multiple of {RECORD_BYTES}; "
            f"trailing partial record starts at byte offset {offset}"
        )
    raw = np.frombuffer(data, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    out = []
    for rec in raw:
        label = int(rec[0])
        planes = rec[1:].reshape(3, 32, 32)  # R, G, B planes, row-major
        img = planes.transpose(1, 2, 0).astype(np.float32) / 255.0
        out.append(LabeledImage(image=img, label=label))
    return out


def write_cifar_binary(samples: Sequence[LabeledImage], path) -> None:
    """Write samples in the same binary layout (32x32x3 only)."""
    chunks = []
    for s in samples:
        if s.image.shape != (32, 32, 3):
            raise FormatError(f"CIFAR binary layout requires 32x32x3 images, got {s.image.shape}")
        pixels = np.round(s.image * 255.0).astype(np.uint8).transpose(2, 0, 1)
        chunks.append(bytes([s.label]) + pixels.tobytes())
    Path(path).write_bytes(b"".join(chunks))


# --- synthetic shapes -------------------------------------------------------

def _draw_shape(canvas: np.ndarray, shape_id: int, cx: float, cy: float,
                radius: float, intensity: np.ndarray) -> None:
    h, w, _ = canvas.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    dx, dy = xx - cx, yy - cy
    r = radius
    bar = max(1.5, r / 3.0)
    if shape_id == 0:      # solid disk
        m = dx ** 2 + dy ** 2 <= r ** 2
    elif shape_id == 1:    # solid square
        m = (np.abs(dx) <= r) & (np.abs(dy) <= r)
    elif shape_id == 2:    # diamond
        m = np.abs(dx) + np.abs(dy) <= r
    elif shape_id == 3:    # plus
        m = ((np.abs(dx) <= bar) & (np.abs(dy) <= r)) | ((np.abs(dy) <= bar) & (np.abs(dx) <= r))
    elif shape_id == 4:    # X cross
        m = ((np.abs(dx - dy) <= bar * 1.2) | (np.abs(dx + dy) <= bar * 1.2)) \
            & (np.abs(dx) <= r) & (np.abs(dy) <= r)
    elif shape_id == 5:    # ring
        d2 = dx ** 2 + dy ** 2
        m = (d2 <= r ** 2) & (d2 >= (0.55 * r) ** 2)
    elif shape_id == 6:    # horizontal bar
        m = (np.abs(dy) <= bar) & (np.abs(dx) <= r)
    elif shape_id == 7:    # vertical bar
        m = (np.abs(dx) <= bar) & (np.abs(dy) <= r)
    elif shape_id == 8:    # hollow square frame
        inside = (np.abs(dx) <= r) & (np.abs(dy) <= r)
        inner = (np.abs(dx) <= 0.55 * r) & (np.abs(dy) <= 0.55 * r)
        m = inside & ~inner
    else:                  # triangle (upward)
        m = (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2.0)
    canvas[m] = intensity


def synth_shapes(n: int, num_classes: int, image_size: int, seed: int) -> List[LabeledImage]:
    """Deterministic toy dataset: each class is one geometric glyph, drawn
    with randomized position, size, brightness, and a dim noisy background.
    Classes are balanced round-robin (histogram within +/-1)."""
    if not (2 <= num_classes <= 10):
        raise ParameterError(f"num_classes must be in 2..10, got {num_classes}")
    rng = make_rng(seed)
    out: List[LabeledImage] = []
    for i in range(n):
        label = i % num_classes
        bg = rng.uniform(0.0, 0.12, size=(image_size, image_size, 3)).astype(np.float32)
        r = rng.uniform(0.25, 0.40) * image_size
        cx = rng.uniform(r, image_size - 1 - r)
        cy = rng.uniform(r, image_size - 1 - r)
        base = rng.uniform(0.65, 1.0)
        tint = rng.uniform(0.85, 1.0, size=3)
        color = np.clip(base * tint, 0.0, 1.0).astype(np.float32)
        img = bg
        _draw_shape(img, label, cx, cy, r, color)
        out.append(LabeledImage(image=np.clip(img, 0.0, 1.0), label=label))
    return out


# --- augmentation and pairing ----------------------------------------------

def augment(img: np.ndarray, rng: np.random.Generator,
            scale_range=(0.5, 1.0), flip_prob: float = 0.5) -> np.ndarray:
    """Random resized crop (square, area scale from ``scale_range``,
    bilinear resize back) followed by a horizontal flip with probability
    ``flip_prob``. Scale range (1.0, 1.0) with flip_prob 0 is the identity."""
    lo, hi = scale_range
    if not (0.0 < lo <= hi <= 1.0):
        raise ParameterError(f"scale range must satisfy 0 < lo <= hi <= 1, got {scale_range}")
    h, w, _ = img.shape
    area_scale = rng.uniform(lo, hi)
    side = max(1, int(round(math.sqrt(area_scale) * h)))
    side = min(side, h)
    y0 = int(rng.integers(0, h - side + 1))
    x0 = int(rng.integers(0, w - side + 1))
    do_flip = rng.uniform() < flip_prob

    crop = img[y0:y0 + side, x0:x0 + side]
    if side != h:
        t = torch.from_numpy(np.ascontiguousarray(crop)).permute(2, 0, 1).unsqueeze(0)
        t = F.interpolate(t, size=(h, w), mode="bilinear", align_corners=False)
        crop = t.squeeze(0).permute(1, 2, 0).clamp_(0.0, 1.0).numpy()
    else:
        crop = crop.copy()
    if do_flip:
        crop = crop[:, ::-1].copy()
    return crop


@dataclass(frozen=True)
class AugmentParams:
    scale_range: tuple = (0.5, 1.0)
    flip_prob: float = 0.5

    @classmethod
    def identity(cls) -> "AugmentParams":
        return cls(scale_range=(1.0, 1.0), flip_prob=0.0)


def make_pair_batch(samples: Sequence[LabeledImage], spec: DistortionSpec,
                    indices: Sequence[int], seed: int, epoch: int = 0,
                    aug: AugmentParams | None = None) -> PairBatch:
    """Build a clean/distorted batch.

    Each sample is augmented once with an rng derived from
    (seed, epoch, dataset index); the augmented image is the clean view and
    its corruption via :func:`distortions.apply` (index mixed with epoch and
    dataset index) is the distorted view. Results are schedule-independent.
    """
    aug = aug or AugmentParams()
    clean, distorted, labels = [], [], []
    n = len(samples)
    for idx in indices:
        if not (0 <= idx < n):
            raise ConfigError(f"batch index {idx} outside dataset of size {n}")
        s = samples[idx]
        rng = make_rng(mix_seed(mix_seed(seed, epoch), idx))
        c = augment(s.image, rng, aug.scale_range, aug.flip_prob)
        d = distortions.apply(spec, c, index=epoch * n + idx)
        clean.append(c)
        distorted.append(d)
        labels.append(s.label)
    return PairBatch(
        clean=np.stack(clean).astype(np.float32),
        distorted=np.stack(distorted).astype(np.float32),
        labels=np.asarray(labels, dtype=np.int64),
    )


def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    """Seeded shuffle; the multiset of indices equals range(n) each epoch."""
    return make_rng(mix_seed(seed, 0x5EED ^ epoch)).permutation(n)


def stratified_subset(labels: Sequence[int], fraction: float, seed: int) -> np.ndarray:
    """Class-stratified, seeded subset of indices; nested across fractions
    (a smaller fraction's subset is a prefix of a larger one's, per class)."""
    if not (0.0 < fraction <= 1.0):
        raise ParameterError(f"label fraction must be in (0, 1], got {fraction}")
    labels = np.asarray(labels)
    picked = []
    for c in np.unique(labels):
        idx = np.nonzero(labels == c)[0]
        order = make_rng(mix_seed(seed, int(c))).permutation(len(idx))
        take = int(round(fraction * len(idx)))
        if take == 0:
            raise ConfigError(
                f"label fraction {fraction} yields zero samples for class {int(c)}"
            )
        picked.append(idx[order[:take]])
    return np.sort(np.concatenate(picked))
