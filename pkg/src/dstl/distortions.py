"""Image corruption operators: random pixel masking, clipped Gaussian noise,
and separable Gaussian blur.

Images are numpy float32 arrays of shape (H, W, C), interleaved channel
layout, with every intensity in [0, 1]. This layout is used everywhere in
the package.

All operators are pure functions of (image, parameters, seed). Seeded
randomness uses numpy's PCG64 generator, which is portable and documented,
so a seed reproduces identical bytes on any platform.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np
from scipy.ndimage import correlate1d

from .errors import FormatError, InputError, ParameterError

__all__ = [
    "DistortionKind",
    "DistortionSpec",
    "apply",
    "apply_mask",
    "apply_gaussian_noise",
    "apply_gaussian_blur",
    "gaussian_kernel_1d",
    "make_rng",
    "mix_seed",
    "validate_image",
]

_MIX_GOLDEN = 0x9E3779B97F4A7C15
_MASK64 = (1 << 64) - 1


def mix_seed(seed: int, index: int) -> int:
    """SplitMix64 finalizer over (seed, index); decorrelates per-image streams."""
    z = (int(seed) + (int(index) + 1) * _MIX_GOLDEN) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def make_rng(seed: int) -> np.random.Generator:
    """Named portable generator used repo-wide (PCG64)."""
    return np.random.Generator(np.random.PCG64(seed))


def validate_image(img: np.ndarray) -> np.ndarray:
    if img.ndim != 3:
        raise InputError(f"image must be (H, W, C), got shape {img.shape}")
    if not np.all(np.isfinite(img)) or img.min() < 0.0 or img.max() > 1.0:
        raise InputError("image intensities must be finite and within [0, 1]")
    return img


class DistortionKind(str, Enum):
    MASK = "mask"
    NOISE = "noise"
    BLUR = "blur"


@dataclass(frozen=True)
class DistortionSpec:
    """Tagged description of one corruption process.

    Only the parameters of the active kind are meaningful; the rest are
    ignored. ``seed`` drives all stochastic corruption.
    """

    kind: DistortionKind
    mask_ratio: float = 0.0
    noise_sigma: float = 0.0
    kernel_size: int = 1
    blur_sigma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        kind = DistortionKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if kind is DistortionKind.MASK and not (0.0 <= self.mask_ratio < 1.0):
            raise ParameterError(f"mask_ratio must be in [0, 1), got {self.mask_ratio}")
        if kind is DistortionKind.NOISE and self.noise_sigma < 0.0:
            raise ParameterError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if kind is DistortionKind.BLUR:
            if self.kernel_size < 1 or self.kernel_size % 2 == 0:
                raise ParameterError(f"kernel_size must be odd and >= 1, got {self.kernel_size}")
            if self.blur_sigma <= 0.0:
                raise ParameterError(f"blur_sigma must be > 0, got {self.blur_sigma}")

    _JSON_KEYS = {"kind", "mask_ratio", "noise_sigma", "kernel_size", "blur_sigma", "seed"}

    def to_json(self) -> dict:
        out = {"kind": self.kind.value, "seed": self.seed}
        if self.kind is DistortionKind.MASK:
            out["mask_ratio"] = self.mask_ratio
        elif self.kind is DistortionKind.NOISE:
            out["noise_sigma"] = self.noise_sigma
        else:
            out["kernel_size"] = self.kernel_size
            out["blur_sigma"] = self.blur_sigma
        return out

    @classmethod
    def from_json(cls, obj: dict | str) -> "DistortionSpec":
        if isinstance(obj, str):
            obj = json.loads(obj)
        if not isinstance(obj, dict):
            raise FormatError("distortion spec must be a JSON object")
        unknown = set(obj) - cls._JSON_KEYS
        if unknown:
            raise FormatError(f"unknown distortion spec keys: {sorted(unknown)}")
        if "kind" not in obj:
            raise FormatError("distortion spec missing 'kind'")
        try:
            kind = DistortionKind(obj["kind"])
        except ValueError as e:
            raise FormatError(f"unknown distortion kind {obj['kind']!r}") from e
        return cls(
            kind=kind,
            mask_ratio=float(obj.get("mask_ratio", 0.0)),
            noise_sigma=float(obj.get("noise_sigma", 0.0)),
            kernel_size=int(obj.get("kernel_size", 1)),
            blur_sigma=float(obj.get("blur_sigma", 1.0)),
            seed=int(obj.get("seed", 0)),
        )

    def reseeded(self, extra: int) -> "DistortionSpec":
        """Spec with its seed mixed with ``extra`` (e.g. a realization index)."""
        return replace(self, seed=mix_seed(self.seed, extra))


def apply_mask(img: np.ndarray, ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Zero out exactly round(ratio*H*W) pixel locations, all channels together."""
    if not (0.0 <= ratio < 1.0):
        raise ParameterError(f"mask ratio must be in [0, 1), got {ratio}")
    h, w, _ = img.shape
    n_masked = int(round(ratio * h * w))
    out = img.copy()
    if n_masked == 0:
        return out
    flat = rng.choice(h * w, size=n_masked, replace=False)
    out.reshape(h * w, -1)[flat] = 0.0
    return out


def apply_gaussian_noise(img: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Add i.i.d. N(0, sigma^2) per value, then clamp to [0, 1]."""
    if sigma < 0.0:
        raise ParameterError(f"noise sigma must be >= 0, got {sigma}")
    if sigma == 0.0:
        return img.copy()
    noisy = img + rng.normal(0.0, sigma, size=img.shape)
    return np.clip(noisy, 0.0, 1.0).astype(img.dtype)


def gaussian_kernel_1d(kernel_size: int, sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian kernel of odd length ``kernel_size``."""
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ParameterError(f"kernel_size must be odd and >= 1, got {kernel_size}")
    if sigma <= 0.0:
        raise ParameterError(f"blur sigma must be > 0, got {sigma}")
    r = kernel_size // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def apply_gaussian_blur(img: np.ndarray, kernel_size: int, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with reflect padding; preserves constants exactly."""
    k = gaussian_kernel_1d(kernel_size, sigma)
    out = img.astype(np.float64)
    out = correlate1d(out, k, axis=0, mode="reflect")
    out = correlate1d(out, k, axis=1, mode="reflect")
    return np.clip(out, 0.0, 1.0).astype(img.dtype)


def apply(spec: DistortionSpec, img: np.ndarray, index: int = 0) -> np.ndarray:
    """Dispatch to the operator named by ``spec``.

    The random stream is seeded from spec.seed mixed with ``index`` so each
    image in a batch gets its own decorrelated corruption draw.
    """
    if spec.kind is DistortionKind.MASK:
        return apply_mask(img, spec.mask_ratio, make_rng(mix_seed(spec.seed, index)))
    if spec.kind is DistortionKind.NOISE:
        return apply_gaussian_noise(img, spec.noise_sigma, make_rng(mix_seed(spec.seed, index)))
    return apply_gaussian_blur(img, spec.kernel_size, spec.blur_sigma)
