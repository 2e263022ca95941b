"""Slice-wise CT preprocessing and training-time augmentation.

Intensities are windowed to a fixed HU range, contrast-stretched per slice
with histogram equalization, and (for training only) augmented with random
integer translations, in-plane rotations and additive Gaussian noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume import Volume3D

DEFAULT_WINDOW = (-100.0, 400.0)
HIST_BINS = 256


@dataclass(frozen=True)
class AugmentParams:
    """Bounds for the three augmentation kinds; all draws come from ``seed``."""

    max_shift_vox: int = 20
    max_rot_deg: float = 10.0
    noise_sigma: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if self.max_shift_vox < 0 or self.max_rot_deg < 0 or self.noise_sigma < 0:
            raise ValueError("augmentation bounds must be nonnegative")
        if not np.isfinite([self.max_rot_deg, self.noise_sigma]).all():
            raise ValueError("augmentation bounds must be finite")


def hu_window(vol: Volume3D, lo: float = DEFAULT_WINDOW[0], hi: float = DEFAULT_WINDOW[1]) -> Volume3D:
    """Clamp every voxel into the HU window [lo, hi]."""
    if lo >= hi:
        raise ValueError(f"window requires lo < hi, got [{lo}, {hi}]")
    data = np.clip(vol.data, lo, hi)
    return Volume3D(data.astype(vol.data.dtype), vol.spacing)


def hist_equalize_slice(
    slice_img: np.ndarray,
    bins: int = HIST_BINS,
    value_range: tuple[float, float] = DEFAULT_WINDOW,
) -> np.ndarray:
    """Histogram-equalize one 2-D slice over ``value_range``.

    Standard CDF remapping: a value in bin b maps to
    ``lo + (hi - lo) * (cdf(b) - cdf_min) / (1 - cdf_min)`` where cdf is the
    normalized cumulative histogram and cdf_min the cdf of the first
    nonempty bin. The mapping is monotone nondecreasing and stays in range.
    """
    lo, hi = float(value_range[0]), float(value_range[1])
    if hi <= lo:
        raise ValueError(f"degenerate range [{lo}, {hi}]")
    if bins < 1:
        raise ValueError("bins must be positive")
    slice_img = np.asarray(slice_img)
    if slice_img.size == 0:
        raise ValueError("empty slice")

    hist, _ = np.histogram(slice_img, bins=bins, range=(lo, hi))
    cdf = np.cumsum(hist) / slice_img.size
    first = int(np.argmax(hist > 0))
    cdf_min = cdf[first]

    bin_idx = np.clip(
        ((slice_img.astype(np.float64) - lo) / (hi - lo) * bins).astype(np.intp), 0, bins - 1
    )
    if cdf_min >= 1.0:
        return np.full(slice_img.shape, lo, dtype=np.float32)
    mapped = lo + (hi - lo) * (cdf[bin_idx] - cdf_min) / (1.0 - cdf_min)
    return mapped.astype(np.float32)


def equalize_volume(vol: Volume3D, bins: int = HIST_BINS,
                    value_range: tuple[float, float] = DEFAULT_WINDOW) -> Volume3D:
    """Apply hist_equalize_slice to every z slice."""
    out = np.stack([hist_equalize_slice(s, bins, value_range) for s in vol.data])
    return Volume3D(out, vol.spacing)


def _shift2d(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Integer translation with border clamp: out[y, x] = in[y - dy, x - dx]."""
    h, w = img.shape
    ys = np.clip(np.arange(h) - dy, 0, h - 1)
    xs = np.clip(np.arange(w) - dx, 0, w - 1)
    return img[ys[:, None], xs[None, :]]


def augment(
    slice_img: np.ndarray,
    label_slice: np.ndarray,
    params: AugmentParams,
) -> tuple[np.ndarray, np.ndarray]:
    """Randomly translate, rotate and noise one (intensity, label) slice pair.

    Both slices get the identical geometric transform (bilinear resampling for
    intensities, nearest for labels, borders clamped, rotation about the slice
    centre); Gaussian noise is added to the intensities only. Deterministic
    given ``params.seed``.
    """
    slice_img = np.asarray(slice_img)
    label_slice = np.asarray(label_slice)
    if slice_img.shape != label_slice.shape:
        raise ValueError(f"dim mismatch: {slice_img.shape} vs {label_slice.shape}")

    rng = np.random.default_rng(params.seed)
    m = params.max_shift_vox
    dx = int(rng.integers(-m, m + 1)) if m else 0
    dy = int(rng.integers(-m, m + 1)) if m else 0
    angle = float(rng.uniform(-params.max_rot_deg, params.max_rot_deg)) if params.max_rot_deg else 0.0

    img = slice_img.astype(np.float32)
    lab = label_slice
    if dx or dy:
        img = _shift2d(img, dy, dx)
        lab = _shift2d(lab, dy, dx)
    if angle != 0.0:
        img = ndimage.rotate(img, angle, reshape=False, order=1, mode="nearest")
        lab = ndimage.rotate(lab, angle, reshape=False, order=0, mode="nearest")
    if params.noise_sigma > 0:
        img = img + rng.normal(0.0, params.noise_sigma, size=img.shape).astype(np.float32)
    return img, lab
