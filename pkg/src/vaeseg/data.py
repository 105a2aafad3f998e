"""Volume preprocessing, augmentation, label mapping and synthetic phantoms.

Images are float32 arrays shaped (4, D, H, W) with channels in the fixed
order T1, T1c, T2, FLAIR.  Label volumes are uint8 (D, H, W) grids using
the codes 0 background, 1 necrotic/non-enhancing core, 2 edema and
4 enhancing tumor.  Targets are binary float32 (3, D, H, W) stacks ordered
WT, TC, ET, with ET <= TC <= WT voxelwise.
"""

from __future__ import annotations

import logging
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

LABEL_CODES = (0, 1, 2, 4)
MODALITIES = ("T1", "T1c", "T2", "FLAIR")

# mean intensity per tissue class and modality (T1, T1c, T2, FLAIR)
_TISSUE_MEANS = {
    "brain": (1.00, 1.00, 1.00, 1.00),
    2: (0.80, 0.90, 1.70, 1.90),
    1: (0.55, 0.65, 1.35, 1.15),
    4: (0.90, 2.10, 1.20, 1.45),
}
NOISE_LEVELS = {"low": 0.05, "medium": 0.15, "high": 0.30}


def _check_image(image: np.ndarray) -> None:
    if image.ndim != 4 or image.shape[0] != 4:
        raise ValueError(f"image must be (4, D, H, W), got {image.shape}")


def normalize(image: np.ndarray) -> np.ndarray:
    """Per channel, standardize with mean/std taken over nonzero voxels only.

    The transform is applied to every voxel of the channel.  Channels with
    fewer than two nonzero voxels or zero spread are passed through.
    """
    _check_image(image)
    out = np.array(image, dtype=np.float32)
    for c in range(out.shape[0]):
        vals = out[c][out[c] != 0].astype(np.float64)
        std = vals.std() if vals.size >= 2 else 0.0
        if std == 0.0:
            log.warning("channel %d is degenerate; left unnormalized", c)
            continue
        out[c] = (out[c] - vals.mean()) / std
    return out


def labels_to_channels(labels: np.ndarray) -> np.ndarray:
    """Codes -> nested binary channels (WT, TC, ET)."""
    labels = np.asarray(labels)
    bad = ~np.isin(labels, LABEL_CODES)
    if bad.any():
        raise ValueError(f"unknown label codes {sorted(set(np.unique(labels[bad]).tolist()))}")
    wt = labels > 0
    tc = (labels == 1) | (labels == 4)
    et = labels == 4
    return np.stack([wt, tc, et]).astype(np.float32)


def flip_axes(arr: np.ndarray, axes: Sequence[int]) -> np.ndarray:
    """Mirror the spatial axes in ``axes`` (0=D, 1=H, 2=W) of a (C, D, H, W) array."""
    if not axes:
        return arr
    return np.flip(arr, axis=tuple(a + 1 for a in axes))


def augment(image: np.ndarray, target: np.ndarray, rng: np.random.Generator,
            channel_std: Sequence[float] | None = None,
            flip_prob: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Random per-channel intensity scale/shift, then random mirror flips.

    Channel c becomes ``x * u + s * std_c`` with u ~ U(0.9, 1.1) and
    s ~ U(-0.1, 0.1).  ``channel_std`` defaults to 1, the spread of a
    normalized image.  Each spatial axis is then flipped with probability
    ``flip_prob``, identically for image and target.
    """
    _check_image(image)
    n = image.shape[0]
    std = np.ones(n) if channel_std is None else np.asarray(channel_std, dtype=np.float64)
    scale = rng.uniform(0.9, 1.1, size=n)
    shift = rng.uniform(-0.1, 0.1, size=n)
    flips = rng.random(3) < flip_prob
    out = image * scale[:, None, None, None].astype(np.float32) \
        + (shift * std)[:, None, None, None].astype(np.float32)
    axes = [a for a in range(3) if flips[a]]
    out = flip_axes(out, axes)
    tgt = flip_axes(target, axes)
    return np.ascontiguousarray(out, dtype=np.float32), np.ascontiguousarray(tgt)


def pad_to(arr: np.ndarray, shape: Sequence[int]) -> tuple[np.ndarray, tuple[slice, ...]]:
    """Zero-pad the spatial axes of (C, D, H, W) up to ``shape``, split evenly.

    Returns the padded array and the slices that recover the original.
    """
    pads, crop = [(0, 0)], [slice(None)]
    for n, want in zip(arr.shape[1:], shape):
        extra = max(0, int(want) - n)
        lo = extra // 2
        pads.append((lo, extra - lo))
        crop.append(slice(lo, lo + n))
    if all(p == (0, 0) for p in pads):
        return arr, tuple(crop)
    return np.pad(arr, pads), tuple(crop)


def random_crop(image: np.ndarray, target: np.ndarray, crop_shape: Sequence[int],
                rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Uniform random corner; image and target cropped identically."""
    _check_image(image)
    if image.shape[1:] != target.shape[1:]:
        raise ValueError("image and target spatial shapes differ")
    image, _ = pad_to(image, crop_shape)
    target, _ = pad_to(target, crop_shape)
    corner = [int(rng.integers(0, n - c + 1)) for n, c in zip(image.shape[1:], crop_shape)]
    sl = (slice(None),) + tuple(slice(o, o + c) for o, c in zip(corner, crop_shape))
    return np.ascontiguousarray(image[sl]), np.ascontiguousarray(target[sl])


def _ellipsoid(grid, center, radii) -> np.ndarray:
    d2 = sum(((g - c) / r) ** 2 for g, c, r in zip(grid, center, radii))
    return d2 <= 1.0


def _nested(rng, center, radii, lo, hi):
    """A random ellipsoid scaled by k in [lo, hi], shifted so it stays inside."""
    k = rng.uniform(lo, hi)
    direction = rng.standard_normal(3)
    direction /= np.linalg.norm(direction)
    offset = direction * rng.uniform(0, 1 - k) * 0.9
    return center + offset * radii, radii * k


def gen_phantom(seed: int, size=32, difficulty="low") -> tuple[np.ndarray, np.ndarray]:
    """Synthetic 4-modality volume with three nested tumor ellipsoids.

    ``difficulty`` is 'low' | 'medium' | 'high' or a noise std.  The label
    grid is computed from the same geometry used to paint intensities.
    """
    shape = (size,) * 3 if np.isscalar(size) else tuple(int(s) for s in size)
    if len(shape) != 3 or any(s < 16 or s % 8 for s in shape):
        raise ValueError(f"phantom size must be multiples of 8 and >= 16, got {size}")
    sigma = NOISE_LEVELS[difficulty] if isinstance(difficulty, str) else float(difficulty)
    rng = np.random.default_rng(seed)
    dims = np.array(shape, dtype=np.float64)
    grid = np.meshgrid(*(np.arange(n) + 0.5 for n in shape), indexing="ij")

    brain_c = dims / 2 + rng.uniform(-0.03, 0.03, 3) * dims
    brain_r = dims * rng.uniform(0.38, 0.46, 3)
    wt_r = dims * rng.uniform(0.15, 0.22, 3)
    slack = np.maximum(brain_r - wt_r, 0) * 0.5
    wt_c = brain_c + rng.uniform(-1, 1, 3) * slack
    tc_c, tc_r = _nested(rng, wt_c, wt_r, 0.6, 0.8)
    et_c, et_r = _nested(rng, tc_c, tc_r, 0.5, 0.7)

    brain = _ellipsoid(grid, brain_c, brain_r)
    wt = _ellipsoid(grid, wt_c, wt_r)
    tc = _ellipsoid(grid, tc_c, tc_r) & wt
    et = _ellipsoid(grid, et_c, et_r) & tc
    labels = np.zeros(shape, dtype=np.uint8)
    labels[wt] = 2
    labels[tc] = 1
    labels[et] = 4

    image = np.zeros((4, *shape), dtype=np.float64)
    image[:, brain] = np.array(_TISSUE_MEANS["brain"])[:, None]
    for code in (2, 1, 4):
        image[:, labels == code] = np.array(_TISSUE_MEANS[code])[:, None]
    inside = brain | wt
    noise = rng.standard_normal(image.shape) * sigma
    image[:, inside] += noise[:, inside]
    # keep foreground strictly nonzero so normalization statistics see it
    image[:, inside] = np.maximum(image[:, inside], 1e-3)
    return image.astype(np.float32), labels
