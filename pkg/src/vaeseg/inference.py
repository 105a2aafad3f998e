"""Forward-only prediction, flip test-time augmentation, ensembling and decoding."""

from __future__ import annotations

from itertools import combinations
from typing import Sequence

import numpy as np

from .autodiff import Tensor
from .data import flip_axes, pad_to
from .model import Model, forward_seg_only

FLIP_SUBSETS: tuple[tuple[int, ...], ...] = tuple(
    s for r in range(4) for s in combinations(range(3), r))


def predict(model: Model, volume: np.ndarray) -> np.ndarray:
    """Segmentation probabilities (3, D, H, W) for a whole volume.

    Spatial dims that are not multiples of the encoder's downsampling
    factor are zero-padded symmetrically and the output cropped back.
    """
    if volume.ndim != 4 or volume.shape[0] != model.config.input_channels:
        raise ValueError(f"volume must be ({model.config.input_channels}, D, H, W), got {volume.shape}")
    step = 2 ** (model.config.levels - 1)
    want = [-(-n // step) * step for n in volume.shape[1:]]
    padded, crop = pad_to(np.asarray(volume, dtype=np.float32), want)
    probs = forward_seg_only(model, Tensor(padded)).data
    return np.ascontiguousarray(probs[crop])


def tta_predict(model: Model, volume: np.ndarray) -> np.ndarray:
    """Average of the 8 mirror-flipped predictions, each flipped back."""
    acc = np.zeros((3, *volume.shape[1:]), dtype=np.float64)
    for axes in FLIP_SUBSETS:
        p = predict(model, np.ascontiguousarray(flip_axes(volume, axes)))
        acc += flip_axes(p, axes)
    return (acc / len(FLIP_SUBSETS)).astype(np.float32)


def _order_free_mean(stack: np.ndarray) -> np.ndarray:
    # sorting along the member axis makes the float64 sum independent of member order
    ordered = np.sort(stack.astype(np.float64), axis=0)
    total = np.zeros(stack.shape[1:], dtype=np.float64)
    for member in ordered:
        total += member
    return total / stack.shape[0]


def ensemble_predict(models: Sequence[Model], volume: np.ndarray, use_tta: bool = True) -> np.ndarray:
    """Voxelwise arithmetic mean of the members' (TTA) probabilities."""
    if not models:
        raise ValueError("ensemble needs at least one model")
    cfg = models[0].config
    for m in models[1:]:
        if m.config != cfg:
            raise ValueError("ensemble members must share one model configuration")
    fn = tta_predict if use_tta else predict
    preds = np.stack([fn(m, volume) for m in models])
    if len(models) == 1:
        return preds[0]
    return _order_free_mean(preds).astype(np.float32)


def channels_to_labels(probs: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Gated decode WT -> TC -> ET, so the label map is nested by construction."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    wt, tc, et = probs[0] > threshold, probs[1] > threshold, probs[2] > threshold
    labels = np.zeros(probs.shape[1:], dtype=np.uint8)
    labels[wt] = 2
    labels[wt & tc] = 1
    labels[wt & tc & et] = 4
    return labels
