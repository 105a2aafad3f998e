"""Segmentation metrics: Dice, sensitivity/specificity and Hausdorff distances.

Undefined values (empty-set denominators, empty masks) are reported as
``None``.  Distances are in voxel units, i.e. millimetres on a 1 mm
isotropic grid.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import ndimage

from .data import labels_to_channels

CLASSES = ("ET", "WT", "TC")
_CHANNEL = {"WT": 0, "TC": 1, "ET": 2}


def _pair(pred, gt):
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    return pred, gt


def binary_dice(pred, gt) -> float | None:
    pred, gt = _pair(pred, gt)
    denom = int(pred.sum()) + int(gt.sum())
    if denom == 0:
        return None
    return 2.0 * int(np.count_nonzero(pred & gt)) / denom


def sensitivity_specificity(pred, gt) -> tuple[float | None, float | None]:
    pred, gt = _pair(pred, gt)
    tp = int(np.count_nonzero(pred & gt))
    fn = int(np.count_nonzero(~pred & gt))
    tn = int(np.count_nonzero(~pred & ~gt))
    fp = int(np.count_nonzero(pred & ~gt))
    sens = tp / (tp + fn) if tp + fn else None
    spec = tn / (tn + fp) if tn + fp else None
    return sens, spec


def surface(mask: np.ndarray) -> np.ndarray:
    """Set voxels with an unset 6-neighbour; voxels on the grid border count as surface."""
    mask = np.asarray(mask, dtype=bool)
    structure = ndimage.generate_binary_structure(mask.ndim, 1)
    return mask & ~ndimage.binary_erosion(mask, structure=structure, border_value=0)


def nearest_rank(values: np.ndarray, percentile: float) -> float:
    ordered = np.sort(values)
    rank = max(1, math.ceil(percentile / 100.0 * ordered.size))
    return float(ordered[rank - 1])


def directed_distances(src_surface: np.ndarray, dst_surface: np.ndarray) -> np.ndarray:
    """Distance from every ``src`` surface voxel to the nearest ``dst`` surface voxel."""
    dist = ndimage.distance_transform_edt(~dst_surface)
    return dist[src_surface]


def hausdorff(pred, gt, percentile: float = 95) -> float | None:
    """Symmetric surface Hausdorff distance (percentile 100) or its nearest-rank percentile."""
    if percentile not in (95, 100):
        raise ValueError("percentile must be 95 or 100")
    pred, gt = _pair(pred, gt)
    if not pred.any() or not gt.any():
        return None
    sp, sg = surface(pred), surface(gt)
    return max(nearest_rank(directed_distances(sp, sg), percentile),
               nearest_rank(directed_distances(sg, sp), percentile))


def case_metrics(pred_labels: np.ndarray, gt_labels: np.ndarray) -> dict[str, dict]:
    """Per-class metrics for one case, classes ordered ET, WT, TC."""
    pc = labels_to_channels(pred_labels) > 0.5
    gc = labels_to_channels(gt_labels) > 0.5
    out = {}
    for name in CLASSES:
        p, g = pc[_CHANNEL[name]], gc[_CHANNEL[name]]
        sens, spec = sensitivity_specificity(p, g)
        out[name] = {
            "dice": binary_dice(p, g),
            "sensitivity": sens,
            "specificity": spec,
            "hausdorff_95": hausdorff(p, g, 95),
            "hausdorff_max": hausdorff(p, g, 100),
        }
    return out


def mean_report(cases: dict[str, dict[str, dict]]) -> dict[str, dict]:
    """Mean of each metric over cases, skipping undefined entries and counting them."""
    out = {}
    for name in CLASSES:
        row = {}
        keys = next(iter(cases.values()))[name].keys() if cases else ()
        for key in keys:
            vals = [c[name][key] for c in cases.values() if c[name][key] is not None]
            row[key] = float(np.mean(vals)) if vals else None
            row[f"{key}_undefined"] = len(cases) - len(vals)
        out[name] = row
    return out
