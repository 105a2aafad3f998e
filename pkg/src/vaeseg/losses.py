"""Composite training loss: soft dice + weighted reconstruction L2 + weighted KL."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, make_node


@dataclass(frozen=True)
class LossWeights:
    w_l2: float = 0.1
    w_kl: float = 0.1
    dice_eps: float = 1e-8
    l2_reduction: str = "mean"
    w_dice: float = 1.0

    def __post_init__(self):
        if min(self.w_l2, self.w_kl, self.w_dice) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.dice_eps <= 0:
            raise ValueError("dice_eps must be positive")
        if self.l2_reduction not in ("sum", "mean"):
            raise ValueError("l2_reduction must be 'sum' or 'mean'")


def dice_coefficient(p_pred: Tensor, p_true: Tensor, eps: float = 1e-8) -> Tensor:
    """2·Σ(p_true·p_pred) / (Σp_true² + Σp_pred² + eps), voxelwise sums in float64."""
    if p_pred.shape != p_true.shape:
        raise ValueError(f"dice: shape mismatch {p_pred.shape} vs {p_true.shape}")
    a = p_pred.data.astype(np.float64)
    b = p_true.data.astype(np.float64)
    inter = np.dot(a.reshape(-1), b.reshape(-1))
    denom = np.dot(a.reshape(-1), a.reshape(-1)) + np.dot(b.reshape(-1), b.reshape(-1)) + eps
    value = 2.0 * inter / denom

    def _bw(g):
        # d/da [2I/S] = 2b/S - 2I·2a/S²
        gd = g[0]
        ga = (gd * (2.0 * b / denom - 4.0 * inter * a / denom ** 2)) if p_pred.requires_grad else None
        gb = (gd * (2.0 * a / denom - 4.0 * inter * b / denom ** 2)) if p_true.requires_grad else None
        return ga, gb

    return make_node(np.array([value]), (p_pred, p_true), _bw, "dice")


def dice_loss(seg_probs: Tensor, target: Tensor, eps: float = 1e-8) -> Tensor:
    """Σ over the 3 channels of (1 - dice_c); lies in [0, 3]."""
    if seg_probs.shape[0] != 3 or target.shape[0] != 3:
        raise ValueError("dice_loss expects 3 channels")
    if seg_probs.shape != target.shape:
        raise ValueError(f"dice_loss: shape mismatch {seg_probs.shape} vs {target.shape}")
    c = seg_probs.shape[0]
    n = seg_probs.size // c
    pred = ad.reshape(seg_probs, (c, n))
    true = ad.reshape(target, (c, n))
    terms = [dice_coefficient(ad.slice_range(pred, i, i + 1), ad.slice_range(true, i, i + 1), eps)
             for i in range(c)]
    return ad.add_scalar(ad.weighted_sum([(-1.0, t) for t in terms]), float(c))


def l2_recon_loss(recon: Tensor, target: Tensor, reduction: str = "mean") -> Tensor:
    if recon.shape != target.shape:
        raise ValueError(f"l2: shape mismatch {recon.shape} vs {target.shape}")
    diff = ad.sub(target, recon)
    total = ad.dot(diff, diff)
    if reduction == "sum":
        return total
    if reduction == "mean":
        return ad.scale(total, 1.0 / recon.size)
    raise ValueError(f"unknown reduction {reduction!r}")


def kl_loss(mu: Tensor, logvar: Tensor, n_voxels: int) -> Tensor:
    """(1/N)·Σ (μ² + σ² - log σ² - 1) with σ² = exp(logvar)."""
    if n_voxels <= 0:
        raise ValueError("voxel count N must be positive")
    if mu.shape != logvar.shape:
        raise ValueError("mu and logvar must have equal shapes")
    m = mu.data.astype(np.float64)
    lv = logvar.data.astype(np.float64)
    var = np.exp(lv)
    value = np.sum(m * m + var - lv - 1.0) / n_voxels

    def _bw(g):
        return g[0] * 2.0 * m / n_voxels, g[0] * (var - 1.0) / n_voxels

    return make_node(np.array([value]), (mu, logvar), _bw, "kl")


class LossTerms(NamedTuple):
    total: Tensor
    dice: float
    l2: float
    kl: float


def total_loss(seg_probs: Tensor, target: Tensor, recon: Tensor, image: Tensor,
               mu: Tensor, logvar: Tensor, weights: LossWeights = LossWeights(),
               n_voxels: int | None = None) -> LossTerms:
    """dice + w_l2·L2 + w_kl·KL.  ``n_voxels`` defaults to D·H·W of the image."""
    if n_voxels is None:
        n_voxels = int(np.prod(image.shape[1:]))
    d = dice_loss(seg_probs, target, weights.dice_eps)
    l2 = l2_recon_loss(recon, image, weights.l2_reduction)
    kl = kl_loss(mu, logvar, n_voxels)
    total = ad.weighted_sum([(weights.w_dice, d), (weights.w_l2, l2), (weights.w_kl, kl)])
    return LossTerms(total, d.item(), l2.item(), kl.item())
