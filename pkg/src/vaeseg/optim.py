"""Adam with polynomial learning-rate decay, L2 kernel penalty, and the epoch loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .autodiff import Tensor, backward
from .data import augment, random_crop
from .losses import LossWeights, total_loss
from .model import Model, forward, is_kernel

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Schedule:
    alpha0: float = 1e-4
    total_epochs: int = 300
    power: float = 0.9

    def __post_init__(self):
        if self.total_epochs < 1 or self.alpha0 < 0:
            raise ValueError("schedule needs total_epochs >= 1 and alpha0 >= 0")


def lr_at(schedule: Schedule, epoch: int) -> float:
    """alpha0 * (1 - e/N_e)^power for 0 <= e <= N_e."""
    if not 0 <= epoch <= schedule.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {schedule.total_epochs}]")
    return schedule.alpha0 * (1.0 - epoch / schedule.total_epochs) ** schedule.power


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, weight_decay: float = 0.0,
              decay_predicate: Callable[[str], bool] = is_kernel) -> None:
    """One bias-corrected Adam update, in place.

    Parameters selected by ``decay_predicate`` get ``2 * weight_decay * w``
    added to their gradient first (classic L2, coupled with the moments).
    Parameters absent from ``grads`` are treated as having zero gradient.
    """
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != {p.shape}")
        g = g.astype(np.float64)
        if weight_decay and decay_predicate(name):
            g = g + 2.0 * weight_decay * p.data
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros(p.shape, np.float32)
            state.v[name] = np.zeros(p.shape, np.float32)
        v = state.v[name]
        m[...] = state.beta1 * m + (1 - state.beta1) * g
        v[...] = state.beta2 * v + (1 - state.beta2) * g * g
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.data -= update.astype(np.float32)


class EpochStats(NamedTuple):
    epoch: int
    lr: float
    dice: float
    l2: float
    kl: float
    total: float
    steps: int


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Per-sample stream, independent of the order samples are processed in."""
    return np.random.default_rng([seed, epoch, index])


def train_step(model: Model, image: np.ndarray, target: np.ndarray, state: AdamState,
               lr: float, rng: np.random.Generator, weights: LossWeights = LossWeights(),
               weight_decay: float = 1e-5):
    x = Tensor(image)
    out = forward(model, x, rng, training=True)
    terms = total_loss(out.seg_probs, Tensor(target), out.recon, x, out.mu, out.logvar, weights)
    grads_by_leaf = backward(terms.total)
    grads = {name: grads_by_leaf[p] for name, p in model.params.items() if p in grads_by_leaf}
    adam_step(model.params, grads, state, lr, weight_decay)
    return terms


def train_epoch(model: Model, dataset: Sequence[tuple[np.ndarray, np.ndarray]], state: AdamState,
                schedule: Schedule, epoch: int, seed: int,
                weights: LossWeights = LossWeights(), weight_decay: float = 1e-5,
                crop_shape: Sequence[int] | None = None, augment_data: bool = True) -> EpochStats:
    """One pass over ``dataset`` (normalized image, target) pairs in a seeded random order.

    The learning rate is fixed for the whole epoch at ``lr_at(schedule, epoch)``.
    """
    if not dataset:
        raise ValueError("empty dataset")
    crop_shape = tuple(crop_shape or model.config.crop_shape)
    lr = lr_at(schedule, epoch)
    order = np.random.default_rng([seed, epoch]).permutation(len(dataset))
    sums = np.zeros(4)
    for idx in order:
        rng = sample_rng(seed, epoch, int(idx))
        image, target = dataset[idx]
        if augment_data:
            image, target = augment(image, target, rng)
        image, target = random_crop(image, target, crop_shape, rng)
        terms = train_step(model, image, target, state, lr, rng, weights, weight_decay)
        sums += (terms.dice, terms.l2, terms.kl, terms.total.item())
    mean = sums / len(dataset)
    stats = EpochStats(epoch, lr, *map(float, mean), steps=len(dataset))
    log.debug("epoch %d lr %.3g total %.4f", epoch, lr, stats.total)
    return stats
