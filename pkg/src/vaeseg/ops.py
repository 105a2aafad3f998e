"""Differentiable network operators on (C, D, H, W) volumes.

Each function takes and returns :class:`~vaeseg.autodiff.Tensor` objects
and registers its own backward rule.  Kernels are pure numpy; randomness
comes only through an explicit ``numpy.random.Generator``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, make_node

__all__ = [
    "ConvSpec", "GroupNormSpec", "conv3d", "group_norm", "trilinear_upsample",
    "spatial_dropout", "dense", "reparameterize", "relu", "sigmoid", "add",
]


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1

    def __post_init__(self):
        if self.kernel not in (1, 3):
            raise ValueError("kernel must be 1 or 3")
        if self.stride not in (1, 2):
            raise ValueError("stride must be 1 or 2")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")

    @property
    def padding(self) -> int:
        return self.kernel // 2

    @property
    def weight_shape(self) -> tuple[int, ...]:
        k = self.kernel
        return (self.out_channels, self.in_channels, k, k, k)

    def output_extent(self, n: int) -> int:
        return (n + 2 * self.padding - self.kernel) // self.stride + 1

    def output_shape(self, in_shape) -> tuple[int, ...]:
        c, *spatial = in_shape
        if c != self.in_channels:
            raise ValueError(f"expected {self.in_channels} input channels, got {c}")
        return (self.out_channels, *(self.output_extent(n) for n in spatial))


@dataclass(frozen=True)
class GroupNormSpec:
    channels: int
    groups: int
    eps: float = 1e-5

    def __post_init__(self):
        if self.groups < 1 or self.channels % self.groups:
            raise ValueError(f"{self.groups} groups do not divide {self.channels} channels")

    @classmethod
    def default(cls, channels: int, max_groups: int = 8, eps: float = 1e-5) -> "GroupNormSpec":
        return cls(channels, min(max_groups, channels), eps)


# ----------------------------------------------------------------------
# convolution


def _offsets(k: int):
    for i in range(k):
        for j in range(k):
            for l in range(k):
                yield i, j, l


def conv3d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """Zero-padded 3-D cross-correlation with cubic kernel 1 or 3."""
    if x.data.ndim != 4 or weight.data.ndim != 5:
        raise ValueError("conv3d expects x (C,D,H,W) and weight (Co,Ci,k,k,k)")
    c_out, c_in, k = weight.shape[:3]
    spec = ConvSpec(c_in, c_out, k, stride)
    if weight.shape != spec.weight_shape:
        raise ValueError(f"non-cubic kernel {weight.shape}")
    if bias.shape != (c_out,):
        raise ValueError(f"bias shape {bias.shape} != ({c_out},)")
    out_shape = spec.output_shape(x.shape)
    spatial = out_shape[1:]
    n = int(np.prod(spatial))
    dtype = np.result_type(x.data, weight.data, bias.data)
    w2 = weight.data.reshape(c_out, -1).astype(dtype, copy=False)

    if k == 1:
        xs = x.data[:, ::stride, ::stride, ::stride]
        cols = np.ascontiguousarray(xs, dtype=dtype).reshape(c_in, n)
    else:
        p = spec.padding
        xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (p, p)))
        cols = np.empty((c_in, k ** 3, n), dtype=dtype)
        for t, (i, j, l) in enumerate(_offsets(k)):
            win = xp[:, i:i + stride * spatial[0]:stride,
                     j:j + stride * spatial[1]:stride,
                     l:l + stride * spatial[2]:stride]
            cols[:, t, :] = win.reshape(c_in, n)
        cols = cols.reshape(c_in * k ** 3, n)

    out = w2 @ cols
    out += bias.data[:, None]
    out = out.reshape(out_shape)

    def _bw(g):
        # gradient contractions accumulate in float64 so small entries keep
        # their relative accuracy
        g2 = g.reshape(c_out, n).astype(np.float64)
        gw = (g2 @ cols.T.astype(np.float64)).reshape(weight.shape) if weight.requires_grad else None
        gb = np.sum(g2, axis=1, dtype=np.float64) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = w2.T.astype(np.float64) @ g2
            if k == 1:
                gx = np.zeros_like(x.data)
                gx[:, ::stride, ::stride, ::stride] = gcols.reshape(c_in, *spatial)
            else:
                p = spec.padding
                gcols = gcols.reshape(c_in, k ** 3, *spatial)
                gxp = np.zeros((c_in, *(s + 2 * p for s in x.shape[1:])))
                for t, (i, j, l) in enumerate(_offsets(k)):
                    gxp[:, i:i + stride * spatial[0]:stride,
                        j:j + stride * spatial[1]:stride,
                        l:l + stride * spatial[2]:stride] += gcols[:, t]
                gx = gxp[:, p:-p, p:-p, p:-p]
        return gx, gw, gb

    return make_node(out, (x, weight, bias), _bw, f"conv{k}")


# ----------------------------------------------------------------------
# normalization


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    """Group normalization over (channels-in-group, D, H, W) with per-channel affine."""
    c = x.shape[0]
    GroupNormSpec(c, groups, eps)
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError("gamma/beta must have one entry per channel")
    spatial = x.shape[1:]
    xg = x.data.reshape(groups, -1).astype(np.float64)
    mu = xg.mean(axis=1, keepdims=True)
    var = np.mean((xg - mu) ** 2, axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv_std).reshape(c, -1)
    out = gamma.data[:, None].astype(np.float64) * xhat + beta.data[:, None]

    def _bw(g):
        g64 = g.reshape(c, -1).astype(np.float64)
        ggamma = np.sum(g64 * xhat, axis=1) if gamma.requires_grad else None
        gbeta = np.sum(g64, axis=1) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = (g64 * gamma.data[:, None]).reshape(groups, -1)
            xh = xhat.reshape(groups, -1)
            gx = inv_std * (dxhat - dxhat.mean(axis=1, keepdims=True)
                            - xh * np.mean(dxhat * xh, axis=1, keepdims=True))
            gx = gx.reshape(x.shape)
        return gx, ggamma, gbeta

    return make_node(out.reshape(c, *spatial), (x, gamma, beta), _bw, "group_norm")


# ----------------------------------------------------------------------
# upsampling
#
# Output t samples source s = (t + 0.5)/2 - 0.5, clamped to the edge:
# even outputs 2k mix 0.75*x[k] + 0.25*x[k-1], odd 2k+1 mix
# 0.75*x[k] + 0.25*x[k+1].  The two cases are mirror images, which makes
# the operator commute exactly with axis flips.


def _up_axis(a: np.ndarray, axis: int) -> np.ndarray:
    a = np.moveaxis(a, axis, 0)
    prev = np.concatenate([a[:1], a[:-1]], axis=0)
    nxt = np.concatenate([a[1:], a[-1:]], axis=0)
    even = 0.75 * a + 0.25 * prev
    odd = 0.75 * a + 0.25 * nxt
    out = np.stack([even, odd], axis=1).reshape(2 * a.shape[0], *a.shape[1:])
    return np.moveaxis(out, 0, axis)


def _up_axis_adjoint(g: np.ndarray, axis: int) -> np.ndarray:
    g = np.moveaxis(g, axis, 0)
    n = g.shape[0] // 2
    pair = g.reshape(n, 2, *g.shape[1:])
    ge, go = pair[:, 0], pair[:, 1]
    gx = 0.75 * (ge + go)
    gx[:-1] += 0.25 * ge[1:]
    gx[0] += 0.25 * ge[0]
    gx[1:] += 0.25 * go[:-1]
    gx[-1] += 0.25 * go[-1]
    return np.moveaxis(gx, 0, axis)


def trilinear_upsample(x: Tensor, factor: int = 2) -> Tensor:
    if factor != 2:
        raise ValueError("only factor 2 is supported")
    if x.data.ndim != 4:
        raise ValueError("trilinear_upsample expects (C,D,H,W)")
    out = x.data
    for ax in (1, 2, 3):
        out = _up_axis(out, ax)

    def _bw(g):
        for ax in (3, 2, 1):
            g = _up_axis_adjoint(g, ax)
        return (g,)

    return make_node(out, (x,), _bw, "upsample")


# ----------------------------------------------------------------------
# stochastic ops


def spatial_dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Zero whole channels with probability ``rate``; survivors scaled by 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must lie in [0, 1)")
    if not training or rate == 0.0:
        return x
    keep = rng.random(x.shape[0]) >= rate
    mask = (keep / (1.0 - rate)).astype(x.data.dtype).reshape(-1, *([1] * (x.data.ndim - 1)))
    return make_node(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


def reparameterize(mu: Tensor, logvar: Tensor, rng: np.random.Generator | None,
                   noise: np.ndarray | None = None) -> Tensor:
    """z = mu + exp(logvar/2) * eps with eps ~ N(0, I) treated as a constant."""
    if mu.shape != logvar.shape:
        raise ValueError("mu and logvar must have equal shapes")
    eps = rng.standard_normal(mu.shape) if noise is None else np.broadcast_to(noise, mu.shape)
    eps = np.asarray(eps, dtype=mu.data.dtype)
    std = np.exp(0.5 * logvar.data)
    z = mu.data + std * eps
    return make_node(z, (mu, logvar), lambda g: (g, g * 0.5 * std * eps), "reparameterize")


# ----------------------------------------------------------------------
# dense and elementwise


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if x.data.ndim != 1 or weight.shape != (bias.shape[0], x.shape[0]):
        raise ValueError(f"dense: incompatible shapes x{x.shape} W{weight.shape} b{bias.shape}")
    out = weight.data @ x.data + bias.data

    def _bw(g):
        return weight.data.T @ g, np.outer(g, x.data), g

    return make_node(out, (x, weight, bias), _bw, "dense")


def relu(x: Tensor) -> Tensor:
    # gradient at exactly 0 is 0
    mask = x.data > 0
    return make_node(np.where(mask, x.data, 0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    e = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return make_node(out, (x,), lambda g: (g * out * (1 - out),), "sigmoid")


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return make_node(a.data + b.data, (a, b), lambda g: (g, g), "add")
