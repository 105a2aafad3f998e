"""Encoder / segmentation-decoder network with a VAE regularization branch.

Parameters live in a flat, ordered ``{name: Tensor}`` mapping whose names
and shapes are a pure function of :class:`ModelConfig`::

    encoder.init.conv.weight            first 3x3x3 conv, 4 -> f
    encoder.L{l}.down.conv.weight       stride-2 conv entering level l >= 1
    encoder.L{l}.B{b}.gn{1,2}.gamma     pre-activation ResNet-like blocks
    encoder.L{l}.B{b}.conv{1,2}.weight
    decoder.L{l}.up.conv.weight         1x1x1 channel halving before upsampling
    decoder.L{l}.B0.*                   one block per decoder level
    decoder.head.conv.weight            1x1x1 conv to the 3 sigmoid channels
    vae.VD.*, vae.VU.*, vae.VUp{l}.*, vae.VBlock{l}.*, vae.Vend.*

(each ``weight`` has a matching ``bias``; each ``gamma`` a ``beta``).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .ops import (ConvSpec, GroupNormSpec, add, conv3d, dense, group_norm, relu,
                  reparameterize, sigmoid, spatial_dropout, trilinear_upsample)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    base_filters: int = 8
    levels: int = 4
    blocks_per_level: tuple[int, ...] = (1, 2, 2, 4)
    input_channels: int = 4
    seg_channels: int = 3
    crop_shape: tuple[int, int, int] = (32, 32, 32)
    dropout_rate: float = 0.2
    gn_groups: int = 8
    gn_eps: float = 1e-5
    latent_total: int | None = None
    vd_conv_channels: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "blocks_per_level", tuple(int(b) for b in self.blocks_per_level))
        object.__setattr__(self, "crop_shape", tuple(int(c) for c in self.crop_shape))
        if self.latent_total is None:
            object.__setattr__(self, "latent_total", 8 * self.base_filters)
        if self.vd_conv_channels is None:
            object.__setattr__(self, "vd_conv_channels", max(1, self.base_filters // 2))
        self.validate()

    @classmethod
    def full(cls, **overrides) -> "ModelConfig":
        kw = dict(base_filters=32, crop_shape=(160, 192, 128))
        kw.update(overrides)
        return cls(**kw)

    def validate(self) -> None:
        f = self.base_filters
        if f < 1 or self.levels < 2:
            raise ConfigError("need base_filters >= 1 and levels >= 2")
        if len(self.blocks_per_level) != self.levels or min(self.blocks_per_level) < 1:
            raise ConfigError("blocks_per_level needs one positive entry per level")
        if self.input_channels != 4 or self.seg_channels != 3:
            raise ConfigError("the network takes 4 modalities and predicts 3 subregions")
        if self.latent_total % 2:
            raise ConfigError("latent_total must split evenly into mean and log-variance")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)")
        if len(self.crop_shape) != 3:
            raise ConfigError("crop_shape must have 3 entries")
        # 2^(levels-1) for the encoder, one more halving for the VAE's strided conv
        step = 2 ** self.levels
        for n in self.crop_shape:
            if n < step or n % step:
                raise ConfigError(f"crop dims must be positive multiples of {step}, got {self.crop_shape}")
        for c in self.level_channels + (self.vd_conv_channels,):
            groups = min(self.gn_groups, c)
            if c % groups:
                raise ConfigError(f"group count {groups} does not divide {c} channels")

    @property
    def level_channels(self) -> tuple[int, ...]:
        return tuple(self.base_filters * 2 ** l for l in range(self.levels))

    @property
    def latent_dims(self) -> int:
        return self.latent_total // 2

    @property
    def endpoint_shape(self) -> tuple[int, ...]:
        k = 2 ** (self.levels - 1)
        return (self.level_channels[-1], *(n // k for n in self.crop_shape))

    @property
    def vd_shape(self) -> tuple[int, ...]:
        k = 2 ** self.levels
        return (self.vd_conv_channels, *(n // k for n in self.crop_shape))

    def gn_spec(self, channels: int) -> GroupNormSpec:
        return GroupNormSpec.default(channels, self.gn_groups, self.gn_eps)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blocks_per_level"] = list(self.blocks_per_level)
        d["crop_shape"] = list(self.crop_shape)
        return d


def _conv_shapes(shapes, name, c_in, c_out, k=3):
    shapes[f"{name}.weight"] = (c_out, c_in, k, k, k)
    shapes[f"{name}.bias"] = (c_out,)


def _gn_shapes(shapes, name, c):
    shapes[f"{name}.gamma"] = (c,)
    shapes[f"{name}.beta"] = (c,)


def _block_shapes(shapes, name, c):
    _gn_shapes(shapes, f"{name}.gn1", c)
    _conv_shapes(shapes, f"{name}.conv1", c, c)
    _gn_shapes(shapes, f"{name}.gn2", c)
    _conv_shapes(shapes, f"{name}.conv2", c, c)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape table; the init order of :func:`build_model`."""
    ch = cfg.level_channels
    s: dict[str, tuple[int, ...]] = {}
    _conv_shapes(s, "encoder.init.conv", cfg.input_channels, ch[0])
    for l in range(cfg.levels):
        if l:
            _conv_shapes(s, f"encoder.L{l}.down.conv", ch[l - 1], ch[l])
        for b in range(cfg.blocks_per_level[l]):
            _block_shapes(s, f"encoder.L{l}.B{b}", ch[l])
    for l in reversed(range(cfg.levels - 1)):
        _conv_shapes(s, f"decoder.L{l}.up.conv", ch[l + 1], ch[l], k=1)
        _block_shapes(s, f"decoder.L{l}.B0", ch[l])
    _conv_shapes(s, "decoder.head.conv", ch[0], cfg.seg_channels, k=1)

    vd = cfg.vd_shape
    flat = int(np.prod(vd))
    _gn_shapes(s, "vae.VD.gn", ch[-1])
    _conv_shapes(s, "vae.VD.conv", ch[-1], cfg.vd_conv_channels)
    s["vae.VD.dense.weight"] = (cfg.latent_total, flat)
    s["vae.VD.dense.bias"] = (cfg.latent_total,)
    s["vae.VU.dense.weight"] = (flat, cfg.latent_dims)
    s["vae.VU.dense.bias"] = (flat,)
    _conv_shapes(s, "vae.VU.conv", cfg.vd_conv_channels, ch[-1], k=1)
    for l in reversed(range(cfg.levels - 1)):
        _conv_shapes(s, f"vae.VUp{l}.conv", ch[l + 1], ch[l], k=1)
        _block_shapes(s, f"vae.VBlock{l}", ch[l])
    _conv_shapes(s, "vae.Vend.conv", ch[0], cfg.input_channels, k=1)
    return s


def is_kernel(name: str) -> bool:
    """Convolution kernels are the only weight-decayed parameters."""
    return name.endswith(".weight") and ".conv" in name


def is_vae_param(name: str) -> bool:
    return name.startswith("vae.")


def is_seg_decoder_param(name: str) -> bool:
    return name.startswith("decoder.")


def is_encoder_param(name: str) -> bool:
    return name.startswith("encoder.")


class Model:
    """Configuration plus named parameter leaves."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self.params[name]
        except KeyError:
            raise KeyError(f"parameter {name!r} missing from model") from None

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def num_parameters(self) -> int:
        return sum(v.size for v in self.params.values())

    def has_vae(self) -> bool:
        return any(is_vae_param(k) for k in self.params)


HEAD_KERNEL = "decoder.head.conv.weight"


def build_model(config: ModelConfig, init_seed: int = 0) -> Model:
    """He-uniform conv/dense weights (bound sqrt(6/fan_in)), zero biases, unit gamma.

    The segmentation head kernel starts at zero so every output channel
    begins at probability 0.5 instead of a saturated sigmoid.
    """
    rng = np.random.default_rng(init_seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name == HEAD_KERNEL:
            arr = np.zeros(shape)
        elif name.endswith(".weight"):
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            arr = rng.uniform(-bound, bound, size=shape)
        elif name.endswith(".gamma"):
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        params[name] = Tensor(arr, requires_grad=True)
    return Model(config, params)


def model_from_arrays(config: ModelConfig, arrays: dict[str, np.ndarray]) -> Model:
    """Wrap loaded arrays; VAE parameters may be absent (inference-only)."""
    expected = param_shapes(config)
    params = {}
    for name, arr in arrays.items():
        if name not in expected:
            raise ConfigError(f"unexpected parameter {name!r}")
        if tuple(arr.shape) != expected[name]:
            raise ConfigError(f"{name}: shape {arr.shape} != {expected[name]}")
        params[name] = Tensor(arr, requires_grad=True)
    missing = [n for n in expected if n not in params and not is_vae_param(n)]
    if missing:
        raise ConfigError(f"missing parameters: {missing[:3]}...")
    return Model(config, params)


# ----------------------------------------------------------------------
# shape propagation


def infer_shapes(config: ModelConfig, input_shape) -> list[tuple[str, tuple[int, ...]]]:
    """Layer output shapes by symbolic propagation; nothing is allocated."""
    input_shape = tuple(int(n) for n in input_shape)
    if len(input_shape) != 4 or input_shape[0] != config.input_channels:
        raise ConfigError(f"input must be ({config.input_channels}, D, H, W), got {input_shape}")
    down = 2 ** (config.levels - 1)
    if any(n % down for n in input_shape[1:]):
        raise ConfigError(f"spatial dims must be divisible by {down}")
    ch = config.level_channels
    rows: list[tuple[str, tuple[int, ...]]] = []

    shape = ConvSpec(input_shape[0], ch[0]).output_shape(input_shape)
    rows.append(("encoder.init", shape))
    skips = {}
    for l in range(config.levels):
        if l:
            shape = ConvSpec(ch[l - 1], ch[l], 3, 2).output_shape(shape)
            rows.append((f"encoder.L{l}.down", shape))
        for b in range(config.blocks_per_level[l]):
            shape = ConvSpec(ch[l], ch[l]).output_shape(ConvSpec(ch[l], ch[l]).output_shape(shape))
            rows.append((f"encoder.L{l}.B{b}", shape))
        skips[l] = shape
    endpoint = shape
    rows.append(("encoder.endpoint", endpoint))

    for l in reversed(range(config.levels - 1)):
        shape = ConvSpec(ch[l + 1], ch[l], 1).output_shape(shape)
        shape = (shape[0], *(2 * n for n in shape[1:]))
        if shape != skips[l]:
            raise ConfigError(f"decoder level {l} shape {shape} != skip {skips[l]}")
        rows.append((f"decoder.L{l}.up", shape))
        rows.append((f"decoder.L{l}.B0", shape))
    shape = ConvSpec(ch[0], config.seg_channels, 1).output_shape(shape)
    rows.append(("decoder.head", shape))

    vd = ConvSpec(ch[-1], config.vd_conv_channels, 3, 2).output_shape(endpoint)
    rows.append(("vae.VD.conv", vd))
    rows.append(("VD", (config.latent_total,)))
    rows.append(("VDraw", (config.latent_dims,)))
    shape = ConvSpec(config.vd_conv_channels, ch[-1], 1).output_shape(vd)
    shape = (shape[0], *(2 * n for n in shape[1:]))
    rows.append(("VU", shape))
    for l in reversed(range(config.levels - 1)):
        shape = ConvSpec(ch[l + 1], ch[l], 1).output_shape(shape)
        shape = (shape[0], *(2 * n for n in shape[1:]))
        rows.append((f"VUp{l}", shape))
        rows.append((f"VBlock{l}", shape))
    shape = ConvSpec(ch[0], config.input_channels, 1).output_shape(shape)
    rows.append(("Vend", shape))
    return rows


# ----------------------------------------------------------------------
# forward passes


class ForwardOutput(NamedTuple):
    seg_probs: Tensor
    recon: Tensor
    mu: Tensor
    logvar: Tensor


def _conv_layer(model: Model, name: str, x: Tensor, stride: int = 1) -> Tensor:
    return conv3d(x, model[f"{name}.weight"], model[f"{name}.bias"], stride)


def _gn_layer(model: Model, name: str, x: Tensor) -> Tensor:
    spec = model.config.gn_spec(x.shape[0])
    return group_norm(x, model[f"{name}.gamma"], model[f"{name}.beta"], spec.groups, spec.eps)


def _block(model: Model, name: str, x: Tensor) -> Tensor:
    y = _conv_layer(model, f"{name}.conv1", relu(_gn_layer(model, f"{name}.gn1", x)))
    y = _conv_layer(model, f"{name}.conv2", relu(_gn_layer(model, f"{name}.gn2", y)))
    return add(y, x)


def _check_input(model: Model, x: Tensor) -> None:
    cfg = model.config
    down = 2 ** (cfg.levels - 1)
    if x.data.ndim != 4 or x.shape[0] != cfg.input_channels or any(n % down for n in x.shape[1:]):
        raise ValueError(f"input shape {x.shape} incompatible with the model")


def encode(model: Model, x: Tensor, rng, training: bool) -> list[Tensor]:
    """Encoder outputs per level; the last entry is the endpoint."""
    cfg = model.config
    h = _conv_layer(model, "encoder.init.conv", x)
    h = spatial_dropout(h, cfg.dropout_rate, rng, training)
    skips = []
    for l in range(cfg.levels):
        if l:
            h = _conv_layer(model, f"encoder.L{l}.down.conv", h, stride=2)
        for b in range(cfg.blocks_per_level[l]):
            h = _block(model, f"encoder.L{l}.B{b}", h)
        skips.append(h)
    return skips


def decode_seg(model: Model, skips: list[Tensor]) -> Tensor:
    h = skips[-1]
    for l in reversed(range(model.config.levels - 1)):
        h = trilinear_upsample(_conv_layer(model, f"decoder.L{l}.up.conv", h))
        h = _block(model, f"decoder.L{l}.B0", add(h, skips[l]))
    return sigmoid(_conv_layer(model, "decoder.head.conv", h))


def vae_branch(model: Model, endpoint: Tensor, rng, training: bool):
    cfg = model.config
    if tuple(endpoint.shape[1:]) != tuple(cfg.endpoint_shape[1:]):
        raise ValueError(f"VAE branch is built for crop {cfg.crop_shape}; endpoint {endpoint.shape}")
    h = relu(_gn_layer(model, "vae.VD.gn", endpoint))
    h = _conv_layer(model, "vae.VD.conv", h, stride=2)
    vd_shape = h.shape
    h = dense(ad.reshape(h, (-1,)), model["vae.VD.dense.weight"], model["vae.VD.dense.bias"])
    mu = ad.slice_range(h, 0, cfg.latent_dims)
    logvar = ad.slice_range(h, cfg.latent_dims, cfg.latent_total)
    z = reparameterize(mu, logvar, rng) if training else mu

    h = relu(dense(z, model["vae.VU.dense.weight"], model["vae.VU.dense.bias"]))
    h = ad.reshape(h, vd_shape)
    h = trilinear_upsample(_conv_layer(model, "vae.VU.conv", h))
    for l in reversed(range(cfg.levels - 1)):
        h = trilinear_upsample(_conv_layer(model, f"vae.VUp{l}.conv", h))
        h = _block(model, f"vae.VBlock{l}", h)
    recon = _conv_layer(model, "vae.Vend.conv", h)
    return recon, mu, logvar


def forward(model: Model, x: Tensor, rng: np.random.Generator | None = None,
            training: bool = True) -> ForwardOutput:
    """Full pass: segmentation probabilities, reconstruction, and latent stats."""
    _check_input(model, x)
    if training and rng is None:
        raise ValueError("training forward needs an rng")
    skips = encode(model, x, rng, training)
    seg = decode_seg(model, skips)
    recon, mu, logvar = vae_branch(model, skips[-1], rng, training)
    return ForwardOutput(seg, recon, mu, logvar)


def forward_seg_only(model: Model, x: Tensor) -> Tensor:
    """Inference path: encoder and segmentation decoder, no dropout, no VAE."""
    _check_input(model, x)
    return decode_seg(model, encode(model, x, None, training=False))
