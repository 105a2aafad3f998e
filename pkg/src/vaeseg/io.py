"""On-disk formats: RVOL volumes, checkpoints, and flat dotted-key run configs.

RVOL::

    RVOL1\\n
    {"dims": [C, D, H, W] | [D, H, W], "dtype": "f32le" | "u8", "kind": "image" | "labels"}\\n
    <row-major payload, last axis fastest>

Checkpoint::

    VSEGCKPT1\\n
    <one-line JSON manifest: version, run config, epoch, tensor table, adam scalars>\\n
    <little-endian float32 blob; manifest offsets are relative to its start>
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import Model, ModelConfig, model_from_arrays
from .optim import AdamState

RVOL_MAGIC = b"RVOL1"
CKPT_MAGIC = b"VSEGCKPT1"
CKPT_VERSION = 1
_DTYPES = {"f32le": np.dtype("<f4"), "u8": np.dtype("u1")}


class FormatError(ValueError):
    pass


def _header(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode() + b"\n"


# ----------------------------------------------------------------------
# RVOL


def write_rvol(path, array: np.ndarray, kind: str | None = None) -> None:
    array = np.asarray(array)
    if kind is None:
        kind = "labels" if array.ndim == 3 else "image"
    if kind == "image":
        if array.ndim != 4:
            raise FormatError("image volumes are (C, D, H, W)")
        dtype, payload = "f32le", array.astype("<f4")
    elif kind == "labels":
        if array.ndim != 3:
            raise FormatError("label volumes are (D, H, W)")
        dtype, payload = "u8", array.astype("u1")
    else:
        raise FormatError(f"unknown kind {kind!r}")
    head = _header({"dims": list(array.shape), "dtype": dtype, "kind": kind})
    with open(path, "wb") as fh:
        fh.write(RVOL_MAGIC + b"\n" + head + np.ascontiguousarray(payload).tobytes())


def read_rvol(path) -> tuple[np.ndarray, dict]:
    raw = Path(path).read_bytes()
    magic, rest = raw.split(b"\n", 1)
    if magic != RVOL_MAGIC:
        raise FormatError(f"{path}: not an RVOL file")
    head_line, payload = rest.split(b"\n", 1)
    head = json.loads(head_line)
    dtype = _DTYPES.get(head.get("dtype"))
    if dtype is None:
        raise FormatError(f"{path}: unsupported dtype {head.get('dtype')!r}")
    dims = tuple(int(d) for d in head["dims"])
    if len(payload) != int(np.prod(dims)) * dtype.itemsize:
        raise FormatError(f"{path}: payload size does not match dims {dims}")
    arr = np.frombuffer(payload, dtype=dtype).reshape(dims)
    native = np.float32 if dtype.kind == "f" else np.uint8
    return arr.astype(native), head


# ----------------------------------------------------------------------
# run config

DEFAULTS: dict[str, object] = {
    "model.base_filters": 8,
    "model.levels": 4,
    "model.blocks_per_level": [1, 2, 2, 4],
    "model.dropout_rate": 0.2,
    "model.gn_groups": 8,
    "train.epochs": 300,
    "train.alpha0": 1e-4,
    "train.w_l2": 0.1,
    "train.w_kl": 0.1,
    "train.l2_reduction": "mean",
    "train.weight_decay": 1e-5,
    "train.crop_shape": [32, 32, 32],
    "train.seed": 0,
    "train.init_seed": 0,
    "train.checkpoint_every": 10,
    "train.augment": True,
    "data.train_dir": "",
    "data.val_dir": "",
    "inference.tta": True,
    "inference.checkpoints": [],
    "inference.threshold": 0.5,
}


def _coerce(key: str, value):
    default = DEFAULTS[key]
    if isinstance(default, bool):
        if isinstance(value, str):
            return value.lower() in ("1", "true", "yes")
        return bool(value)
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, list):
        if isinstance(value, str):
            value = json.loads(value)
        return list(value)
    return str(value)


def resolve_config(values: dict | None = None, overrides: dict | None = None) -> dict:
    """Defaults <- file values <- overrides, with unknown keys rejected."""
    cfg = dict(DEFAULTS)
    for src in (values or {}, overrides or {}):
        for key, val in src.items():
            if key not in DEFAULTS:
                raise FormatError(f"unknown config key {key!r}")
            cfg[key] = _coerce(key, val)
    return cfg


def load_config(path, overrides: dict | None = None) -> dict:
    values = json.loads(Path(path).read_text())
    if not isinstance(values, dict):
        raise FormatError("config must be a flat JSON object of dotted keys")
    return resolve_config(values, overrides)


def model_config(cfg: dict) -> ModelConfig:
    return ModelConfig(
        base_filters=cfg["model.base_filters"],
        levels=cfg["model.levels"],
        blocks_per_level=tuple(cfg["model.blocks_per_level"]),
        crop_shape=tuple(cfg["train.crop_shape"]),
        dropout_rate=cfg["model.dropout_rate"],
        gn_groups=cfg["model.gn_groups"],
    )


# ----------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    config: dict
    model: Model
    epoch: int = 0
    adam: AdamState | None = None


def save_checkpoint(path, run_config: dict, model: Model, epoch: int = 0,
                    adam: AdamState | None = None) -> None:
    tensors: list[tuple[str, np.ndarray]] = list(model.named_arrays().items())
    if adam is not None:
        tensors += [(f"adam.m.{k}", v) for k, v in adam.m.items()]
        tensors += [(f"adam.v.{k}", v) for k, v in adam.v.items()]
    table, chunks, offset = [], [], 0
    for name, arr in tensors:
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(blob)
        offset += len(blob)
    manifest = {
        "version": CKPT_VERSION,
        "config": run_config,
        "epoch": int(epoch),
        "tensors": table,
        "adam": None if adam is None else
        {"t": adam.t, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps},
    }
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + b"\n" + _header(manifest))
        for blob in chunks:
            fh.write(blob)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    magic, rest = raw.split(b"\n", 1)
    if magic != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint")
    head_line, blob = rest.split(b"\n", 1)
    manifest = json.loads(head_line)
    if manifest.get("version") != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {manifest.get('version')}")
    arrays = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape))
        start = entry["offset"]
        if start + 4 * n > len(blob):
            raise FormatError(f"{path}: truncated tensor {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(blob, "<f4", n, start).reshape(shape).astype(np.float32)
    run_config = resolve_config(manifest["config"])
    params = {k: v for k, v in arrays.items() if not k.startswith("adam.")}
    model = model_from_arrays(model_config(run_config), params)
    adam = None
    if manifest.get("adam") is not None:
        a = manifest["adam"]
        adam = AdamState(beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"], t=a["t"])
        for k, v in arrays.items():
            if k.startswith("adam.m."):
                adam.m[k[7:]] = v
            elif k.startswith("adam.v."):
                adam.v[k[7:]] = v
    return Checkpoint(run_config, model, manifest["epoch"], adam)
