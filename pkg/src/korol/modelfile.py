"""Model persistence: operator, extractor parameters, and config snapshot.

Layout of a .kmf file:

    magic "KMF1" | u32 version | u64 header length | header JSON (utf-8)
    | K matrix | extractor tensors in declaration order | sha256

All floats are 64-bit little-endian, matrices row-major.  The header
records the lift layout (with its basis-order tag), the architecture,
the training configuration, and the shape manifest of every tensor
blob; the trailing checksum covers every preceding byte, so corruption
and version drift are hard errors on load.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import lifting
from .featnet import FeatNetArch, FeatNetParams
from .koopman import FitStats, KoopmanModel
from .lifting import lift_dim
from .trainer import TrainConfig

MAGIC = b"KMF1"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


class ModelFormatError(ValueError):
    """Raised when a model file is malformed, corrupt, or wrong-version."""


@dataclass
class ModelFile:
    model: KoopmanModel
    params: FeatNetParams
    config: TrainConfig


def _config_dict(config: TrainConfig) -> dict:
    return {
        "horizon": config.horizon,
        "refresh_period": config.refresh_period,
        "max_epochs": config.max_epochs,
        "batch_size": config.batch_size,
        "learning_rate": config.learning_rate,
        "adam_betas": list(config.adam_betas),
        "ridge": config.ridge,
        "seed": config.seed,
        "use_frequency": config.use_frequency,
        "feature_dim": config.feature_dim,
        "val_fraction": config.val_fraction,
        "steps_per_epoch": config.steps_per_epoch,
    }


def _config_from(d: dict) -> TrainConfig:
    d = dict(d)
    d["adam_betas"] = tuple(d["adam_betas"])
    return TrainConfig(**d)


def save_model(path, bundle: ModelFile) -> None:
    spec = bundle.model.spec
    arch = bundle.params.arch
    header = {
        "lift": {"n": spec.n, "m": spec.m, "order_tag": lifting.ORDER_TAG},
        "ridge": bundle.model.ridge,
        "fit_stats": {
            "pairs": bundle.model.fit_stats.pairs,
            "residual": bundle.model.fit_stats.residual,
        },
        "arch": {
            "in_channels": arch.in_channels,
            "image_side": arch.image_side,
            "conv_channels": list(arch.conv_channels),
            "hidden": arch.hidden,
            "feature_dim": arch.feature_dim,
            "use_goal": arch.use_goal,
        },
        "config": _config_dict(bundle.config),
        "tensors": [
            {"name": k, "shape": list(v.shape)} for k, v in bundle.params.tensors.items()
        ],
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    blob = bytearray()
    blob += _PREFIX.pack(MAGIC, VERSION, len(head))
    blob += head
    blob += np.ascontiguousarray(bundle.model.K, dtype="<f8").tobytes()
    for tensor in bundle.params.tensors.values():
        blob += np.ascontiguousarray(tensor, dtype="<f8").tobytes()
    blob += hashlib.sha256(blob).digest()
    with open(path, "wb") as fh:
        fh.write(blob)


def checksum(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def load_model(path) -> ModelFile:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _PREFIX.size + 32 or raw[:4] != MAGIC:
        raise ModelFormatError(f"{path}: not a model file")
    _, version, head_len = _PREFIX.unpack_from(raw)
    if version != VERSION:
        raise ModelFormatError(f"{path}: unsupported format version {version}")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ModelFormatError(f"{path}: checksum mismatch, file is corrupt")

    try:
        header = json.loads(raw[_PREFIX.size : _PREFIX.size + head_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise ModelFormatError(f"{path}: unreadable header") from err
    if header["lift"]["order_tag"] != lifting.ORDER_TAG:
        raise ModelFormatError(
            f"{path}: basis order {header['lift']['order_tag']!r} does not match "
            f"this build ({lifting.ORDER_TAG!r})"
        )

    spec = lift_dim(header["lift"]["n"], header["lift"]["m"])
    offset = _PREFIX.size + head_len
    floats = np.frombuffer(body, dtype="<f8", offset=offset)

    want = spec.p * spec.p + sum(
        int(np.prod(t["shape"])) for t in header["tensors"]
    )
    if floats.size != want:
        raise ModelFormatError(f"{path}: expected {want} floats, found {floats.size}")

    K = floats[: spec.p * spec.p].reshape(spec.p, spec.p).copy()
    pos = spec.p * spec.p
    tensors = {}
    for entry in header["tensors"]:
        size = int(np.prod(entry["shape"]))
        tensors[entry["name"]] = floats[pos : pos + size].reshape(entry["shape"]).copy()
        pos += size

    arch_d = dict(header["arch"])
    arch_d["conv_channels"] = tuple(arch_d["conv_channels"])
    arch = FeatNetArch(**arch_d)
    model = KoopmanModel(
        K=K,
        spec=spec,
        ridge=header["ridge"],
        fit_stats=FitStats(
            pairs=header["fit_stats"]["pairs"],
            residual=header["fit_stats"]["residual"],
        ),
    )
    params = FeatNetParams(arch=arch, tensors=tensors, version=0)
    return ModelFile(model=model, params=params, config=_config_from(header["config"]))
