"""Checkpoint file format: one JSON manifest line, then raw float64 blobs.

The manifest records config, mode, parameter names/shapes, optimizer-state
presence, and the training RNG position; blobs follow in manifest order as
little-endian 64-bit floats. Round trips are exact, so training can resume
bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .autodiff import AdamState, Parameter
from .model import ModelConfig, ModelParams

CHECKPOINT_FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


@dataclass
class ModelCheckpoint:
    """Everything needed to evaluate or resume: params, config, optimizer, rng position."""

    config: ModelConfig
    params: ModelParams
    adam: AdamState | None = None
    rng_info: dict = field(default_factory=dict)  # {"seed": int, "next_epoch": int, "next_update": int}
    version: str = ""
    extra: dict = field(default_factory=dict)


def _blob(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def save_checkpoint(ckpt: ModelCheckpoint, path) -> None:
    names = ckpt.params.names()
    manifest = {
        "kind": "hpdt-checkpoint",
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "version": ckpt.version,
        "config": ckpt.config.to_dict(),
        "mode": ckpt.config.mode,
        "params": [{"name": n, "shape": list(ckpt.params[n].data.shape)} for n in names],
        "adam": None if ckpt.adam is None else {
            "beta1": ckpt.adam.beta1,
            "beta2": ckpt.adam.beta2,
            "eps": ckpt.adam.eps,
            "step": ckpt.adam.step,
        },
        "rng": ckpt.rng_info,
        "extra": ckpt.extra,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(manifest).encode("utf-8") + b"\n")
        for n in names:
            fh.write(_blob(ckpt.params[n].data))
        if ckpt.adam is not None:
            for n in names:
                fh.write(_blob(ckpt.adam.m[n]))
            for n in names:
                fh.write(_blob(ckpt.adam.v[n]))


def load_checkpoint(path) -> ModelCheckpoint:
    with open(path, "rb") as fh:
        header = fh.readline()
        try:
            manifest = json.loads(header.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: bad checkpoint manifest: {exc}") from None
        if manifest.get("kind") != "hpdt-checkpoint":
            raise CheckpointError(f"{path}: not a checkpoint file")
        if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise CheckpointError(
                f"{path}: unsupported checkpoint format version {manifest.get('format_version')!r}"
            )
        config = ModelConfig.from_dict(manifest["config"])
        blob = fh.read()

    entries = manifest["params"]
    offset = 0

    def take(name: str, shape: tuple[int, ...]) -> np.ndarray:
        nonlocal offset
        size = int(np.prod(shape)) if shape else 1
        nbytes = size * 8
        if offset + nbytes > len(blob):
            raise CheckpointError(f"{path}: blob truncated while reading parameter {name!r}")
        arr = np.frombuffer(blob[offset:offset + nbytes], dtype="<f8").reshape(shape).copy()
        offset += nbytes
        return arr

    params_dict: dict[str, Parameter] = {}
    for entry in entries:
        shape = tuple(entry["shape"])
        params_dict[entry["name"]] = Parameter(entry["name"], take(entry["name"], shape))
    params = ModelParams(config, params_dict)

    adam = None
    if manifest["adam"] is not None:
        meta = manifest["adam"]
        adam = AdamState(beta1=meta["beta1"], beta2=meta["beta2"], eps=meta["eps"], step=meta["step"])
        for entry in entries:
            adam.m[entry["name"]] = take(f"adam.m[{entry['name']}]", tuple(entry["shape"]))
        for entry in entries:
            adam.v[entry["name"]] = take(f"adam.v[{entry['name']}]", tuple(entry["shape"]))

    if offset != len(blob):
        raise CheckpointError(
            f"{path}: {len(blob) - offset} trailing bytes after the last manifest parameter"
        )
    return ModelCheckpoint(
        config=config,
        params=params,
        adam=adam,
        rng_info=manifest.get("rng", {}),
        version=manifest.get("version", ""),
        extra=manifest.get("extra", {}),
    )
