"""Versioned binary checkpoints.

Layout (little-endian)::

    b"DIMNETCK"  u32 version
    u64 metadata length, metadata (UTF-8 ``key = value`` lines, sorted)
    u32 tensor count, then per tensor:
        u32 name length, name, u32 rank, u64 dims[rank], float64 data
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from .config import TrainConfig, config_from_items
from .params import ModelState, parameter_shapes
from .training import Adam, TrainState

MAGIC = b"DIMNETCK"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Unreadable or incompatible checkpoint."""


@dataclass
class Checkpoint:
    version: int
    metadata: dict[str, str]
    tensors: dict[str, np.ndarray]

    @property
    def config(self) -> TrainConfig:
        return config_from_items({k[len("config."):]: v for k, v in self.metadata.items() if k.startswith("config.")})

    @property
    def epoch(self) -> int:
        return int(self.metadata["epoch"])


def _meta_text(meta: dict[str, str]) -> bytes:
    lines = []
    for key in sorted(meta):
        value = meta[key]
        if "\n" in key or "\n" in value or "=" in key:
            raise CheckpointError(f"metadata entry {key!r} is not single-line key = value")
        lines.append(f"{key} = {value}\n")
    return "".join(lines).encode("utf-8")


def save_checkpoint(path: str | os.PathLike, state: TrainState, config: TrainConfig) -> None:
    model, opt = state.model, state.optimizer
    meta = {f"config.{k}": v for k, v in config.to_items().items()}
    meta.update({
        "epoch": str(state.epoch),
        "num_entities": str(model.dims.num_entities),
        "num_raw_relations": str(model.dims.num_raw_relations),
        "adam.step": str(opt.step_count),
        "adam.lr": repr(opt.lr),
        "adam.beta1": repr(opt.beta1),
        "adam.beta2": repr(opt.beta2),
        "adam.eps": repr(opt.eps),
        "best_valid": repr(state.best_valid),
        "bad_epochs": str(state.bad_epochs),
        "rng": json.dumps(state.rng.bit_generator.state, sort_keys=True),
    })
    tensors = {f"param.{k}": t.data for k, t in model.params.items()}
    tensors.update({f"adam.m.{k}": v for k, v in opt.m.items()})
    tensors.update({f"adam.v.{k}": v for k, v in opt.v.items()})

    chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    text = _meta_text(meta)
    chunks += [struct.pack("<Q", len(text)), text, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f8")
        chunks += [struct.pack("<I", len(raw)), raw, struct.pack("<I", arr.ndim)]
        chunks += [struct.pack("<Q", n) for n in arr.shape]
        chunks.append(arr.tobytes())
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(chunks))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))[0]


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointError("bad header: not a checkpoint file")
    version = r.unpack("<I", "version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"version: file has {version}, reader supports {FORMAT_VERSION}")
    text = r.take(r.unpack("<Q", "metadata length"), "metadata")
    try:
        lines = text.decode("utf-8").splitlines()
    except UnicodeDecodeError:
        raise CheckpointError("metadata: not UTF-8") from None
    meta = {}
    for line in lines:
        key, sep, value = line.partition(" = ")
        if not sep:
            raise CheckpointError(f"metadata: malformed line {line!r}")
        meta[key] = value
    tensors = {}
    for _ in range(r.unpack("<I", "tensor count")):
        name = r.take(r.unpack("<I", "name length"), "tensor name").decode("utf-8")
        rank = r.unpack("<I", f"{name} rank")
        shape = tuple(r.unpack("<Q", f"{name} dims") for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        tensors[name] = np.frombuffer(r.take(8 * count, name), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(r.buf):
        raise CheckpointError("trailing bytes after last tensor")
    return Checkpoint(version, meta, tensors)


def restore_train_state(ckpt: Checkpoint, config: TrainConfig | None = None) -> TrainState:
    """Rebuild model, optimizer and rng; ``config`` (default: the saved one) fixes expected shapes."""
    config = config or ckpt.config
    saved = ckpt.config
    for key, value in config.model_items().items():
        if saved.model_items()[key] != value:
            raise CheckpointError(f"config.{key}: checkpoint has {saved.model_items()[key]}, config has {value}")
    dims = config.dims(int(ckpt.metadata["num_entities"]), int(ckpt.metadata["num_raw_relations"]))
    arrays = {}
    for name, shape in parameter_shapes(dims).items():
        key = f"param.{name}"
        if key not in ckpt.tensors:
            raise CheckpointError(f"{key}: missing from checkpoint")
        if ckpt.tensors[key].shape != shape:
            raise CheckpointError(f"{key}: shape {ckpt.tensors[key].shape} != expected {shape}")
        arrays[name] = ckpt.tensors[key]
    model = ModelState.initialize(dims, scheme="zeros")
    model.load_arrays(arrays)
    meta = ckpt.metadata
    opt = Adam(float(meta["adam.lr"]), float(meta["adam.beta1"]), float(meta["adam.beta2"]), float(meta["adam.eps"]))
    opt.step_count = int(meta["adam.step"])
    for name in arrays:
        if f"adam.m.{name}" in ckpt.tensors:
            opt.m[name] = ckpt.tensors[f"adam.m.{name}"].copy()
            opt.v[name] = ckpt.tensors[f"adam.v.{name}"].copy()
    rng = np.random.default_rng()
    rng.bit_generator.state = json.loads(meta["rng"])
    return TrainState(model, opt, rng, int(meta["epoch"]), float(meta["best_valid"]), int(meta["bad_epochs"]))


def load_model(path: str | os.PathLike, config: TrainConfig | None = None) -> tuple[ModelState, TrainConfig]:
    ckpt = load_checkpoint(path)
    return restore_train_state(ckpt, config).model, config or ckpt.config
