"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"DHC1"  u32 version=1
    u32 config length, UTF-8 JSON config block
    u32 tensor count
    per tensor: u16 name length, UTF-8 name, u8 rank, rank x u32 dims,
                row-major float32 values
    u32 CRC32 of every preceding byte
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import atomic_write_bytes
from .errors import BadMagicError, CheckpointError, CrcMismatchError, ShapeMismatchError, VersionMismatchError
from .models import HybridModel, ModelConfig, build_model
from .training import OptimizerState

MAGIC = b"DHC1"
VERSION = 1


@dataclass
class Checkpoint:
    config: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    version: int = VERSION

    @property
    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.config["model"])

    @property
    def epoch(self) -> int:
        return int(self.config.get("epoch", -1))

    @property
    def best_val_f1(self) -> float:
        return float(self.config.get("best_val_f1", 0.0))

    def model_tensors(self) -> dict[str, np.ndarray]:
        return {k[len("model.") :]: v for k, v in self.tensors.items() if k.startswith("model.")}


def encode(ckpt: Checkpoint) -> bytes:
    config = json.dumps(ckpt.config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", ckpt.version), struct.pack("<I", len(config)), config]
    parts.append(struct.pack("<I", len(ckpt.tensors)))
    for name, arr in ckpt.tensors.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:40]}...")
        arr = np.asarray(arr)
        if arr.ndim > 255:
            raise CheckpointError(f"tensor {name} has rank {arr.ndim} > 255")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode(payload: bytes) -> Checkpoint:
    if len(payload) < 8 or payload[:4] != MAGIC:
        raise BadMagicError(f"not a checkpoint (magic {payload[:4]!r}, expected {MAGIC!r})")
    if len(payload) < 12:
        raise CrcMismatchError("checkpoint truncated")
    body, (crc,) = payload[:-4], struct.unpack("<I", payload[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CrcMismatchError("checkpoint CRC32 mismatch; file is corrupted")
    (version,) = struct.unpack_from("<I", body, 4)
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version} is not supported (expected {VERSION})")
    pos = 8
    try:
        (clen,) = struct.unpack_from("<I", body, pos)
        pos += 4
        config = json.loads(body[pos : pos + clen].decode("utf-8"))
        pos += clen
        (count,) = struct.unpack_from("<I", body, pos)
        pos += 4
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", body, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            n = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * n > len(body):
                raise CheckpointError(f"tensor {name} runs past the end of the file")
            arr = np.frombuffer(body, dtype="<f4", count=n, offset=pos).reshape(dims).astype(np.float32)
            pos += 4 * n
            tensors[name] = arr
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc
    if pos != len(body):
        raise CheckpointError(f"{len(body) - pos} trailing bytes after tensor table")
    return Checkpoint(config=config, tensors=tensors, version=version)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    atomic_write_bytes(path, encode(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return decode(Path(path).read_bytes())


def make_checkpoint(
    model: HybridModel,
    optimizer: OptimizerState | None = None,
    epoch: int = -1,
    best_val_f1: float = 0.0,
    extra: dict | None = None,
) -> Checkpoint:
    named = list(model.named_parameters())
    config = {"model": model.config.to_dict(), "epoch": epoch, "best_val_f1": best_val_f1}
    tensors = {f"model.{n}": p.data for n, p in named}
    if optimizer is not None:
        config["optimizer"] = {
            "lr": optimizer.lr,
            "beta1": optimizer.beta1,
            "beta2": optimizer.beta2,
            "eps": optimizer.eps,
            "weight_decay": optimizer.weight_decay,
            "step": optimizer.step,
        }
        if optimizer.m:
            for (n, _), m, v in zip(named, optimizer.m, optimizer.v):
                tensors[f"adam.m.{n}"] = m
                tensors[f"adam.v.{n}"] = v
    if extra:
        config.update(extra)
    return Checkpoint(config=config, tensors=tensors)


def load_into(model: HybridModel, tensors: dict[str, np.ndarray]) -> HybridModel:
    """Copy named tensors into the model's parameters, checking names and shapes."""
    named = dict(model.named_parameters())
    missing = sorted(set(named) - set(tensors))
    unexpected = sorted(set(tensors) - set(named))
    if missing or unexpected:
        raise ShapeMismatchError(f"parameter names differ: missing {missing[:5]}, unexpected {unexpected[:5]}")
    for name, p in named.items():
        arr = tensors[name]
        if arr.shape != p.shape:
            raise ShapeMismatchError(f"tensor {name}: checkpoint shape {arr.shape} vs model shape {p.shape}")
        p.data[...] = arr
    return model


def restore_model(ckpt: Checkpoint, config: ModelConfig | None = None) -> HybridModel:
    """Rebuild the network from the embedded (or a given) architecture config."""
    model = build_model(config or ckpt.model_config)
    return load_into(model, ckpt.model_tensors())


def restore_optimizer(ckpt: Checkpoint, model: HybridModel) -> OptimizerState | None:
    meta = ckpt.config.get("optimizer")
    if meta is None:
        return None
    state = OptimizerState(**meta)
    names = [n for n, _ in model.named_parameters()]
    if f"adam.m.{names[0]}" in ckpt.tensors:
        state.m = [ckpt.tensors[f"adam.m.{n}"].copy() for n in names]
        state.v = [ckpt.tensors[f"adam.v.{n}"].copy() for n in names]
    return state
