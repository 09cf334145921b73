"""Single-file binary checkpoints.

Layout: magic ``HMOE`` | u32 format version | 32-byte sha256 of the config
text | u32 config length | config JSON (utf-8) | u64 tensor count | per
tensor: u32 name length, name, u32 rank, u64 dims, then little-endian
float64 values.  Reloading reproduces forward outputs bit-identically.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import CheckpointFormatError
from .model import Model, ModelConfig, build_model

MAGIC = b"HMOE"
VERSION = 1


def config_text(cfg: ModelConfig) -> str:
    return json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))


def config_hash(cfg: ModelConfig) -> bytes:
    return hashlib.sha256(config_text(cfg).encode()).digest()


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: dict[str, np.ndarray]  # parameters, optimizer moments, meta scalars
    step: int
    cum_flops: float

    def rebuild_model(self) -> Model:
        model = build_model(self.config)
        params = model.parameters()
        missing = set(params) - set(self.tensors)
        if missing:
            raise CheckpointFormatError(f"checkpoint lacks parameters: {sorted(missing)[:3]}...")
        for name, p in params.items():
            arr = self.tensors[name]
            if arr.shape != p.data.shape:
                raise CheckpointFormatError(
                    f"parameter {name!r} has shape {arr.shape}, model expects {p.data.shape}"
                )
            p.data = arr.copy()
        return model


def save_checkpoint(path: str, ckpt: Checkpoint) -> None:
    text = config_text(ckpt.config).encode()
    tensors = dict(ckpt.tensors)
    tensors["meta.step"] = np.asarray(float(ckpt.step))
    tensors["meta.cum_flops"] = np.asarray(float(ckpt.cum_flops))
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(hashlib.sha256(text).digest())
        f.write(struct.pack("<I", len(text)))
        f.write(text)
        f.write(struct.pack("<Q", len(tensors)))
        for name, arr in tensors.items():
            encoded = name.encode()
            arr = np.asarray(arr, dtype="<f8", order="C")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", arr.ndim))
            for dim in arr.shape:
                f.write(struct.pack("<Q", dim))
            f.write(arr.tobytes())


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as f:
        raw = f.read()
    view = memoryview(raw)
    if bytes(view[:4]) != MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint (bad magic {bytes(view[:4])!r})")
    (version,) = struct.unpack_from("<I", view, 4)
    if version != VERSION:
        raise CheckpointFormatError(f"{path}: format version {version} not supported (expected {VERSION})")
    digest = bytes(view[8:40])
    (text_len,) = struct.unpack_from("<I", view, 40)
    offset = 44
    text = bytes(view[offset : offset + text_len])
    offset += text_len
    if hashlib.sha256(text).digest() != digest:
        raise CheckpointFormatError(f"{path}: config hash mismatch")
    cfg = ModelConfig(**json.loads(text.decode()))

    (count,) = struct.unpack_from("<Q", view, offset)
    offset += 8
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", view, offset)
        offset += 4
        name = bytes(view[offset : offset + name_len]).decode()
        offset += name_len
        (rank,) = struct.unpack_from("<I", view, offset)
        offset += 4
        dims = struct.unpack_from(f"<{rank}Q", view, offset) if rank else ()
        offset += 8 * rank
        n_values = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(view, dtype="<f8", count=n_values, offset=offset).reshape(dims)
        offset += 8 * n_values
        tensors[name] = arr.astype(np.float64).copy()

    step = int(tensors.pop("meta.step").reshape(-1)[0]) if "meta.step" in tensors else 0
    cum_flops = (
        float(tensors.pop("meta.cum_flops").reshape(-1)[0]) if "meta.cum_flops" in tensors else 0.0
    )
    return Checkpoint(config=cfg, tensors=tensors, step=step, cum_flops=cum_flops)
