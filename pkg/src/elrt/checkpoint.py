"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"ELRT"  u32 version  u32 array_count
    per array: u32 name_len, name (UTF-8), u32 ndim, ndim x u64 dims, float32 payload
    u32 meta_len, meta (UTF-8 JSON)

Model arrays are stored under their parameter/buffer names, momentum buffers
under ``momentum.<param name>``. The JSON blob carries the model spec, the
rank configuration and free-form training metadata.
"""

from __future__ import annotations

import json
import os
import struct
from typing import Dict, Optional, Tuple

import numpy as np

from .models import ModelSpec, Network, apply_rank_config, build_model, parse_rank_config

MAGIC = b"ELRT"
VERSION = 1
MOMENTUM_PREFIX = "momentum."


class CheckpointError(ValueError):
    pass


def encode(arrays: Dict[str, np.ndarray], meta: dict) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name, arr in arrays.items():
        raw_name = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack(f"<I{arr.ndim}Q", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(blob)))
    parts.append(blob)
    return b"".join(parts)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"truncated checkpoint: need {n} bytes at offset {self.pos}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(raw: bytes) -> Tuple[Dict[str, np.ndarray], dict]:
    r = _Reader(raw)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, count = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    arrays = {}
    for _ in range(count):
        (name_len,) = r.unpack("<I")
        name = r.take(name_len).decode("utf-8")
        (ndim,) = r.unpack("<I")
        dims = r.unpack(f"<{ndim}Q")
        size = int(np.prod(dims, dtype=np.int64))
        payload = r.take(4 * size)
        arrays[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)
    (meta_len,) = r.unpack("<I")
    meta = json.loads(r.take(meta_len).decode("utf-8"))
    if r.pos != len(raw):
        raise CheckpointError(f"{len(raw) - r.pos} trailing bytes after metadata")
    return arrays, meta


def write_arrays(path, arrays: Dict[str, np.ndarray], meta: Optional[dict] = None) -> None:
    """Write atomically: a failed save never leaves a half-written file at ``path``."""
    data = encode(arrays, meta or {})
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def read_arrays(path) -> Tuple[Dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        return decode(f.read())


def save_checkpoint(path, model: Optional[Network], optimizer_state: Optional[dict] = None,
                    meta: Optional[dict] = None) -> None:
    arrays: Dict[str, np.ndarray] = {}
    info = {"meta": meta or {}}
    if model is not None:
        arrays.update(model.state_dict())
        info["model_spec"] = model.spec.to_dict()
        info["rank_config"] = model.rank_config.serialize()
    for name, value in (optimizer_state or {}).items():
        arrays[MOMENTUM_PREFIX + name] = value
    write_arrays(path, arrays, info)


def load_checkpoint(path) -> Tuple[Optional[Network], Dict[str, np.ndarray], dict]:
    """Returns ``(model, optimizer_state, meta)``; ``model`` is None for a model-less file."""
    arrays, info = read_arrays(path)
    state = {k[len(MOMENTUM_PREFIX):]: v for k, v in arrays.items() if k.startswith(MOMENTUM_PREFIX)}
    model = None
    if "model_spec" in info:
        model = build_model(ModelSpec(**info["model_spec"]))
        cfg = parse_rank_config(info.get("rank_config", ""))
        if len(cfg):
            model = apply_rank_config(model, cfg)
        model.load_state_dict({k: v for k, v in arrays.items() if not k.startswith(MOMENTUM_PREFIX)})
        model.optimizer_state = dict(state)
    return model, state, info.get("meta", {})
