"""Model checkpoint container.

Layout: magic ``b"DFCKPT01"``, u32 format version, u32 header length, a
canonical JSON header (config echo, seed, tensor names and shapes, optional
metadata), then every tensor as little-endian float64 in header order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .errors import FormatError
from .model import Model, build_model

MAGIC = b"DFCKPT01"
VERSION = 1
_PREFIX = struct.Struct("<II")


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def encode_checkpoint(model: Model, meta: dict | None = None) -> bytes:
    named = model.named_parameters()
    header = {
        "config": model.config.to_dict(),
        "seed": model.seed,
        "tensors": [{"name": n, "shape": list(t.shape)} for n, t in named],
        "meta": meta or {},
    }
    head = _canonical(header)
    body = b"".join(np.ascontiguousarray(t.data, dtype="<f8").tobytes() for _, t in named)
    return MAGIC + _PREFIX.pack(VERSION, len(head)) + head + body


def decode_checkpoint(buf: bytes) -> tuple[Model, dict]:
    if buf[:len(MAGIC)] != MAGIC:
        raise FormatError("bad magic, expected DFCKPT01", 0)
    off = len(MAGIC)
    if len(buf) < off + _PREFIX.size:
        raise FormatError("truncated checkpoint prefix", len(buf))
    version, hlen = _PREFIX.unpack_from(buf, off)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", off)
    off += _PREFIX.size
    if len(buf) < off + hlen:
        raise FormatError("truncated checkpoint header", len(buf))
    try:
        header = json.loads(buf[off:off + hlen])
    except ValueError as exc:
        raise FormatError(f"unreadable header: {exc}", off) from exc
    off += hlen
    model = build_model(ModelConfig.from_dict(header["config"]), header["seed"])
    state = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape))
        if len(buf) < off + 8 * n:
            raise FormatError(f"truncated tensor {entry['name']}", len(buf))
        state[entry["name"]] = np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(shape)
        off += 8 * n
    if off != len(buf):
        raise FormatError(f"{len(buf) - off} trailing bytes", off)
    model.load_state_dict(state)
    return model, header.get("meta", {})


def save_checkpoint(path: str | Path, model: Model, meta: dict | None = None) -> None:
    Path(path).write_bytes(encode_checkpoint(model, meta))


def load_checkpoint(path: str | Path) -> tuple[Model, dict]:
    return decode_checkpoint(Path(path).read_bytes())
