"""Binary checkpoint files.

Layout (all integers little-endian)::

    b"HPCK"                      magic
    u32 version                  currently 1
    u16 n, n bytes               config hash (ASCII)
    u32 n, n bytes               JSON metadata (model config, grid, seed, ...)
    u32 tensor count
    per tensor:
        u16 n, n bytes           name (UTF-8)
        u8 dtype                 0 = float32, 1 = int32
        u8 ndim, ndim * u32      shape
        values                   4-byte little-endian each

The vocabulary travels as the ``vocab.coords`` int32 tensor of finest-cell
``(col, row)`` pairs in token order.
"""
from __future__ import annotations

import io
import json
import os
import struct
import tempfile
from dataclasses import asdict

import numpy as np

from .errors import DataError
from .grid import GridSpec, HierarchicalVocabulary, Level

MAGIC = b"HPCK"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<i4")}


def atomic_write(path, data: bytes | str):
    """Write a whole file via a temp file in the same directory and rename."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data.encode("utf-8") if isinstance(data, str) else data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def grid_to_dict(spec: GridSpec) -> dict:
    return {"origin_x": spec.origin_x, "origin_y": spec.origin_y,
            "levels": [[lv.name, lv.cell_size] for lv in spec.levels]}


def grid_from_dict(d: dict) -> GridSpec:
    return GridSpec(d["origin_x"], d["origin_y"], tuple(Level(n, s) for n, s in d["levels"]))


def encode(tensors: dict, meta: dict, config_hash: str = "") -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    h = config_hash.encode("ascii")
    buf.write(struct.pack("<H", len(h)) + h)
    m = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(m)) + m)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = 1 if np.issubdtype(arr.dtype, np.integer) else 0
        data = np.ascontiguousarray(arr, dtype=_DTYPES[code])
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)) + nb)
        buf.write(struct.pack("<BB", code, data.ndim))
        buf.write(struct.pack(f"<{data.ndim}I", *data.shape))
        buf.write(data.tobytes())
    return buf.getvalue()


def decode(raw: bytes):
    """Returns ``(tensors, meta, config_hash)``."""
    mv = memoryview(raw)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(mv):
            raise DataError("corrupt checkpoint: truncated")
        out = mv[pos:pos + n]
        pos += n
        return out

    if bytes(take(4)) != MAGIC:
        raise DataError("corrupt checkpoint: bad magic bytes")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    (n,) = struct.unpack("<H", take(2))
    config_hash = bytes(take(n)).decode("ascii")
    (n,) = struct.unpack("<I", take(4))
    try:
        meta = json.loads(bytes(take(n)).decode("utf-8"))
    except ValueError as exc:
        raise DataError(f"corrupt checkpoint metadata: {exc}") from None
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2))
        name = bytes(take(n)).decode("utf-8")
        code, ndim = struct.unpack("<BB", take(2))
        if code not in _DTYPES:
            raise DataError(f"corrupt checkpoint: dtype code {code}")
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(take(4 * size), dtype=_DTYPES[code]).reshape(shape)
        tensors[name] = arr.astype(arr.dtype.newbyteorder("="))
    if pos != len(mv):
        raise DataError("corrupt checkpoint: trailing bytes")
    return tensors, meta, config_hash


def save_model(path, model, config_hash: str = "", extra: dict | None = None):
    meta = {
        "model": asdict(model.cfg),
        "grid": grid_to_dict(model.vocab.spec),
        "seed": model.seed,
        "partition": model.partition.describe(),
    }
    if extra:
        meta.update(extra)
    tensors = {"vocab.coords": model.vocab.coords().astype(np.int32)}
    tensors.update(model.state_dict())
    atomic_write(path, encode(tensors, meta, config_hash))


def load_model(path):
    """Rebuild a :class:`~hierplace.model.NextPlaceModel` from a checkpoint.

    Returns ``(model, meta, config_hash)``.
    """
    from .model import ModelConfig, NextPlaceModel

    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {path}") from None
    tensors, meta, config_hash = decode(raw)
    try:
        coords = tensors["vocab.coords"]
        cfg = ModelConfig(**meta["model"])
        spec = grid_from_dict(meta["grid"])
    except KeyError as exc:
        raise DataError(f"corrupt checkpoint: missing {exc}") from None
    if coords.shape[0] == 0:
        raise DataError("checkpoint has an empty vocabulary")
    vocab = HierarchicalVocabulary.from_coords(coords, spec)
    model = NextPlaceModel(cfg, vocab, seed=int(meta.get("seed", 0)))
    model.load_state_dict({k: v.astype(cfg.np_dtype) for k, v in tensors.items() if k != "vocab.coords"})
    return model, meta, config_hash
