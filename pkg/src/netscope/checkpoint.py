"""Binary checkpoint format.

Layout (little-endian)::

    b"NSCK"  u32 version  u32 tensor_count
    per tensor: u16 name_len, utf-8 name, u8 ndim, u32 dims[ndim], f32 payload
    u32 meta_len, utf-8 JSON metadata

Model parameters are stored under their own names; auxiliary tensors (e.g.
optimizer velocity) carry an ``extra/`` prefix.  The metadata holds the
graph structure so :func:`load_checkpoint` can rebuild the model.
"""
from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graph import ModelGraph, from_structure

MAGIC = b"NSCK"
VERSION = 1
EXTRA = "extra/"


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)

    def model(self) -> ModelGraph:
        params = {k: v for k, v in self.tensors.items() if not k.startswith(EXTRA)}
        return from_structure(self.metadata["structure"], params)

    def extras(self) -> dict[str, np.ndarray]:
        return {k[len(EXTRA):]: v for k, v in self.tensors.items() if k.startswith(EXTRA)}


def encode(tensors: dict[str, np.ndarray], metadata: dict) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    meta = json.dumps(metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    return buf.getvalue()


def decode(data: bytes) -> Checkpoint:
    view = memoryview(data)
    pos = 0

    def take(n: int, what: str):
        nonlocal pos
        if pos + n > len(view):
            raise TruncatedError(f"checkpoint truncated while reading {what} "
                                 f"(need {n} bytes at offset {pos}, file has {len(view)})")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if len(data) < 4 or bytes(view[:4]) != MAGIC:
        raise BadMagicError(f"bad magic {bytes(view[:4])!r}, expected {MAGIC!r}")
    pos = 4
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise VersionError(f"checkpoint version {version} unsupported (expected {VERSION})")
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = bytes(take(nlen, "name")).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1, f"{name} ndim"))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, f"{name} dims"))
        n = int(np.prod(dims, dtype=np.int64))
        payload = take(4 * n, f"{name} payload of {n} floats")
        tensors[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)
    (mlen,) = struct.unpack("<I", take(4, "metadata length"))
    metadata = json.loads(bytes(take(mlen, "metadata")).decode("utf-8"))
    return Checkpoint(tensors, metadata)


def write_checkpoint(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(ckpt.tensors, ckpt.metadata))
    os.replace(tmp, path)


def read_checkpoint(path) -> Checkpoint:
    return decode(Path(path).read_bytes())


def save_checkpoint(model: ModelGraph, path, metadata: dict | None = None,
                    extras: dict[str, np.ndarray] | None = None) -> None:
    meta = {"epoch": None, "seed": model.config.get("seed"), "config_hash": model.structure_hash()}
    meta.update(metadata or {})
    meta["structure"] = model.structure()
    tensors = dict(model.params)
    for k, v in (extras or {}).items():
        tensors[EXTRA + k] = v
    write_checkpoint(path, Checkpoint(tensors, meta))


def load_checkpoint(path) -> ModelGraph:
    return read_checkpoint(path).model()


def export_weights(tensors: dict[str, np.ndarray], manifest_path, blob_path) -> list[dict]:
    """Write tensors as a raw little-endian f32 blob plus a JSON manifest readable by :func:`import_weights`."""
    entries, blob, offset = [], bytearray(), 0
    for name, arr in tensors.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "dims": list(arr.shape), "offset": offset})
        blob += raw
        offset += len(raw)
    Path(manifest_path).write_text(json.dumps(entries, indent=1) + "\n")
    Path(blob_path).write_bytes(bytes(blob))
    return entries


def import_weights(manifest_path, blob_path) -> dict[str, np.ndarray]:
    """Read tensors described by a JSON manifest ``[{name, dims, offset}, ...]`` from a raw f32 blob."""
    entries = json.loads(Path(manifest_path).read_text())
    blob = Path(blob_path).read_bytes()
    out = {}
    for e in entries:
        dims = tuple(int(d) for d in e["dims"])
        n = int(np.prod(dims, dtype=np.int64))
        off = int(e["offset"])
        if off < 0 or off + 4 * n > len(blob):
            raise TruncatedError(f"{e['name']}: blob too short for {dims} at offset {off}")
        out[e["name"]] = np.frombuffer(blob, dtype="<f4", count=n, offset=off).astype(np.float32).reshape(dims)
    return out


def assign_weights(model: ModelGraph, tensors: dict[str, np.ndarray], strict: bool = True) -> ModelGraph:
    """Copy imported tensors into a model's parameters, checking names and shapes."""
    unknown = sorted(set(tensors) - set(model.params))
    missing = sorted(set(model.params) - set(tensors))
    if unknown:
        raise KeyError(f"imported tensors not in model: {unknown[:5]}")
    if strict and missing:
        raise KeyError(f"model parameters missing from import: {missing[:5]}")
    for k, v in tensors.items():
        if model.params[k].shape != v.shape:
            raise ValueError(f"{k}: shape {v.shape} does not match model {model.params[k].shape}")
        model.params[k][...] = v
    return model
