"""Single-file checkpoints.

Layout::

    b"TRACEHDv1"
    uint64 little-endian manifest length
    manifest: UTF-8 JSON (sorted keys) with configs, seed, trainable flags
              and a tensor directory of {name, shape, offset}
    float32 little-endian payloads, in directory order

Parameters are trained in float64 and stored in float32, so a reloaded
model matches the saved one to float32 round-off only.
"""
from __future__ import annotations

import json
import os
import struct

import numpy as np

from .model import ModelConfig, TraceModel

MAGIC = b"TRACEHDv1"
VERSION = 1
_LEN = struct.Struct("<Q")


class CheckpointError(ValueError):
    pass


class FormatError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class UnknownTensorError(CheckpointError):
    pass


def to_bytes(model: TraceModel, extra: dict | None = None) -> bytes:
    directory, chunks, offset = [], [], 0
    for name, t in model.store.items():
        raw = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        directory.append({"name": name, "shape": list(t.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "version": VERSION,
        "model_config": model.config.to_dict(),
        "seed": model.seed,
        "trainable": {n: bool(t.requires_grad) for n, t in model.store.items()},
        "tensors": directory,
        "payload_bytes": offset,
        "extra": extra or {},
    }
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + _LEN.pack(len(head)) + head + b"".join(chunks)


def from_bytes(blob: bytes) -> tuple[TraceModel, dict]:
    if blob[: len(MAGIC)] != MAGIC:
        raise FormatError("not a checkpoint: bad magic header")
    pos = len(MAGIC)
    if len(blob) < pos + _LEN.size:
        raise TruncatedError("file ends inside the manifest length")
    (n,) = _LEN.unpack_from(blob, pos)
    pos += _LEN.size
    if len(blob) < pos + n:
        raise TruncatedError(f"manifest needs {n} bytes, only {len(blob) - pos} present")
    try:
        manifest = json.loads(blob[pos: pos + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise FormatError(f"manifest is not valid JSON: {err}") from None
    pos += n
    if manifest.get("version") != VERSION:
        raise VersionError(f"checkpoint version {manifest.get('version')!r}, expected {VERSION}")
    payload = memoryview(blob)[pos:]
    if len(payload) < manifest["payload_bytes"]:
        raise TruncatedError(f"payload needs {manifest['payload_bytes']} bytes, only {len(payload)} present")

    config = ModelConfig.from_dict(manifest["model_config"])
    model = TraceModel.init(config, manifest["seed"])
    arrays = {}
    for entry in manifest["tensors"]:
        name = entry["name"]
        if name not in model.store:
            raise UnknownTensorError(f"unknown tensor {name!r}")
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        start = entry["offset"]
        if start + 4 * count > len(payload):
            raise TruncatedError(f"tensor {name!r} runs past the end of the file")
        arrays[name] = np.frombuffer(payload, dtype="<f4", count=count, offset=start).astype(np.float64).reshape(shape)
    missing = set(model.store.names()) - set(arrays)
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors {sorted(missing)[:5]}")
    model.store.load(arrays)
    model.store.set_trainable(manifest["trainable"])
    return model, manifest.get("extra", {})


def save_checkpoint(model: TraceModel, path: str | os.PathLike, extra: dict | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(model, extra))


def load_checkpoint(path: str | os.PathLike) -> TraceModel:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())[0]


def load_checkpoint_with_extra(path: str | os.PathLike) -> tuple[TraceModel, dict]:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
