"""Self-describing checkpoint files.

Layout::

    b"LEAPCKPT"  | u32 format version | u64 header length | JSON header | raw tensors

The JSON header holds the model config, an optional vocabulary, free-form
metadata and, for every tensor, its name, shape, dtype and byte offset into
the payload.  Tensors are stored little-endian in header order.  Nothing
time-dependent is written, so equal models give byte-identical files.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import LeapConfig, LeapLSTM

MAGIC = b"LEAPCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, model: LeapLSTM, vocab: list[str] | None = None,
                    meta: dict | None = None) -> None:
    tensors = []
    blobs = []
    offset = 0
    for name in sorted(model.params):
        arr = np.ascontiguousarray(model.params[name], dtype="<f8")
        raw = arr.tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "dtype": "<f8",
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "config": model.cfg.to_dict(),
        "tensors": tensors,
        "vocab": vocab,
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(hbytes)))
        fh.write(hbytes)
        for raw in blobs:
            fh.write(raw)


def read_header(path: str | Path) -> tuple[dict, int]:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        version, hlen = struct.unpack("<IQ", fh.read(12))
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
        header = json.loads(fh.read(hlen).decode("utf-8"))
    return header, len(MAGIC) + 12 + hlen


def load_checkpoint(path: str | Path, expect: LeapConfig | None = None) -> tuple[LeapLSTM, dict]:
    """Load a model; every tensor is checked against the config's shapes.

    If ``expect`` is given, the stored config must match it exactly.
    """
    header, start = read_header(path)
    cfg = LeapConfig.from_dict(header["config"])
    if expect is not None and cfg != expect:
        raise CheckpointError(f"{path}: stored config {cfg} does not match expected {expect}")
    shapes = cfg.param_shapes()
    data = Path(path).read_bytes()[start:]
    params = {}
    for entry in header["tensors"]:
        name = entry["name"]
        shape = tuple(entry["shape"])
        if name not in shapes:
            raise CheckpointError(f"{path}: unexpected tensor {name!r}")
        if shape != shapes[name]:
            raise CheckpointError(f"{path}: tensor {name!r} has shape {shape}, config needs {shapes[name]}")
        end = entry["offset"] + entry["nbytes"]
        if end > len(data):
            raise CheckpointError(f"{path}: truncated payload for {name!r}")
        arr = np.frombuffer(data[entry["offset"]:end], dtype=entry["dtype"]).reshape(shape)
        params[name] = arr.astype(np.float64)
    missing = set(shapes) - set(params)
    if missing:
        raise CheckpointError(f"{path}: missing tensors {sorted(missing)}")
    return LeapLSTM(cfg, params), header
