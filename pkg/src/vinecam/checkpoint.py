"""Versioned binary checkpoints.

Layout::

    b"VNCAM1" | uint64 LE header length | UTF-8 JSON header | raw payload

The header lists every stored array as ``{name, kind, dtype, shape, offset,
nbytes}``; ``offset`` is relative to the start of the payload and arrays are
stored little-endian, C order. ``kind`` is ``param``, ``buffer`` or ``state``
(optimizer moments, only present in resumable checkpoints).
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .densenet import Model, ModelConfig, param_shapes
from .errors import CheckpointError

MAGIC = b"VNCAM1"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    model: Model
    classes: list[str] = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    prep: dict | None = None
    extra: dict = field(default_factory=dict)
    state: dict[str, np.ndarray] = field(default_factory=dict)


def _le(arr: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))


def save_checkpoint(model: Model, path, classes=None, metrics=None, prep=None, extra=None,
                    state: dict[str, np.ndarray] | None = None) -> None:
    records, chunks, offset = [], [], 0
    arrays = [(n, "param", t.data) for n, t in model.params.items()]
    arrays += [(n, "buffer", b) for n, b in model.buffers.items()]
    arrays += [(n, "state", a) for n, a in (state or {}).items()]
    for name, kind, arr in arrays:
        raw = _le(np.asarray(arr)).tobytes()
        records.append({"name": name, "kind": kind, "dtype": np.dtype(arr.dtype).newbyteorder("<").str,
                        "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "config": model.cfg.to_dict(),
        "seed": model.seed,
        "classes": list(classes or []),
        "metrics": metrics or {},
        "prep": prep,
        "extra": extra or {},
        "tensors": records,
        "payload_bytes": offset,
    }
    blob = json.dumps(header, sort_keys=True, indent=1).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for c in chunks:
            fh.write(c)
    os.replace(tmp, path)


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        return _read_header(fh, path)


def _read_header(fh, path) -> dict:
    magic = fh.read(len(MAGIC))
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic bytes)")
    raw_len = fh.read(8)
    if len(raw_len) != 8:
        raise CheckpointError(f"{path}: truncated header")
    (n,) = struct.unpack("<Q", raw_len)
    blob = fh.read(n)
    if len(blob) != n:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, this build reads {FORMAT_VERSION}")
    return header


def load_checkpoint(path, num_classes: int | None = None) -> Checkpoint:
    """Load a checkpoint, validating every array against the stored config.

    ``num_classes``, when given, must agree with the file.
    """
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint {path} not found")
    with open(path, "rb") as fh:
        header = _read_header(fh, path)
        payload = fh.read()
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(f"{path}: payload is {len(payload)} bytes, header promises {header['payload_bytes']}"
                              " (truncated or corrupt file)")
    try:
        cfg = ModelConfig.from_dict(header["config"])
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: invalid model config: {exc}") from exc
    if num_classes is not None and cfg.num_classes != num_classes:
        raise CheckpointError(f"{path}: checkpoint has {cfg.num_classes} classes, {num_classes} requested")

    arrays: dict[str, tuple[str, np.ndarray]] = {}
    for rec in header["tensors"]:
        dt = np.dtype(rec["dtype"])
        end = rec["offset"] + rec["nbytes"]
        if end > len(payload) or rec["nbytes"] != dt.itemsize * int(np.prod(rec["shape"], dtype=np.int64)):
            raise CheckpointError(f"{path}: record {rec['name']} does not fit the payload")
        arr = np.frombuffer(payload, dtype=dt, count=rec["nbytes"] // dt.itemsize, offset=rec["offset"])
        arrays[rec["name"]] = (rec["kind"], arr.reshape(rec["shape"]).astype(dt.newbyteorder("=")))

    expected = param_shapes(cfg)
    params, buffers, state = {}, {}, {}
    for name, shape in expected.items():
        if name not in arrays or arrays[name][0] != "param":
            raise CheckpointError(f"{path}: missing parameter {name}")
        arr = arrays[name][1]
        if arr.shape != shape:
            raise CheckpointError(f"{path}: parameter {name} has shape {arr.shape}, config implies {shape}")
        params[name] = Tensor(arr, requires_grad=True, name=name)
    for name, (kind, arr) in arrays.items():
        if kind == "buffer":
            buffers[name] = arr
        elif kind == "state":
            state[name] = arr
        elif name not in expected:
            raise CheckpointError(f"{path}: unexpected parameter {name}")
    for name, shape in expected.items():
        if name.endswith(".gamma"):
            prefix = name[: -len(".gamma")]
            for buf in (f"{prefix}.running_mean", f"{prefix}.running_var"):
                if buf not in buffers or buffers[buf].shape != shape:
                    raise CheckpointError(f"{path}: missing or malformed buffer {buf}")
    model = Model(cfg, params, buffers, header.get("seed", 0))
    return Checkpoint(model, header.get("classes", []), header.get("metrics", {}), header.get("prep"),
                      header.get("extra", {}), state)
