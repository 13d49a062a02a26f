"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    offset 0   8 bytes   magic  b"EDLCKPT\\0"
    offset 8   uint32    format version (currently 1)
    offset 12  uint64    header length H in bytes
    offset 20  H bytes   UTF-8 JSON header
    offset 20+H          tensor payload

The header holds ``encoder_config``, ``step``, ``epoch``, free-form ``extra``
and a ``tensors`` list of ``{name, dtype, shape, offset, nbytes}`` where
``dtype`` is a little-endian numpy code (``<f4``, ``<f8``, ``<i8``) and
``offset`` counts from the start of the payload.  Arrays are C-ordered.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MAGIC = b"EDLCKPT\x00"
VERSION = 1
_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8", "int32": "<i4"}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    arrays: dict
    encoder_config: dict
    step: int = 0
    epoch: int = 0
    extra: dict = field(default_factory=dict)


def _to_numpy(x) -> np.ndarray:
    if torch.is_tensor(x):
        x = x.detach().cpu().numpy()
    x = np.asarray(x)
    if x.dtype.name not in _DTYPES:
        raise CheckpointError(f"unsupported dtype {x.dtype}")
    return np.ascontiguousarray(x.astype(_DTYPES[x.dtype.name], copy=False))


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    entries, blobs, offset = [], [], 0
    for name, value in ckpt.arrays.items():
        arr = _to_numpy(value)
        raw = arr.tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({
        "encoder_config": ckpt.encoder_config, "step": int(ckpt.step), "epoch": int(ckpt.epoch),
        "extra": ckpt.extra, "tensors": entries,
    }, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", VERSION, len(header)))
        f.write(header)
        for raw in blobs:
            f.write(raw)
    tmp.replace(path)
    return path


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if len(data) < 20:
        raise CheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack_from("<IQ", data, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(data[20:20 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header ({e})") from None
    payload = memoryview(data)[20 + hlen:]
    arrays = {}
    for e in header["tensors"]:
        end = e["offset"] + e["nbytes"]
        if end > len(payload):
            raise CheckpointError(f"{path}: truncated payload for {e['name']}")
        arr = np.frombuffer(payload[e["offset"]:end], dtype=np.dtype(e["dtype"]))
        arrays[e["name"]] = arr.reshape(e["shape"]).astype(arr.dtype.newbyteorder("="))
    return Checkpoint(arrays, header["encoder_config"], header["step"], header["epoch"], header.get("extra", {}))
