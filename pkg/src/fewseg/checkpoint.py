"""Flat binary tensor archive.

A checkpoint is a single file: an 8-byte little-endian header length, a UTF-8
JSON header, then the raw tensor payload. The header carries free-form
metadata (config, step count) and a manifest listing each tensor's name,
dtype, shape, and byte offset. Tensors are stored little-endian, row-major,
so the file is portable and diffable with standard tools.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from .errors import ValidationError

_LEN_FMT = "<Q"
_SUPPORTED_DTYPES = {
    "float32": "<f4",
    "float64": "<f8",
    "int32": "<i4",
    "int64": "<i8",
    "uint8": "|u1",
}


def _to_archive_array(value) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        arr = value.detach().cpu().contiguous().numpy()
    else:
        arr = np.ascontiguousarray(value)
    name = arr.dtype.name
    if name not in _SUPPORTED_DTYPES:
        raise ValidationError(f"unsupported tensor dtype {name!r}")
    return arr.astype(_SUPPORTED_DTYPES[name], copy=False)


@dataclass
class Checkpoint:
    """Named tensors plus metadata; the unit of training persistence."""

    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def step(self) -> int:
        return int(self.meta.get("step", 0))

    def state_dict(self) -> dict[str, torch.Tensor]:
        return {name: torch.from_numpy(arr.copy()) for name, arr in self.tensors.items()}

    @classmethod
    def from_module(cls, module: torch.nn.Module, meta: dict | None = None) -> "Checkpoint":
        tensors = {name: _to_archive_array(t) for name, t in module.state_dict().items()}
        return cls(tensors=tensors, meta=dict(meta or {}))

    def save(self, path: str | Path) -> Path:
        return save_tensors(path, self.tensors, self.meta)

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        tensors, meta = load_tensors(path)
        return cls(tensors=tensors, meta=meta)


def save_tensors(path: str | Path, tensors: Mapping[str, np.ndarray | torch.Tensor], meta: dict | None = None) -> Path:
    path = Path(path)
    arrays = {name: _to_archive_array(value) for name, value in tensors.items()}
    manifest = []
    offset = 0
    for name, arr in arrays.items():
        manifest.append(
            {
                "name": name,
                "dtype": arr.dtype.name,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": arr.nbytes,
            }
        )
        offset += arr.nbytes
    header = json.dumps({"meta": _jsonable(meta or {}), "tensors": manifest}).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(struct.pack(_LEN_FMT, len(header)))
        fh.write(header)
        for arr in arrays.values():
            fh.write(arr.tobytes(order="C"))
    return path


def load_tensors(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise ValidationError(f"{path}: not a tensor archive")
    (header_len,) = struct.unpack(_LEN_FMT, raw[:8])
    try:
        header = json.loads(raw[8 : 8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValidationError(f"{path}: corrupt archive header") from exc
    payload = raw[8 + header_len :]
    tensors: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        dtype = np.dtype(_SUPPORTED_DTYPES[entry["dtype"]])
        start, nbytes = entry["offset"], entry["nbytes"]
        flat = np.frombuffer(payload[start : start + nbytes], dtype=dtype)
        tensors[entry["name"]] = flat.reshape(entry["shape"]).astype(entry["dtype"])
    return tensors, header.get("meta", {})


def _jsonable(value):
    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        return _jsonable(dataclasses.asdict(value))
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    return value
