"""Checkpoint container shared by every trainable component.

Layout (little-endian)::

    b"VCKP" | u32 format version | u32 header length | header (UTF-8 JSON) | tensor data

The header echoes the config, parameter count, loss record and a sha256
content checksum over the named float32 tensors. The checksum is what
downstream stages record to prove they ran against an unchanged upstream.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import IntegrityError

MAGIC = b"VCKP"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sII")


def tensor_checksum(tensors: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors):
        arr = np.ascontiguousarray(_as_f32(tensors[name]))
        h.update(name.encode("utf-8"))
        h.update(np.asarray(arr.shape, dtype="<i8").tobytes())
        h.update(arr.tobytes())
    return h.hexdigest()


def module_checksum(module: torch.nn.Module) -> str:
    return tensor_checksum(module.state_dict())


def _as_f32(t) -> np.ndarray:
    if isinstance(t, torch.Tensor):
        t = t.detach().cpu().numpy()
    return np.asarray(t, dtype="<f4")


@dataclass
class Checkpoint:
    kind: str
    tensors: dict
    meta: dict = field(default_factory=dict)

    @property
    def checksum(self) -> str:
        return tensor_checksum(self.tensors)

    @property
    def param_count(self) -> int:
        return int(sum(np.asarray(t).size for t in self.tensors.values()))

    def state_dict(self) -> dict:
        return {k: torch.from_numpy(np.array(v, dtype=np.float32)) for k, v in self.tensors.items()}

    def save(self, path) -> str:
        path = Path(path)
        names = sorted(self.tensors)
        arrays = {n: np.ascontiguousarray(_as_f32(self.tensors[n])) for n in names}
        index, offset = [], 0
        for n in names:
            index.append({"name": n, "shape": list(arrays[n].shape), "offset": offset})
            offset += arrays[n].nbytes
        header = {
            "format_version": FORMAT_VERSION,
            "kind": self.kind,
            "param_count": self.param_count,
            "checksum": tensor_checksum(arrays),
            "tensors": index,
            "meta": self.meta,
        }
        blob = json.dumps(header, sort_keys=True).encode("utf-8")
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(blob)))
            fh.write(blob)
            for n in names:
                fh.write(arrays[n].tobytes())
        return header["checksum"]


def save_checkpoint(path, kind: str, tensors: dict, meta: dict | None = None) -> str:
    return Checkpoint(kind, {k: _as_f32(v) for k, v in tensors.items()}, dict(meta or {})).save(path)


def read_header(path) -> dict:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IntegrityError(f"missing checkpoint {path}") from exc
    return _parse(raw, path)[0]


def _parse(raw: bytes, path):
    if len(raw) < _PREFIX.size:
        raise IntegrityError(f"truncated checkpoint {path}")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC or version != FORMAT_VERSION:
        raise IntegrityError(f"not a v{FORMAT_VERSION} checkpoint: {path}")
    try:
        header = json.loads(raw[_PREFIX.size:_PREFIX.size + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"corrupt checkpoint header in {path}") from exc
    return header, _PREFIX.size + hlen


def load_checkpoint(path, kind: str | None = None, expect_checksum: str | None = None) -> Checkpoint:
    """Load and verify a checkpoint.

    Raises IntegrityError if the file is missing, the stored checksum does
    not match the tensor bytes, the kind differs, or ``expect_checksum`` is
    given and differs.
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IntegrityError(f"missing checkpoint {path}") from exc
    header, base = _parse(raw, path)
    tensors = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        start = base + entry["offset"]
        if start + 4 * count > len(raw):
            raise IntegrityError(f"truncated tensor {entry['name']} in {path}")
        tensors[entry["name"]] = np.frombuffer(raw, dtype="<f4", count=count, offset=start).reshape(entry["shape"])
    actual = tensor_checksum(tensors)
    if actual != header["checksum"]:
        raise IntegrityError(f"checksum mismatch in {path}: stored {header['checksum'][:12]}, actual {actual[:12]}")
    if kind is not None and header["kind"] != kind:
        raise IntegrityError(f"{path} holds a {header['kind']!r} checkpoint, expected {kind!r}")
    if expect_checksum is not None and actual != expect_checksum:
        raise IntegrityError(f"{path} checksum {actual[:12]} does not match recorded {expect_checksum[:12]}")
    return Checkpoint(header["kind"], tensors, header.get("meta", {}))
