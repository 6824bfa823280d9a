"""Binary model files.

Layout (little-endian)::

    b"TSDM"            magic
    u16                format version
    u32                descriptor length in bytes
    bytes              UTF-8 JSON descriptor (architecture + parameter names)
    repeated tensors   u8 rank, u32 dims[rank], float32 payload (row-major)

Tensors appear in the order of the descriptor's ``"params"`` list.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .models import DetectorModel, ExtractorModel, GeneratorModel, ToyModel

__all__ = ["FormatError", "UnsupportedVersionError", "save_model", "load_model", "model_to_bytes", "model_from_bytes"]

MAGIC = b"TSDM"
VERSION = 1
_KINDS = {"extractor": ExtractorModel, "generator": GeneratorModel, "detector": DetectorModel}


class FormatError(ValueError):
    """Malformed or truncated binary file."""

    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} at byte offset {offset}")


class UnsupportedVersionError(FormatError):
    def __init__(self, version: int, offset: int = 4):
        self.version = version
        super().__init__(f"unsupported format version {version} (expected {VERSION})", offset)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated {what}: need {n} bytes, {len(self.buf) - self.pos} left", self.pos)
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def write_tensor(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    head = struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def read_tensor(r: _Reader, what: str) -> np.ndarray:
    (rank,) = r.unpack("<B", f"{what} rank")
    dims = r.unpack(f"<{rank}I", f"{what} dims")
    count = int(np.prod(dims)) if rank else 1
    payload = r.take(4 * count, f"{what} payload")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)


def model_to_bytes(model: ToyModel) -> bytes:
    names = list(model.params)
    desc = dict(model.arch)
    desc["kind"] = model.kind
    desc["params"] = names
    blob = json.dumps(desc, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<H", VERSION), struct.pack("<I", len(blob)), blob]
    parts.extend(write_tensor(model.params[k]) for k in names)
    return b"".join(parts)


def model_from_bytes(buf: bytes) -> ToyModel:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic (expected b'TSDM')", 0)
    (version,) = r.unpack("<H", "version")
    if version != VERSION:
        raise UnsupportedVersionError(version)
    (n,) = r.unpack("<I", "descriptor length")
    start = r.pos
    try:
        desc = json.loads(r.take(n, "descriptor").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"invalid descriptor JSON ({exc})", start) from None
    kind = desc.pop("kind", None)
    names = desc.pop("params", None)
    if kind not in _KINDS or not isinstance(names, list):
        raise FormatError(f"descriptor lacks a valid kind/params list (kind={kind!r})", start)
    params = {name: read_tensor(r, f"tensor {name!r}") for name in names}
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes", r.pos)
    desc["kind"] = kind
    return _KINDS[kind](desc, params)


def save_model(path, model: ToyModel) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path) -> ToyModel:
    return model_from_bytes(Path(path).read_bytes())
