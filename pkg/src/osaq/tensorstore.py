"""Named-tensor archive (``.osaq``).

Layout::

    b"OSAQTNSR"                 8 bytes magic
    header length               u64 little-endian
    header                      UTF-8 JSON, keys sorted, space-padded so the
                                payload starts on an 8-byte boundary
    payload                     raw little-endian tensor bytes

The header maps each tensor name to ``{"dtype", "shape", "offset",
"nbytes"}``; offsets are relative to the payload start, ascending,
8-byte aligned and non-overlapping. An optional ``"__metadata__"`` entry
holds a flat string-to-string map.
"""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import MalformedHeader, NameCollision, NonFinite, TruncatedPayload, UnknownDtype

MAGIC = b"OSAQTNSR"
METADATA_KEY = "__metadata__"
ALIGN = 8
MAX_NAME_BYTES = 256

DTYPES = {
    "f32": np.dtype("<f4"),
    "f64": np.dtype("<f8"),
    "i32": np.dtype("<i4"),
    "u8": np.dtype("u1"),
}


def _dtype_tag(arr: np.ndarray) -> str:
    kind, size = arr.dtype.kind, arr.dtype.itemsize
    if kind == "f":
        return "f64" if size == 8 else "f32"
    if kind == "u" and size == 1:
        return "u8"
    if kind in "iu" or kind == "b":
        return "i32"
    raise UnknownDtype(f"cannot store dtype {arr.dtype}")


def _check_name(name) -> None:
    if not isinstance(name, str) or not name or name == METADATA_KEY:
        raise MalformedHeader(f"invalid tensor name {name!r}")
    if len(name.encode("utf-8")) > MAX_NAME_BYTES:
        raise MalformedHeader(f"tensor name longer than {MAX_NAME_BYTES} bytes: {name[:40]}...")


@dataclass
class TensorArchive:
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    metadata: dict[str, str] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self, prefix: str = "") -> list[str]:
        return sorted(n for n in self.tensors if n.startswith(prefix))


def encode(tensors: dict, metadata: dict | None = None, *, dtype: str | None = None) -> bytes:
    """Serialize to bytes. ``dtype`` forces every float tensor to that tag."""
    entries = {}
    blobs = []
    offset = 0
    for name in sorted(tensors):
        _check_name(name)
        arr = np.asarray(tensors[name])
        if arr.dtype.kind == "f" and not np.all(np.isfinite(arr)):
            raise NonFinite(f"tensor {name!r} contains NaN or Inf")
        tag = _dtype_tag(arr)
        if dtype is not None and arr.dtype.kind == "f":
            tag = dtype
        blob = np.ascontiguousarray(arr, dtype=DTYPES[tag]).tobytes()
        entries[name] = {"dtype": tag, "nbytes": len(blob), "offset": offset, "shape": list(arr.shape)}
        pad = (-len(blob)) % ALIGN
        blobs.append(blob + b"\0" * pad)
        offset += len(blob) + pad
    if metadata:
        entries[METADATA_KEY] = {str(k): str(v) for k, v in metadata.items()}
    header = json.dumps(entries, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    header += b" " * ((-(len(MAGIC) + 8 + len(header))) % ALIGN)
    return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(blobs)


def archive_write(path, tensors: dict, metadata: dict | None = None, *, dtype: str | None = None) -> None:
    """Write atomically: a temp file in the destination directory is renamed over ``path``."""
    names = list(tensors)
    if len(set(names)) != len(names):
        raise NameCollision("duplicate tensor names")
    if metadata and METADATA_KEY in tensors:
        raise NameCollision(f"{METADATA_KEY!r} is reserved")
    data = encode(tensors, metadata, dtype=dtype)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def decode(data: bytes) -> TensorArchive:
    if len(data) < len(MAGIC) + 8 or data[: len(MAGIC)] != MAGIC:
        raise MalformedHeader("bad magic")
    (hlen,) = struct.unpack("<Q", data[len(MAGIC): len(MAGIC) + 8])
    start = len(MAGIC) + 8
    if hlen > len(data) - start:
        raise MalformedHeader(f"header length {hlen} exceeds file size")
    try:
        header = json.loads(data[start: start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeader(f"header is not valid JSON: {exc}") from None
    if not isinstance(header, dict):
        raise MalformedHeader("header must be a JSON object")
    payload = memoryview(data)[start + hlen:]

    metadata = header.pop(METADATA_KEY, {})
    if not isinstance(metadata, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in metadata.items()
    ):
        raise MalformedHeader("metadata must map strings to strings")

    spans = []
    tensors = {}
    for name, entry in header.items():
        _check_name(name)
        if not isinstance(entry, dict) or set(entry) != {"dtype", "shape", "offset", "nbytes"}:
            raise MalformedHeader(f"bad entry for {name!r}")
        tag, shape, offset, nbytes = entry["dtype"], entry["shape"], entry["offset"], entry["nbytes"]
        if tag not in DTYPES:
            raise UnknownDtype(f"{name!r}: unknown dtype {tag!r}")
        if not isinstance(shape, list) or not all(type(d) is int and d >= 0 for d in shape):
            raise MalformedHeader(f"{name!r}: bad shape {shape!r}")
        if type(offset) is not int or type(nbytes) is not int or offset < 0 or nbytes < 0:
            raise MalformedHeader(f"{name!r}: bad offset/nbytes")
        if offset % ALIGN:
            raise MalformedHeader(f"{name!r}: offset {offset} not {ALIGN}-byte aligned")
        if nbytes != math.prod(shape) * DTYPES[tag].itemsize:
            raise MalformedHeader(f"{name!r}: nbytes {nbytes} does not match shape {shape}")
        if offset + nbytes > len(payload):
            raise TruncatedPayload(f"{name!r}: needs {offset + nbytes} payload bytes, file has {len(payload)}")
        spans.append((offset, nbytes, name))
        tensors[name] = np.frombuffer(payload[offset: offset + nbytes], dtype=DTYPES[tag]).reshape(shape).copy()

    # file order is the canonical name order; offsets must follow it
    spans.sort(key=lambda t: t[2])
    end = 0
    for offset, nbytes, name in spans:
        if offset < end:
            raise MalformedHeader(f"{name!r}: offset {offset} overlaps or precedes previous tensor")
        end = offset + nbytes
    return TensorArchive(tensors, dict(metadata))


def archive_read(path) -> TensorArchive:
    return decode(Path(path).read_bytes())
