"""Binary container for per-layer cross-attention tensors.

Layout (all integers little-endian u32)::

    b"XATN" | version=1 | layer_count | H | m | L | meta_len | meta (UTF-8 JSON)
    then layer_count blocks of H*m*L little-endian f32 in [h][j][i] order

The header before ``meta_len`` is 24 bytes. Meta is serialised with sorted
keys and compact separators so writing is deterministic.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"XATN"
VERSION = 1
_HEADER = struct.Struct("<4sIIIII")
_U32 = struct.Struct("<I")


class TraceFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class BadMagicError(TraceFormatError):
    pass


class VersionError(TraceFormatError):
    pass


class TruncatedError(TraceFormatError):
    pass


@dataclass
class AttnTrace:
    layers: list[np.ndarray]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.layers:
            raise ValueError("a trace needs at least one layer")
        self.layers = [np.asarray(a, dtype=np.float32) for a in self.layers]
        dims = {a.shape for a in self.layers}
        if len(dims) != 1 or len(next(iter(dims))) != 3:
            raise ValueError(f"layers must share one (H, m, L) shape, got {sorted(dims)}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.layers[0].shape

    def __eq__(self, other) -> bool:
        if not isinstance(other, AttnTrace):
            return NotImplemented
        return (
            self.meta == other.meta
            and len(self.layers) == len(other.layers)
            and all(a.tobytes() == b.tobytes() and a.shape == b.shape
                    for a, b in zip(self.layers, other.layers))
        )


def _meta_bytes(meta: dict) -> bytes:
    return json.dumps(meta, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def dumps(trace: AttnTrace) -> bytes:
    h, m, L = trace.dims
    meta = _meta_bytes(trace.meta)
    parts = [_HEADER.pack(MAGIC, VERSION, len(trace.layers), h, m, L), _U32.pack(len(meta)), meta]
    parts.extend(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in trace.layers)
    return b"".join(parts)


def loads(buf: bytes) -> AttnTrace:
    if len(buf) < _HEADER.size:
        if buf[:4] != MAGIC[: len(buf[:4])]:
            raise BadMagicError(f"bad magic {buf[:4]!r}", 0)
        raise TruncatedError(f"header needs {_HEADER.size} bytes, file has {len(buf)}", len(buf))
    magic, version, n_layers, h, m, L = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    if version != VERSION:
        raise VersionError(f"unsupported version {version}, expected {VERSION}", 4)
    if n_layers < 1 or min(h, m, L) < 1:
        raise TraceFormatError(f"invalid dims layers={n_layers} H={h} m={m} L={L}", 8)
    off = _HEADER.size
    if len(buf) < off + 4:
        raise TruncatedError("missing meta length", len(buf))
    (meta_len,) = _U32.unpack_from(buf, off)
    off += 4
    if len(buf) < off + meta_len:
        raise TruncatedError(f"meta needs {meta_len} bytes", len(buf))
    try:
        meta = json.loads(buf[off:off + meta_len].decode("utf-8")) if meta_len else {}
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TraceFormatError(f"meta is not UTF-8 JSON: {exc}", off) from None
    if not isinstance(meta, dict):
        raise TraceFormatError("meta must be a JSON object", off)
    off += meta_len
    block = h * m * L * 4
    layers = []
    for i in range(n_layers):
        if len(buf) < off + block:
            raise TruncatedError(f"layer {i} needs {block} bytes, {len(buf) - off} remain", len(buf))
        arr = np.frombuffer(buf, dtype="<f4", count=h * m * L, offset=off)
        layers.append(arr.astype(np.float32).reshape(h, m, L))
        off += block
    if off != len(buf):
        raise TraceFormatError(f"{len(buf) - off} trailing bytes after payload", off)
    return AttnTrace(layers, meta)


def write_trace(trace: AttnTrace, sink) -> None:
    """Write to a path or a binary file object."""
    data = dumps(trace)
    if hasattr(sink, "write"):
        sink.write(data)
    else:
        Path(sink).write_bytes(data)


def read_trace(source) -> AttnTrace:
    """Read from a path or a binary file object; ``.json`` paths use the sidecar schema."""
    if hasattr(source, "read"):
        return loads(source.read())
    path = Path(source)
    if path.suffix == ".json":
        return load_json(path.read_text())
    return loads(path.read_bytes())


def dump_json(trace: AttnTrace) -> str:
    """Same logical schema as the binary form, for small hand-written fixtures."""
    doc = {
        "version": VERSION,
        "dims": list(trace.dims),
        "meta": trace.meta,
        "layers": [a.tolist() for a in trace.layers],
    }
    return json.dumps(doc, sort_keys=True)


def load_json(text: str) -> AttnTrace:
    doc = json.loads(text)
    if doc.get("version", VERSION) != VERSION:
        raise VersionError(f"unsupported version {doc['version']}", 0)
    layers = [np.asarray(a, dtype=np.float32) for a in doc["layers"]]
    trace = AttnTrace(layers, doc.get("meta", {}))
    if "dims" in doc and tuple(doc["dims"]) != trace.dims:
        raise ValueError(f"declared dims {doc['dims']} do not match layers {trace.dims}")
    return trace
