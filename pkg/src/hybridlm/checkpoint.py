"""In-memory checkpoints and the ``PLC2`` binary container.

File layout::

    b"PLC2" | version: u32 LE | meta_len: u64 LE | metadata (UTF-8 JSON) | zero pad
    payload (starts 64-byte aligned; every blob 64-byte aligned within it)

Blob offsets in the metadata are relative to the payload start. Every blob
carries a CRC32; bytes between blobs must be zero, so any flipped payload bit
is reported as an :class:`IntegrityError`.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field

import numpy as np

from .config import ModelConfig
from .errors import FormatError, IntegrityError, LoadError, SchemaError
from .quant.fp8 import Fp8Spec, Fp8Tensor
from .quant.int4 import QuantTensor

MAGIC = b"PLC2"
VERSION = 1
ALIGN = 64
HEADER = struct.Struct("<4sIQ")
MAX_META_LEN = 1 << 28


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    _dense: dict = field(default_factory=dict, repr=False, compare=False)

    def dense(self, name: str) -> np.ndarray:
        """Float view of a tensor, dequantizing (and memoizing) packed formats."""
        t = self.tensors[name]
        if isinstance(t, np.ndarray):
            return t
        cached = self._dense.get(name)
        if cached is None:
            cached = t.dequantize(np.float32)
            self._dense[name] = cached
        return cached

    @property
    def dtype(self):
        for t in self.tensors.values():
            if isinstance(t, np.ndarray):
                return t.dtype.type
        return np.float32

    def astype(self, dtype) -> "Checkpoint":
        tensors = {k: self.dense(k).astype(dtype) for k in self.tensors}
        return Checkpoint(self.config, tensors, dict(self.extra))

    def copy(self) -> "Checkpoint":
        tensors = {k: (v.copy() if isinstance(v, np.ndarray) else v) for k, v in self.tensors.items()}
        return Checkpoint(self.config, tensors, dict(self.extra))

    def with_config(self, config: ModelConfig) -> "Checkpoint":
        return Checkpoint(config, self.tensors, dict(self.extra))

    def names(self) -> list[str]:
        return list(self.tensors)

    def param_count(self) -> int:
        return sum(int(np.prod(_shape_of(t))) for t in self.tensors.values())

    def content_hash(self) -> str:
        """SHA-256 over names, dtypes, shapes and raw bytes of every tensor."""
        h = hashlib.sha256()
        for name in sorted(self.tensors):
            t = self.tensors[name]
            h.update(name.encode())
            h.update(_dtype_tag(t).encode())
            h.update(repr(_shape_of(t)).encode())
            for blob in _blobs(t):
                h.update(blob)
        return h.hexdigest()


def _shape_of(t) -> tuple:
    return tuple(t.shape)


def _dtype_tag(t) -> str:
    if isinstance(t, QuantTensor):
        return "int4g"
    if isinstance(t, Fp8Tensor):
        return t.spec.dtype_tag
    if isinstance(t, np.ndarray) and t.dtype == np.float32:
        return "f32"
    raise SchemaError(f"unsupported tensor type for the container: "
                      f"{getattr(t, 'dtype', type(t).__name__)}")


def _blobs(t) -> list[bytes]:
    if isinstance(t, QuantTensor):
        return [t.codes, t.scales.astype("<f4").tobytes(), t.zeros.astype("<f4").tobytes()]
    if isinstance(t, Fp8Tensor):
        return [t.data]
    return [np.ascontiguousarray(t, dtype="<f4").tobytes()]


def _align(n: int) -> int:
    return -(-n // ALIGN) * ALIGN


def serialize(ckpt: Checkpoint, checksum: bool = True) -> bytes:
    entries = {}
    chunks: list[tuple[int, bytes]] = []
    offset = 0

    def put(blob: bytes) -> dict:
        nonlocal offset
        rec = {"offset": offset, "length": len(blob)}
        if checksum:
            rec["crc32"] = zlib.crc32(blob)
        chunks.append((offset, blob))
        offset = _align(offset + len(blob))
        return rec

    for name in sorted(ckpt.tensors):  # canonical order, so equal checkpoints give equal bytes
        t = ckpt.tensors[name]
        tag = _dtype_tag(t)
        blobs = _blobs(t)
        entry = {"dtype": tag, "shape": list(_shape_of(t))}
        entry.update(put(blobs[0]))
        if tag == "int4g":
            entry["group_size"] = t.group_size
            entry["scales"] = put(blobs[1])
            entry["zeros"] = put(blobs[2])
        elif tag.startswith("fp8"):
            entry["scale"] = t.spec.scale
        entries[name] = entry

    payload = bytearray(offset)
    for off, blob in chunks:
        payload[off:off + len(blob)] = blob
    meta = {
        "config": ckpt.config.to_dict(),
        "tensors": entries,
        "extra": ckpt.extra,
        "payload_length": len(payload),
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    head = HEADER.pack(MAGIC, VERSION, len(meta_bytes)) + meta_bytes
    head += b"\x00" * (_align(len(head)) - len(head))
    return bytes(head) + bytes(payload)


def save(ckpt: Checkpoint, path: str | os.PathLike, checksum: bool = True) -> None:
    """Write atomically (temp file in the same directory, then rename)."""
    data = serialize(ckpt, checksum)
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".plc2-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_header(f, file_size: int) -> tuple[dict, int]:
    raw = f.read(HEADER.size)
    if len(raw) < HEADER.size:
        raise FormatError("file too short for a PLC2 header")
    magic, version, meta_len = HEADER.unpack(raw)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    if meta_len > MAX_META_LEN or HEADER.size + meta_len > file_size:
        raise IntegrityError(f"metadata length {meta_len} exceeds file size {file_size}")
    try:
        meta = json.loads(f.read(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"metadata is not valid JSON: {exc}") from exc
    start = _align(HEADER.size + meta_len)
    if any(f.read(start - HEADER.size - meta_len)):
        raise IntegrityError("non-zero bytes after the metadata")
    return meta, start


def _check_layout(meta: dict, payload_len: int) -> list[tuple[int, int]]:
    spans = []
    try:
        for name, e in meta["tensors"].items():
            recs = [e] + [e[k] for k in ("scales", "zeros") if k in e]
            for r in recs:
                off, length = int(r["offset"]), int(r["length"])
                if off < 0 or length < 0 or off + length > payload_len:
                    raise IntegrityError(f"tensor {name!r}: blob [{off}, {off + length}) "
                                         f"outside payload of {payload_len} bytes")
                spans.append((off, off + length))
    except (KeyError, TypeError, AttributeError) as exc:
        raise IntegrityError(f"malformed tensor table: {exc}") from exc
    spans.sort()
    for (a0, a1), (b0, _) in zip(spans, spans[1:]):
        if b0 < a1:
            raise IntegrityError("tensor blobs overlap")
    return spans


def _take(payload: bytes, rec: dict, name: str) -> bytes:
    blob = payload[rec["offset"]:rec["offset"] + rec["length"]]
    if "crc32" in rec and zlib.crc32(blob) != rec["crc32"]:
        raise IntegrityError(f"checksum mismatch in tensor {name!r}")
    return blob


def deserialize_stream(f, file_size: int) -> Checkpoint:
    meta, payload_start = _read_header(f, file_size)
    expected = meta.get("payload_length")
    if not isinstance(expected, int) or payload_start + expected != file_size:
        raise IntegrityError(
            f"payload is {file_size - payload_start} bytes, header declares {expected}")
    spans = _check_layout(meta, expected)
    f.seek(payload_start)
    payload = f.read(expected)
    if len(payload) != expected:
        raise IntegrityError("truncated payload")

    covered = np.zeros(expected, dtype=bool)
    for a, b in spans:
        covered[a:b] = True
    if np.any(np.frombuffer(payload, dtype=np.uint8)[~covered]):
        raise IntegrityError("non-zero bytes in alignment padding")

    config = ModelConfig.from_dict(meta["config"])
    tensors = {}
    for name, e in meta["tensors"].items():
        shape = tuple(e["shape"])
        tag = e["dtype"]
        data = _take(payload, e, name)
        if tag == "f32":
            arr = np.frombuffer(data, dtype="<f4").astype(np.float32)
            if arr.size != int(np.prod(shape)):
                raise IntegrityError(f"tensor {name!r}: {arr.size} values for shape {shape}")
            tensors[name] = arr.reshape(shape)
        elif tag == "int4g":
            gs = int(e["group_size"])
            rows = int(np.prod(shape[:-1])) if len(shape) > 1 else 1
            ng = -(-shape[-1] // gs)
            scales = np.frombuffer(_take(payload, e["scales"], name), "<f4").astype(np.float32)
            zeros = np.frombuffer(_take(payload, e["zeros"], name), "<f4").astype(np.float32)
            if scales.size != rows * ng or zeros.size != rows * ng:
                raise IntegrityError(f"tensor {name!r}: group table size mismatch")
            tensors[name] = QuantTensor(bytes(data), shape, gs,
                                        scales.reshape(rows, ng), zeros.reshape(rows, ng))
        elif tag in ("fp8e4m3", "fp8e5m2"):
            tensors[name] = Fp8Tensor(bytes(data), shape, Fp8Spec(tag[3:].upper(), e["scale"]))
        else:
            raise FormatError(f"tensor {name!r}: unknown dtype tag {tag!r}")
    return Checkpoint(config, tensors, meta.get("extra", {}))


def load(path: str | os.PathLike) -> Checkpoint:
    path = os.fspath(path)
    try:
        size = os.path.getsize(path)
        with open(path, "rb") as f:
            return deserialize_stream(f, size)
    except OSError as exc:
        raise LoadError(f"cannot read checkpoint {path}: {exc}") from exc


def loads(data: bytes) -> Checkpoint:
    import io

    return deserialize_stream(io.BytesIO(data), len(data))


def payload_bytes(ckpt: Checkpoint, names=None) -> int:
    """Serialized tensor bytes (codes + group tables), excluding alignment padding."""
    names = ckpt.tensors if names is None else names
    return sum(sum(len(b) for b in _blobs(ckpt.tensors[n])) for n in names)
