"""Binary message format for sketched Jacobians.

Little-endian throughout::

    magic        4s   b"SPKJ"
    version      u16
    client_id    u32
    codec        u8   0=f64 1=f32 2=f16 3=i8
    n_layers     u16
    n_rows       u32
    n_classes    u16
    flags        u8   bit0: logits present, bit1: labels present
    reserved     u8
    -- per layer --
    name_len     u16
    name         utf-8 bytes
    width        u32
    scale        f32  (i8 codec only: max|entry| / 127)
    -- rows --
    sample_idx   u32 * n_rows
    labels       u8  * n_rows          (if flagged)
    -- payload --
    per layer    n_rows * n_classes * width entries in the codec
    logits       f32 * n_rows * n_classes   (if flagged)

Logits always travel as f32; only the Jacobian payload is quantized.
"""
from __future__ import annotations

import struct

import numpy as np

from .errors import ParseError
from .projection import Codec, CompressedJacobian

MAGIC = b"SPKJ"
VERSION = 1
_HEAD = struct.Struct("<4sHIBHIHBB")
HEADER_BYTES = _HEAD.size  # 21
_CODEC_TAGS = {Codec.F64: 0, Codec.F32: 1, Codec.F16: 2, Codec.I8: 3}
_TAG_CODECS = {v: k for k, v in _CODEC_TAGS.items()}
_DTYPES = {Codec.F64: "<f8", Codec.F32: "<f4", Codec.F16: "<f2", Codec.I8: "i1"}
F16_MAX = float(np.finfo(np.float16).max)


def layer_table_bytes(names, codec: Codec) -> int:
    extra = 4 if Codec(codec) is Codec.I8 else 0
    return sum(2 + len(n.encode("utf-8")) + 4 + extra for n in names)


def message_size(cj: CompressedJacobian, codec: Codec | None = None) -> int:
    """Exact encoded length of ``cj`` under ``codec`` (default: its own)."""
    return comm_bytes(cj, codec=codec)


def comm_bytes(cj: CompressedJacobian, logits_rows: int | None = None,
               num_classes: int | None = None, codec: Codec | None = None) -> int:
    """Bytes on the wire for one directed message.

    ``logits_rows``/``num_classes`` override the logit block size; by default
    they come from ``cj`` itself.
    """
    codec = Codec(codec or cj.codec)
    n = cj.sample_count
    c = cj.num_classes if num_classes is None else num_classes
    rows = (n if cj.logits is not None else 0) if logits_rows is None else logits_rows
    size = HEADER_BYTES + layer_table_bytes(cj.layers, codec) + 4 * n
    if cj.labels is not None:
        size += n
    size += sum(v.size for v in cj.layers.values()) * codec.itemsize
    return size + 4 * rows * c


def i8_scale(block: np.ndarray) -> float:
    m = float(np.max(np.abs(block))) if block.size else 0.0
    return float(np.float32(m / 127.0))


def quantize_i8(block: np.ndarray, scale: float) -> np.ndarray:
    if scale == 0.0:
        return np.zeros(block.shape, dtype=np.int8)
    return np.clip(np.rint(block / scale), -127, 127).astype(np.int8)


def to_f16(block: np.ndarray) -> tuple[np.ndarray, int]:
    """Round to binary16, clamping overflow to the largest finite value."""
    over = int(np.count_nonzero(np.abs(block) > F16_MAX))
    if over:
        block = np.clip(block, -F16_MAX, F16_MAX)
    return block.astype(np.float16), over


def encode_wire(cj: CompressedJacobian, codec: Codec | str | None = None,
                stats: dict | None = None) -> bytes:
    codec = Codec(codec or cj.codec)
    n, c = cj.sample_count, cj.num_classes
    flags = (1 if cj.logits is not None else 0) | (2 if cj.labels is not None else 0)
    parts = [_HEAD.pack(MAGIC, VERSION, cj.owner_client, _CODEC_TAGS[codec],
                        len(cj.layers), n, c, flags, 0)]
    scales = {}
    for name, block in cj.layers.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<I", block.shape[2]))
        if codec is Codec.I8:
            scales[name] = i8_scale(block)
            parts.append(struct.pack("<f", scales[name]))
    parts.append(np.asarray(cj.sample_indices, dtype="<u4").tobytes())
    if cj.labels is not None:
        parts.append(np.asarray(cj.labels, dtype=np.uint8).tobytes())
    clamped = 0
    for name, block in cj.layers.items():
        if codec is Codec.I8:
            parts.append(quantize_i8(block, scales[name]).tobytes())
        elif codec is Codec.F16:
            half, over = to_f16(block)
            clamped += over
            parts.append(half.astype("<f2").tobytes())
        else:
            parts.append(np.ascontiguousarray(block, dtype=_DTYPES[codec]).tobytes())
    if cj.logits is not None:
        parts.append(np.asarray(cj.logits, dtype="<f4").tobytes())
    if stats is not None:
        stats["f16_clamped"] = stats.get("f16_clamped", 0) + clamped
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n: int, what: str) -> memoryview:
        if self.pos + n > len(self.buf):
            raise ParseError(f"truncated message while reading {what}", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        st = struct.Struct(fmt)
        return st.unpack(self.take(st.size, what))

    def array(self, dtype: str, count: int, what: str) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count, what), dtype=dt).copy()


def decode_wire(buf: bytes) -> CompressedJacobian:
    """Inverse of :func:`encode_wire`; tensors come back as float64."""
    r = _Reader(buf)
    magic, version, client, tag, n_layers, n, c, flags, _ = r.unpack(_HEAD.format, "header")
    if magic != MAGIC:
        raise ParseError(f"bad magic {bytes(magic)!r}", 0)
    if version != VERSION:
        raise ParseError(f"unsupported version {version}", 4)
    if tag not in _TAG_CODECS:
        raise ParseError(f"unknown codec tag {tag}", 10)
    codec = _TAG_CODECS[tag]
    table = []
    for _ in range(n_layers):
        (name_len,) = r.unpack("<H", "layer name length")
        name = bytes(r.take(name_len, "layer name")).decode("utf-8")
        (width,) = r.unpack("<I", "layer width")
        scale = r.unpack("<f", "layer scale")[0] if codec is Codec.I8 else None
        table.append((name, width, scale))
    idx = r.array("<u4", n, "sample indices").astype(np.int64)
    labels = r.array("u1", n, "labels").astype(np.int64) if flags & 2 else None
    layers = {}
    for name, width, scale in table:
        vals = r.array(_DTYPES[codec], n * c * width, f"payload of {name}").astype(np.float64)
        if codec is Codec.I8:
            vals *= scale
        layers[name] = vals.reshape(n, c, width)
    logits = r.array("<f4", n * c, "logits").astype(np.float64).reshape(n, c) if flags & 1 else None
    if r.pos != len(r.buf):
        raise ParseError(f"{len(r.buf) - r.pos} trailing bytes", r.pos)
    return CompressedJacobian(layers, owner_client=client, sample_indices=idx,
                              codec=codec, logits=logits, labels=labels)
