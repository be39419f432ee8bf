"""Bit packing, wire frames and compression-rate accounting.

Packing lays indices out LSB-first: value ``i`` occupies bits
``[i*b, (i+1)*b)`` of the little-endian bit stream, and padding bits in the
final byte are zero.

Every frame is::

    b"SQ" | u8 version | u8 frame_type | u32 body_length | body

with all multi-byte integers little-endian.  Bodies by frame type:

========  ===========================================================
HELLO     u16 protocol_version, u16 K, shape
FEATURES  u32 request_id, u16 K, shape, u8 bit_width, u32 count, packed
RESPONSE  u32 request_id, u8 kind; kind 0: shape + f64 data, kind 1: f64
ERROR     u16 code, utf-8 message
TOPK      u32 request_id, shape, u32 k, u8 index_width, packed indices,
          f16 values (top-k baseline, one row of k per last-axis vector)
RAW16     u32 request_id, shape, f16 data (uncompressed control)
========  ===========================================================

``shape`` is ``u8 rank`` followed by ``rank`` u32 dimensions.
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"SQ"
VERSION = 1
PROTOCOL_VERSION = 1
HEADER = struct.Struct("<2sBBI")
HEADER_SIZE = HEADER.size
MAX_BODY = 1 << 30
MAX_PACK_WIDTH = 8
FP16_BITS = 16


class FrameError(ValueError):
    """Raised for any byte sequence that is not a well-formed frame."""


class FrameType(enum.IntEnum):
    HELLO = 1
    FEATURES = 2
    RESPONSE = 3
    ERROR = 4
    TOPK = 5
    RAW16 = 6


class ErrorCode(enum.IntEnum):
    MALFORMED = 1
    HANDSHAKE = 2
    CORRUPT_BLOCK = 3
    SHAPE_MISMATCH = 4
    PROTOCOL = 5
    INTERNAL = 6


# -- bit packing ---------------------------------------------------------------

@dataclass(frozen=True)
class PackedIndices:
    bit_width: int
    count: int
    data: bytes = field(repr=False)


def packed_size(count: int, bit_width: int) -> int:
    return (count * bit_width + 7) // 8


def bits_for_levels(K: int) -> int:
    return max(1, math.ceil(math.log2(K)))


def _pack_bits(values: np.ndarray, width: int) -> bytes:
    bits = (values[:, None] >> np.arange(width, dtype=np.int64)) & 1
    return np.packbits(bits.astype(np.uint8).reshape(-1), bitorder="little").tobytes()


def _unpack_bits(data: bytes, count: int, width: int) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="little")
    if count * width < bits.size and bits[count * width:].any():
        raise ValueError("nonzero padding bits in packed payload")
    bits = bits[:count * width].reshape(count, width).astype(np.int64)
    return bits @ (1 << np.arange(width, dtype=np.int64))


def pack(indices, bit_width: int) -> PackedIndices:
    if not 1 <= bit_width <= MAX_PACK_WIDTH:
        raise ValueError(f"bit_width must be in [1, {MAX_PACK_WIDTH}], got {bit_width}")
    values = np.asarray(indices, dtype=np.int64).reshape(-1)
    bad = np.flatnonzero((values < 0) | (values >= 1 << bit_width))
    if bad.size:
        i = int(bad[0])
        raise ValueError(f"index {int(values[i])} at position {i} does not fit in {bit_width} bits")
    return PackedIndices(bit_width, int(values.size), _pack_bits(values, bit_width))


def unpack(p: PackedIndices) -> np.ndarray:
    if not 1 <= p.bit_width <= MAX_PACK_WIDTH:
        raise ValueError(f"bit_width must be in [1, {MAX_PACK_WIDTH}], got {p.bit_width}")
    need = packed_size(p.count, p.bit_width)
    if len(p.data) != need:
        raise ValueError(f"truncated payload: {len(p.data)} bytes for {p.count} x {p.bit_width} bits, need {need}")
    return _unpack_bits(p.data, p.count, p.bit_width)


# -- frames --------------------------------------------------------------------

@dataclass(frozen=True)
class Hello:
    K: int
    shape: tuple[int, ...]
    protocol_version: int = PROTOCOL_VERSION


@dataclass(frozen=True)
class Features:
    request_id: int
    K: int
    shape: tuple[int, ...]
    packed: PackedIndices


@dataclass(frozen=True)
class Response:
    request_id: int
    result: np.ndarray | float = field(repr=False)

    def __eq__(self, other):
        if not isinstance(other, Response):
            return NotImplemented
        if self.request_id != other.request_id:
            return False
        if isinstance(self.result, np.ndarray) != isinstance(other.result, np.ndarray):
            return False
        if isinstance(self.result, np.ndarray):
            return self.result.shape == other.result.shape and self.result.tobytes() == other.result.tobytes()
        return struct.pack("<d", self.result) == struct.pack("<d", other.result)


@dataclass(frozen=True)
class Error:
    code: int
    message: str


@dataclass(frozen=True)
class TopK:
    request_id: int
    shape: tuple[int, ...]
    k: int
    indices: np.ndarray = field(repr=False)   # (rows, k) int
    values: np.ndarray = field(repr=False)    # (rows, k) float16

    def __eq__(self, other):
        if not isinstance(other, TopK):
            return NotImplemented
        return (self.request_id, self.shape, self.k) == (other.request_id, other.shape, other.k) \
            and np.array_equal(self.indices, other.indices) \
            and self.values.astype("<f2").tobytes() == other.values.astype("<f2").tobytes()


@dataclass(frozen=True)
class Raw16:
    request_id: int
    data: np.ndarray = field(repr=False)      # float16, any rank <= 3

    def __eq__(self, other):
        if not isinstance(other, Raw16):
            return NotImplemented
        return self.request_id == other.request_id and self.data.shape == other.data.shape \
            and self.data.astype("<f2").tobytes() == other.data.astype("<f2").tobytes()


Frame = Hello | Features | Response | Error | TopK | Raw16

_TYPE_OF = {Hello: FrameType.HELLO, Features: FrameType.FEATURES, Response: FrameType.RESPONSE,
            Error: FrameType.ERROR, TopK: FrameType.TOPK, Raw16: FrameType.RAW16}


def _shape_bytes(shape) -> bytes:
    shape = tuple(int(d) for d in shape)
    if not 1 <= len(shape) <= 3 or any(d <= 0 for d in shape):
        raise ValueError(f"invalid shape {shape}")
    return struct.pack(f"<B{len(shape)}I", len(shape), *shape)


class _Reader:
    """Bounds-checked cursor over a frame body."""

    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise FrameError("length mismatch: body shorter than its fields")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct("<" + fmt)
        return s.unpack(self.take(s.size))

    def shape(self) -> tuple[int, ...]:
        (rank,) = self.unpack("B")
        if not 1 <= rank <= 3:
            raise FrameError(f"invalid tensor rank {rank}")
        shape = self.unpack(f"{rank}I")
        if any(d == 0 for d in shape):
            raise FrameError("zero-sized dimension")
        return shape

    def rest(self) -> bytes:
        return self.take(len(self.buf) - self.pos)

    def done(self):
        if self.pos != len(self.buf):
            raise FrameError("length mismatch: trailing bytes in body")


def _encode_body(f) -> bytes:
    if isinstance(f, Hello):
        return struct.pack("<HH", f.protocol_version, f.K) + _shape_bytes(f.shape)
    if isinstance(f, Features):
        p = f.packed
        if p.count != math.prod(f.shape):
            raise ValueError(f"{p.count} indices do not match shape {tuple(f.shape)}")
        return (struct.pack("<IH", f.request_id, f.K) + _shape_bytes(f.shape)
                + struct.pack("<BI", p.bit_width, p.count) + p.data)
    if isinstance(f, Response):
        if isinstance(f.result, np.ndarray):
            arr = np.asarray(f.result, dtype="<f8")
            return struct.pack("<IB", f.request_id, 0) + _shape_bytes(arr.shape) + arr.tobytes()
        return struct.pack("<IBd", f.request_id, 1, float(f.result))
    if isinstance(f, Error):
        return struct.pack("<H", f.code) + f.message.encode("utf-8")
    if isinstance(f, TopK):
        idx = np.asarray(f.indices, dtype=np.int64)
        dims = int(f.shape[-1])
        width = index_width(dims)
        rows = math.prod(f.shape) // dims
        if idx.shape != (rows, f.k) or np.shape(f.values) != (rows, f.k):
            raise ValueError("top-k arrays do not match shape and k")
        return (struct.pack("<I", f.request_id) + _shape_bytes(f.shape)
                + struct.pack("<IB", f.k, width) + _pack_bits(idx.reshape(-1), width)
                + np.asarray(f.values, dtype="<f2").tobytes())
    if isinstance(f, Raw16):
        arr = np.asarray(f.data, dtype="<f2")
        return struct.pack("<I", f.request_id) + _shape_bytes(arr.shape) + arr.tobytes()
    raise TypeError(f"not a frame: {type(f).__name__}")


def encode_frame(f) -> bytes:
    body = _encode_body(f)
    return HEADER.pack(MAGIC, VERSION, _TYPE_OF[type(f)], len(body)) + body


def parse_header(head: bytes) -> tuple[FrameType, int]:
    if len(head) < HEADER_SIZE:
        raise FrameError("length mismatch: truncated header")
    magic, version, ftype, length = HEADER.unpack_from(head)
    if magic != MAGIC:
        raise FrameError("bad magic")
    if version != VERSION:
        raise FrameError(f"unsupported version {version}")
    try:
        ftype = FrameType(ftype)
    except ValueError:
        raise FrameError(f"unknown frame type {ftype}") from None
    if length > MAX_BODY:
        raise FrameError(f"length mismatch: body length {length} exceeds limit")
    return ftype, length


def _decode_body(ftype: FrameType, body: bytes):
    r = _Reader(body)
    if ftype is FrameType.HELLO:
        version, K = r.unpack("HH")
        shape = r.shape()
        r.done()
        return Hello(K=K, shape=shape, protocol_version=version)
    if ftype is FrameType.FEATURES:
        rid, K = r.unpack("IH")
        shape = r.shape()
        width, count = r.unpack("BI")
        if not 1 <= width <= MAX_PACK_WIDTH:
            raise FrameError(f"invalid bit width {width}")
        if count != math.prod(shape):
            raise FrameError("length mismatch: index count does not match shape")
        data = r.take(packed_size(count, width))
        r.done()
        return Features(request_id=rid, K=K, shape=shape, packed=PackedIndices(width, count, data))
    if ftype is FrameType.RESPONSE:
        rid, kind = r.unpack("IB")
        if kind == 1:
            (value,) = r.unpack("d")
            r.done()
            return Response(rid, value)
        if kind != 0:
            raise FrameError(f"unknown response kind {kind}")
        shape = r.shape()
        n = math.prod(shape)
        arr = np.frombuffer(r.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
        r.done()
        return Response(rid, arr)
    if ftype is FrameType.ERROR:
        (code,) = r.unpack("H")
        try:
            msg = r.rest().decode("utf-8")
        except UnicodeDecodeError:
            raise FrameError("error message is not valid utf-8") from None
        return Error(code, msg)
    if ftype is FrameType.TOPK:
        (rid,) = r.unpack("I")
        shape = r.shape()
        k, width = r.unpack("IB")
        dims = shape[-1]
        rows = math.prod(shape) // dims
        if not 1 <= k <= dims or width != index_width(dims):
            raise FrameError("invalid top-k parameters")
        n = rows * k
        idx = _unpack_bits(r.take(packed_size(n, width)), n, width).reshape(rows, k)
        values = np.frombuffer(r.take(2 * n), dtype="<f2").astype(np.float16).reshape(rows, k)
        r.done()
        if idx.size and idx.max() >= dims:
            raise FrameError("top-k index out of range")
        return TopK(rid, shape, k, idx, values)
    if ftype is FrameType.RAW16:
        (rid,) = r.unpack("I")
        shape = r.shape()
        n = math.prod(shape)
        data = np.frombuffer(r.take(2 * n), dtype="<f2").astype(np.float16).reshape(shape)
        r.done()
        return Raw16(rid, data)
    raise FrameError(f"unknown frame type {ftype}")


def decode_body(ftype: FrameType, body: bytes):
    try:
        return _decode_body(ftype, body)
    except FrameError:
        raise
    except (ValueError, struct.error, OverflowError, MemoryError) as exc:
        raise FrameError(f"malformed body: {exc}") from None


def decode_frame(buf: bytes):
    buf = bytes(buf)
    ftype, length = parse_header(buf)
    if len(buf) - HEADER_SIZE != length:
        raise FrameError(f"length mismatch: header says {length}, body has {len(buf) - HEADER_SIZE}")
    return decode_body(ftype, buf[HEADER_SIZE:])


def read_frame(recv_exact):
    """Read one frame using ``recv_exact(n) -> bytes`` (stream decoding)."""
    ftype, length = parse_header(recv_exact(HEADER_SIZE))
    return decode_body(ftype, recv_exact(length))


# -- accounting ----------------------------------------------------------------

class Method(enum.Enum):
    DISCRETE = "discrete"
    TOPK = "topk"


def index_width(dims: int) -> int:
    return max(1, math.ceil(math.log2(dims)))


def compression_rate(method, bits_or_k: int, dims: int | None = None) -> float:
    """Nominal rate against FP16: ``16/bits`` for discrete codes, ``dims/k`` for top-k."""
    method = Method(method)
    if method is Method.DISCRETE:
        if bits_or_k <= 0:
            raise ValueError("bits must be positive")
        return FP16_BITS / bits_or_k
    if bits_or_k <= 0 or dims is None or dims <= 0:
        raise ValueError("top-k rate needs positive k and dims")
    return dims / bits_or_k


def measured_ratio(features_bytes_fp16: int, frame_bytes: int) -> float:
    return features_bytes_fp16 / frame_bytes


def fp16_bytes(shape) -> int:
    return 2 * math.prod(shape)
