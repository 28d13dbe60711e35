"""Bit-exact binary encoding of payloads and protocol frames.

Frame layout::

    "MCF2" | opcode u8 | body_len u32 LE | body

Payload layout::

    tag u8 | count u64 LE | elements (little-endian)

String elements are ``len u32 LE | UTF-8``; strings inside frame bodies are
``len u16 LE | UTF-8``.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from typing import Iterable, Union

import numpy as np

from .errors import BadMagic, Malformed, TooLarge, UnknownOpcode
from .topology import Endpoint

MAGIC = b"MCF2"
HEADER = struct.Struct("<4sBI")
HEADER_SIZE = HEADER.size  # 9
MAX_SIZE = 1 << 30  # 1 GiB, applies to encoded payloads and frame bodies

_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_F64 = struct.Struct("<d")
_PAYLOAD_HEAD = struct.Struct("<BQ")


class PayloadType(enum.IntEnum):
    RAW = 0
    F64 = 1
    F32 = 2
    I32 = 3
    I64 = 4
    BOOL = 5
    STRING = 6


_DTYPES = {
    PayloadType.F64: np.dtype("<f8"),
    PayloadType.F32: np.dtype("<f4"),
    PayloadType.I32: np.dtype("<i4"),
    PayloadType.I64: np.dtype("<i8"),
    PayloadType.BOOL: np.dtype("u1"),
}
_NATIVE = {
    PayloadType.F64: np.float64,
    PayloadType.F32: np.float32,
    PayloadType.I32: np.int32,
    PayloadType.I64: np.int64,
    PayloadType.BOOL: np.bool_,
}
_BY_KIND = {(np.dtype(v).kind, np.dtype(v).itemsize): k for k, v in _NATIVE.items()}


class Payload:
    """A homogeneous typed array.

    ``elements`` is ``bytes`` for RAW, a 1-D numpy array for the numeric and
    bool types, and a tuple of ``str`` for STRING.
    """

    __slots__ = ("type", "elements")

    def __init__(self, type: PayloadType, elements):
        self.type = PayloadType(type)
        if self.type is PayloadType.RAW:
            if not isinstance(elements, bytes):
                elements = memoryview(elements).tobytes()
        elif self.type is PayloadType.STRING:
            elements = tuple(elements)
            if not all(isinstance(s, str) for s in elements):
                raise TypeError("string payload elements must be str")
        else:
            elements = np.asarray(elements, dtype=_NATIVE[self.type]).reshape(-1)
        self.elements = elements

    @classmethod
    def raw(cls, data=b"") -> "Payload":
        return cls(PayloadType.RAW, data)

    @classmethod
    def f64(cls, values=()) -> "Payload":
        return cls(PayloadType.F64, values)

    @classmethod
    def f32(cls, values=()) -> "Payload":
        return cls(PayloadType.F32, values)

    @classmethod
    def i32(cls, values=()) -> "Payload":
        return cls(PayloadType.I32, values)

    @classmethod
    def i64(cls, values=()) -> "Payload":
        return cls(PayloadType.I64, values)

    @classmethod
    def bools(cls, values=()) -> "Payload":
        return cls(PayloadType.BOOL, values)

    @classmethod
    def strings(cls, values=()) -> "Payload":
        return cls(PayloadType.STRING, values)

    @classmethod
    def of(cls, value) -> "Payload":
        """Wrap a Python value in the matching payload type."""
        if isinstance(value, Payload):
            return value
        if isinstance(value, (bytes, bytearray, memoryview)):
            return cls.raw(value)
        if isinstance(value, str):
            return cls.strings([value])
        if isinstance(value, np.ndarray):
            ptype = _BY_KIND.get((value.dtype.kind, value.dtype.itemsize))
            if ptype is None:
                raise TypeError(f"unsupported array dtype {value.dtype}")
            return cls(ptype, value)
        if isinstance(value, (bool, np.bool_)):
            return cls.bools([value])
        if isinstance(value, (int, np.integer)):
            return cls.i64([value])
        if isinstance(value, (float, np.floating)):
            return cls.f64([value])
        seq = list(value)
        if seq and all(isinstance(v, str) for v in seq):
            return cls.strings(seq)
        if seq and all(isinstance(v, (bool, np.bool_)) for v in seq):
            return cls.bools(seq)
        if seq and all(isinstance(v, (int, np.integer)) and not isinstance(v, bool) for v in seq):
            return cls.i64(seq)
        return cls.f64(seq)

    def __len__(self) -> int:
        return len(self.elements)

    def copy(self) -> "Payload":
        if self.type is PayloadType.RAW:
            return Payload(self.type, memoryview(self.elements).tobytes())
        if self.type is PayloadType.STRING:
            return Payload(self.type, self.elements)
        return Payload(self.type, self.elements.copy())

    def to_bytes(self) -> bytes:
        return encode_payload(self)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Payload):
            return NotImplemented
        if self.type != other.type:
            return False
        if self.type in (PayloadType.RAW, PayloadType.STRING):
            return self.elements == other.elements
        # bitwise comparison, so NaNs compare equal to themselves
        return len(self.elements) == len(other.elements) and (
            self.elements.tobytes() == other.elements.tobytes()
        )

    __hash__ = None

    def __repr__(self) -> str:
        shown = self.elements if len(self) <= 8 else f"<{len(self)} elements>"
        return f"Payload({self.type.name}, {shown!r})"


# --- payload encoding --------------------------------------------------------


def _payload_parts(p: Payload) -> tuple[list, int]:
    """Buffers that concatenate to the encoded payload, plus total length."""
    if p.type is PayloadType.RAW:
        parts = [_PAYLOAD_HEAD.pack(p.type, len(p.elements)), p.elements]
        size = _PAYLOAD_HEAD.size + len(p.elements)
    elif p.type is PayloadType.STRING:
        encoded = [s.encode("utf-8") for s in p.elements]
        parts = [_PAYLOAD_HEAD.pack(p.type, len(encoded))]
        size = _PAYLOAD_HEAD.size
        for e in encoded:
            if len(e) > 0xFFFFFFFF:
                raise TooLarge("string element longer than 4 GiB")
            parts.append(_U32.pack(len(e)))
            parts.append(e)
            size += 4 + len(e)
    else:
        arr = p.elements
        size = _PAYLOAD_HEAD.size + arr.size * _DTYPES[p.type].itemsize
        if size > MAX_SIZE:
            raise TooLarge(f"payload of {size} bytes exceeds 1 GiB")
        if p.type is PayloadType.BOOL:
            arr = arr.view(np.uint8)
        else:
            arr = arr.astype(_DTYPES[p.type], copy=False)
        parts = [_PAYLOAD_HEAD.pack(p.type, arr.size), memoryview(np.ascontiguousarray(arr)).cast("B")]
    if size > MAX_SIZE:
        raise TooLarge(f"payload of {size} bytes exceeds 1 GiB")
    return parts, size


def encode_payload(p: Payload) -> bytes:
    parts, _ = _payload_parts(p)
    return b"".join(parts)


def decode_payload(b) -> Payload:
    """Decode exactly one payload occupying all of ``b``."""
    mv = memoryview(b).cast("B")
    if len(mv) < _PAYLOAD_HEAD.size:
        raise Malformed("truncated payload header")
    tag, count = _PAYLOAD_HEAD.unpack_from(mv, 0)
    try:
        ptype = PayloadType(tag)
    except ValueError:
        raise Malformed(f"bad payload tag {tag}") from None
    body = mv[_PAYLOAD_HEAD.size :]
    if ptype is PayloadType.RAW:
        if len(body) != count:
            raise Malformed("raw length does not match count")
        return Payload(ptype, body.tobytes())
    if ptype is PayloadType.STRING:
        out, off = [], 0
        for _ in range(count):
            if off + 4 > len(body):
                raise Malformed("truncated string length")
            (n,) = _U32.unpack_from(body, off)
            off += 4
            if off + n > len(body):
                raise Malformed("truncated string element")
            try:
                out.append(str(body[off : off + n], "utf-8"))
            except UnicodeDecodeError:
                raise Malformed("invalid UTF-8 in string element") from None
            off += n
        if off != len(body):
            raise Malformed("trailing bytes after string elements")
        return Payload(ptype, out)
    dtype = _DTYPES[ptype]
    if count > len(body) // dtype.itemsize or len(body) != count * dtype.itemsize:
        raise Malformed("element region does not match count")
    if body.readonly:
        arr = np.frombuffer(body, dtype=dtype).copy()
    else:
        arr = np.frombuffer(body, dtype=dtype)
    if ptype is PayloadType.BOOL:
        if arr.size and arr.max() > 1:
            raise Malformed("bool element not 0 or 1")
        return Payload(ptype, arr.view(np.bool_))
    return Payload(ptype, arr.astype(_NATIVE[ptype], copy=False))


# --- frames ------------------------------------------------------------------


class Opcode(enum.IntEnum):
    REGISTER = 0x01
    REGISTER_ACK = 0x02
    LOOKUP = 0x03
    LOCATION = 0x04
    DEREGISTER = 0x05
    DATA = 0x06
    ABORT = 0x07
    FIN = 0x08


@dataclass(frozen=True)
class Register:
    name: str
    host: str
    port: int
    opcode = Opcode.REGISTER


@dataclass(frozen=True)
class RegisterAck:
    ok: bool
    opcode = Opcode.REGISTER_ACK


@dataclass(frozen=True)
class Lookup:
    name: str
    opcode = Opcode.LOOKUP


@dataclass(frozen=True)
class Location:
    name: str
    host: str
    port: int
    opcode = Opcode.LOCATION


@dataclass(frozen=True)
class Deregister:
    name: str
    opcode = Opcode.DEREGISTER


@dataclass(frozen=True, eq=False)
class Data:
    src: Endpoint
    dst: Endpoint
    timestamp: float
    payload: Payload
    opcode = Opcode.DATA

    def __eq__(self, other) -> bool:
        if not isinstance(other, Data):
            return NotImplemented
        same_t = _F64.pack(self.timestamp) == _F64.pack(other.timestamp)
        return (self.src, self.dst) == (other.src, other.dst) and same_t and self.payload == other.payload


@dataclass(frozen=True)
class Abort:
    reason: str
    opcode = Opcode.ABORT


@dataclass(frozen=True)
class Fin:
    opcode = Opcode.FIN


Frame = Union[Register, RegisterAck, Lookup, Location, Deregister, Data, Abort, Fin]


def _str16(s: str) -> bytes:
    b = s.encode("utf-8")
    if len(b) > 0xFFFF:
        raise TooLarge("string field longer than 65535 bytes")
    return _U16.pack(len(b)) + b


def _body_parts(f: Frame) -> list:
    if isinstance(f, (Register, Location)):
        return [_str16(f.name), _str16(f.host), _U16.pack(f.port)]
    if isinstance(f, RegisterAck):
        return [bytes([1 if f.ok else 0])]
    if isinstance(f, (Lookup, Deregister)):
        return [_str16(f.name)]
    if isinstance(f, Abort):
        return [_str16(f.reason)]
    if isinstance(f, Fin):
        return []
    if isinstance(f, Data):
        head = b"".join(
            [
                _str16(f.src.instance),
                _str16(f.src.port),
                _str16(f.dst.instance),
                _str16(f.dst.port),
                _F64.pack(f.timestamp),
            ]
        )
        parts, _ = _payload_parts(f.payload)
        return [head, *parts]
    raise TypeError(f"not a frame: {f!r}")


def encode_frame(f: Frame) -> bytes:
    parts = _body_parts(f)
    body_len = sum(len(memoryview(p)) for p in parts)
    if body_len > MAX_SIZE:
        raise TooLarge(f"frame body of {body_len} bytes exceeds 1 GiB")
    return b"".join([HEADER.pack(MAGIC, f.opcode, body_len), *parts])


class _Reader:
    def __init__(self, mv: memoryview):
        self.mv = mv
        self.off = 0

    def take(self, n: int) -> memoryview:
        if self.off + n > len(self.mv):
            raise Malformed("truncated frame body")
        out = self.mv[self.off : self.off + n]
        self.off += n
        return out

    def u16(self) -> int:
        return _U16.unpack(self.take(2))[0]

    def str16(self) -> str:
        n = self.u16()
        try:
            return str(self.take(n), "utf-8")
        except UnicodeDecodeError:
            raise Malformed("invalid UTF-8 in string field") from None

    def end(self) -> None:
        if self.off != len(self.mv):
            raise Malformed("trailing bytes in frame body")


def decode_body(opcode: int, body) -> Frame:
    """Decode a frame body for ``opcode``; the body must be consumed exactly."""
    try:
        op = Opcode(opcode)
    except ValueError:
        raise UnknownOpcode(f"opcode {opcode:#04x}") from None
    r = _Reader(memoryview(body).cast("B"))
    if op is Opcode.DATA:
        src = Endpoint(r.str16(), r.str16())
        dst = Endpoint(r.str16(), r.str16())
        (t,) = _F64.unpack(r.take(8))
        payload = decode_payload(r.mv[r.off :])
        return Data(src, dst, t, payload)
    if op in (Opcode.REGISTER, Opcode.LOCATION):
        name, host, port = r.str16(), r.str16(), r.u16()
        frame = Register(name, host, port) if op is Opcode.REGISTER else Location(name, host, port)
    elif op is Opcode.REGISTER_ACK:
        flag = r.take(1)[0]
        if flag not in (0, 1):
            raise Malformed("REGISTER_ACK flag must be 0 or 1")
        frame = RegisterAck(bool(flag))
    elif op is Opcode.LOOKUP:
        frame = Lookup(r.str16())
    elif op is Opcode.DEREGISTER:
        frame = Deregister(r.str16())
    elif op is Opcode.ABORT:
        frame = Abort(r.str16())
    else:
        frame = Fin()
    r.end()
    return frame


def parse_header(buf) -> tuple[int, int] | None:
    """Validate a (possibly partial) header; return (opcode, body_len) once complete."""
    n = min(len(buf), HEADER_SIZE)
    if bytes(buf[: min(n, 4)]) != MAGIC[: min(n, 4)]:
        raise BadMagic(f"bad magic {bytes(buf[: min(n, 4)])!r}")
    if n >= 5 and buf[4] not in Opcode._value2member_map_:
        raise UnknownOpcode(f"opcode {buf[4]:#04x}")
    if n < HEADER_SIZE:
        return None
    _, opcode, body_len = HEADER.unpack_from(bytes(buf[:HEADER_SIZE]))
    if body_len > MAX_SIZE:
        raise TooLarge(f"frame body of {body_len} bytes exceeds 1 GiB")
    return opcode, body_len


def decode_frame(buf) -> tuple[Frame, int] | None:
    """Decode one frame from the front of ``buf``.

    Returns ``(frame, consumed)`` or ``None`` when more bytes are needed;
    nothing is consumed in that case.
    """
    head = parse_header(buf)
    if head is None:
        return None
    opcode, body_len = head
    total = HEADER_SIZE + body_len
    if len(buf) < total:
        return None
    return decode_body(opcode, memoryview(buf)[HEADER_SIZE:total]), total


class FrameDecoder:
    """Incremental decoder: feed bytes in any chunking, pull whole frames out."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data) -> None:
        self._buf += data

    def __len__(self) -> int:
        return len(self._buf)

    def next_raw(self) -> tuple[int, bytes] | None:
        """Return ``(opcode, frame_bytes)`` for the next whole frame, body undecoded."""
        head = parse_header(self._buf)
        if head is None:
            return None
        total = HEADER_SIZE + head[1]
        if len(self._buf) < total:
            return None
        raw = bytes(self._buf[:total])
        del self._buf[:total]
        return head[0], raw

    def next_frame(self) -> Frame | None:
        head = parse_header(self._buf)
        if head is None:
            return None
        total = HEADER_SIZE + head[1]
        if len(self._buf) < total:
            return None
        body = bytearray(self._buf[HEADER_SIZE:total])
        del self._buf[:total]
        return decode_body(head[0], body)

    def frames(self) -> Iterable[Frame]:
        while True:
            f = self.next_frame()
            if f is None:
                return
            yield f
