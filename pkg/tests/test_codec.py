import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from couplet import codec
from couplet.codec import (
    Abort,
    Data,
    Deregister,
    Fin,
    FrameDecoder,
    Location,
    Lookup,
    Payload,
    PayloadType,
    Register,
    RegisterAck,
    decode_frame,
    decode_payload,
    encode_frame,
    encode_payload,
)
from couplet.errors import BadMagic, CodecError, Malformed, TooLarge, UnknownOpcode
from couplet.topology import Endpoint
from oracles import encode_payload_ref

H = bytes.fromhex


def test_f64_zero_layout():
    assert encode_payload(Payload.f64([0.0])) == H("01 0100000000000000 0000000000000000")


def test_empty_raw_layout():
    assert encode_payload(Payload.raw(b"")) == H("00 0000000000000000")


def test_bool_layout():
    assert encode_payload(Payload.bools([True, False])) == H("05 0200000000000000 01 00")


def test_string_layout():
    assert encode_payload(Payload.strings(["ab", "é"])) == H("06 0200000000000000 02000000 6162 02000000 c3a9")


def test_numeric_layouts_little_endian():
    assert encode_payload(Payload.i32([1, -1])) == H("03 0200000000000000 01000000 ffffffff")
    assert encode_payload(Payload.i64([258])) == H("04 0100000000000000 0201000000000000")
    assert encode_payload(Payload.f32([1.0])) == H("02 0100000000000000 0000803f")


def test_big_endian_arrays_are_encoded_by_value():
    arr = np.array([1.5, -2.0], dtype=">f8")
    assert encode_payload(Payload.of(arr)) == encode_payload(Payload.f64([1.5, -2.0]))


@pytest.mark.parametrize(
    "blob",
    [
        H("07 0000000000000000"),  # tag out of range
        H("01 0200000000000000 0000000000000000"),  # truncated elements
        H("01 0100000000000000 00000000000000"),  # short element
        H("01 00"),  # short header
        H("00 0200000000000000 aa"),  # raw count mismatch
        H("00 0000000000000000 aa"),  # trailing bytes
        H("05 0100000000000000 02"),  # bool not 0/1
        H("06 0100000000000000 02000000 c328"),  # invalid UTF-8
        H("06 0100000000000000 05000000 6162"),  # truncated string
        H("06 0000000000000000 00"),  # trailing after strings
        H("03 ffffffffffffffff"),  # absurd count
    ],
)
def test_malformed_payloads(blob):
    with pytest.raises(Malformed):
        decode_payload(blob)


def test_too_large_payload(monkeypatch):
    monkeypatch.setattr(codec, "MAX_SIZE", 64)
    encode_payload(Payload.raw(bytes(64 - 9)))
    with pytest.raises(TooLarge):
        encode_payload(Payload.raw(bytes(64 - 8)))
    with pytest.raises(TooLarge):
        encode_frame(Data(Endpoint("a", "b"), Endpoint("c", "d"), 0.0, Payload.raw(bytes(60))))


def test_fin_layout_and_decode():
    raw = encode_frame(Fin())
    assert raw == H("4D434632 08 00000000")
    assert decode_frame(raw) == (Fin(), 9)


def test_lookup_layout():
    assert encode_frame(Lookup("micro")) == b"MCF2" + H("03 07000000 0500") + b"micro"


def test_control_frame_layouts():
    assert encode_frame(RegisterAck(True)) == b"MCF2" + H("02 01000000 01")
    assert encode_frame(Register("a", "h", 513)) == b"MCF2" + H("01 08000000 0100") + b"a" + H("0100") + b"h" + H("0102")
    assert encode_frame(Location("a", "h", 1)) == b"MCF2" + H("04 08000000 0100") + b"a" + H("0100") + b"h" + H("0100")
    assert encode_frame(Deregister("xy")) == b"MCF2" + H("05 04000000 0200") + b"xy"
    assert encode_frame(Abort("")) == b"MCF2" + H("07 02000000 0000")


def test_data_layout():
    p = Payload.f64([2.5])
    f = Data(Endpoint("a", "o"), Endpoint("b", "i"), 3600.0, p)
    body = b"".join(struct.pack("<H", 1) + s for s in (b"a", b"o", b"b", b"i"))
    body += struct.pack("<d", 3600.0) + encode_payload_ref(1, [2.5])
    assert encode_frame(f) == b"MCF2" + struct.pack("<BI", 6, len(body)) + body
    frame, used = decode_frame(encode_frame(f))
    assert frame == f and used == len(body) + 9
    assert encode_frame(frame) == encode_frame(f)


def test_bad_magic_and_opcode():
    with pytest.raises(BadMagic):
        decode_frame(b"XXXX\x08\x00\x00\x00\x00")
    with pytest.raises(BadMagic):
        decode_frame(b"MX")  # detected before the header is complete
    with pytest.raises(UnknownOpcode):
        decode_frame(b"MCF2\x09")
    with pytest.raises(UnknownOpcode):
        decode_frame(b"MCF2\x00\x00\x00\x00\x00")


def test_oversized_header_rejected():
    with pytest.raises(TooLarge):
        decode_frame(b"MCF2\x06" + struct.pack("<I", (1 << 30) + 1))


@pytest.mark.parametrize(
    "raw",
    [
        b"MCF2\x08\x01\x00\x00\x00\x00",  # FIN with body
        b"MCF2\x02\x00\x00\x00\x00",  # ack without byte
        b"MCF2\x03\x03\x00\x00\x00\x05\x00a",  # str16 overruns body
        b"MCF2\x05\x03\x00\x00\x00\x01\x00\xff",  # bad UTF-8 name
        b"MCF2\x02\x01\x00\x00\x00\x02",  # ack byte not 0/1
    ],
)
def test_malformed_bodies(raw):
    with pytest.raises(Malformed):
        decode_frame(raw)


def test_partial_input_needs_more():
    raw = encode_frame(Lookup("micro"))
    for cut in range(len(raw)):
        assert decode_frame(raw[:cut]) is None


def test_split_at_every_byte_boundary():
    frames = [Fin(), Lookup("micro"), Data(Endpoint("a", "b"), Endpoint("c", "d"), 1.0, Payload.i32([1, 2, 3]))]
    stream = b"".join(encode_frame(f) for f in frames)
    for cut in range(len(stream) + 1):
        dec = FrameDecoder()
        dec.feed(stream[:cut])
        got = list(dec.frames())
        dec.feed(stream[cut:])
        got += list(dec.frames())
        assert got == frames
        assert len(dec) == 0


# --- properties -------------------------------------------------------------------

payloads = st.one_of(
    st.binary(max_size=256).map(Payload.raw),
    st.lists(st.floats(), max_size=64).map(Payload.f64),
    st.lists(st.floats(width=32), max_size=64).map(Payload.f32),
    st.lists(st.integers(-(2**31), 2**31 - 1), max_size=64).map(Payload.i32),
    st.lists(st.integers(-(2**63), 2**63 - 1), max_size=64).map(Payload.i64),
    st.lists(st.booleans(), max_size=64).map(Payload.bools),
    st.lists(st.text(max_size=10), max_size=16).map(Payload.strings),
)


def _ref_values(p):
    if p.type is PayloadType.RAW:
        return p.elements
    if p.type is PayloadType.STRING:
        return list(p.elements)
    return p.elements.tolist()


@given(payloads)
def test_payload_round_trip_and_layout(p):
    enc = encode_payload(p)
    assert enc == encode_payload(p.copy())  # deterministic
    assert enc == encode_payload_ref(int(p.type), _ref_values(p))
    assert decode_payload(enc) == p


tokens = st.text(max_size=12)
frames = st.one_of(
    st.builds(Register, tokens, tokens, st.integers(0, 65535)),
    st.builds(RegisterAck, st.booleans()),
    st.builds(Lookup, tokens),
    st.builds(Location, tokens, tokens, st.integers(0, 65535)),
    st.builds(Deregister, tokens),
    st.builds(Abort, tokens),
    st.just(Fin()),
    st.builds(
        Data,
        st.builds(Endpoint, tokens, tokens),
        st.builds(Endpoint, tokens, tokens),
        st.floats(min_value=0, allow_infinity=False, allow_nan=False),
        payloads,
    ),
)


@given(frames)
def test_frame_round_trip(f):
    raw = encode_frame(f)
    got, used = decode_frame(raw + b"MCF2")
    assert got == f and used == len(raw)
    assert encode_frame(got) == raw


@given(st.lists(frames, max_size=6), st.lists(st.integers(1, 64), min_size=1, max_size=20))
def test_any_chunking_decodes_same(fs, chunks):
    stream = b"".join(encode_frame(f) for f in fs)
    dec, got, pos, i = FrameDecoder(), [], 0, 0
    while pos < len(stream):
        n = chunks[i % len(chunks)]
        dec.feed(stream[pos : pos + n])
        pos += n
        i += 1
        got += list(dec.frames())
    assert got == fs


@given(st.binary(max_size=128))
def test_garbage_raises_codec_errors_only(blob):
    dec = FrameDecoder()
    dec.feed(blob)
    try:
        list(dec.frames())
    except CodecError:
        pass


def test_large_payloads_round_trip():
    for size in (0, 1, 1 << 10, 1 << 20, 16 << 20):
        rng = np.random.default_rng(size)
        p = Payload.f64(rng.standard_normal(size // 8))
        assert decode_payload(encode_payload(p)) == p
        r = Payload.raw(rng.integers(0, 256, size, dtype=np.uint8).tobytes())
        f = Data(Endpoint("a", "b"), Endpoint("c", "d"), 1.0, r)
        assert decode_frame(encode_frame(f))[0] == f


def test_payload_of_detection():
    assert Payload.of(b"x").type is PayloadType.RAW
    assert Payload.of("s").type is PayloadType.STRING
    assert Payload.of(3).type is PayloadType.I64
    assert Payload.of(True).type is PayloadType.BOOL
    assert Payload.of([1.0, 2]).type is PayloadType.F64
    assert Payload.of(np.zeros(2, np.int32)).type is PayloadType.I32
    assert Payload.of(np.zeros(2, np.float32)).type is PayloadType.F32
    with pytest.raises(TypeError):
        Payload.of(np.zeros(2, np.complex128))


def test_nan_payloads_compare_bitwise():
    assert Payload.f64([float("nan")]) == Payload.f64([float("nan")])
    assert Payload.f64([0.0]) != Payload.f64([-0.0])
