import math
import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splitquant.codec import (
    HEADER_SIZE,
    Error,
    Features,
    FrameError,
    FrameType,
    Hello,
    Method,
    PackedIndices,
    Raw16,
    Response,
    TopK,
    compression_rate,
    decode_frame,
    encode_frame,
    fp16_bytes,
    measured_ratio,
    pack,
    packed_size,
    parse_header,
    read_frame,
    unpack,
)

FIXTURES = Path(__file__).parent / "fixtures"


def _ref_pack(values, width):
    """Big-integer oracle: value i occupies bits [i*width, (i+1)*width)."""
    acc = sum(int(v) << (width * i) for i, v in enumerate(values))
    return acc.to_bytes(packed_size(len(values), width), "little")


class TestPack:
    def test_two_bit_example(self):
        assert pack([1, 0, 3, 2], 2).data == b"\xb1"

    def test_one_bit_ones(self):
        assert pack([1] * 8, 1).data == b"\xff"

    def test_out_of_range(self):
        with pytest.raises(ValueError, match="index 5 at position 0"):
            pack([5], 2)
        with pytest.raises(ValueError, match="position 2"):
            pack([0, 1, -1], 3)

    def test_unpack_example(self):
        np.testing.assert_array_equal(unpack(PackedIndices(2, 4, b"\xb1")), [1, 0, 3, 2])

    def test_truncated(self):
        with pytest.raises(ValueError, match="truncated payload"):
            unpack(PackedIndices(2, 5, b"\xb1"))

    def test_nonzero_padding_rejected(self):
        with pytest.raises(ValueError, match="padding"):
            unpack(PackedIndices(2, 3, b"\xff"))

    def test_width_bounds(self):
        with pytest.raises(ValueError):
            pack([0], 0)
        with pytest.raises(ValueError):
            pack([0], 9)

    @settings(max_examples=200)
    @given(st.integers(1, 8).flatmap(
        lambda w: st.tuples(st.just(w), st.lists(st.integers(0, (1 << w) - 1), max_size=200))))
    def test_roundtrip_and_size(self, case):
        w, values = case
        p = pack(values, w)
        assert len(p.data) == math.ceil(len(values) * w / 8)
        assert p.data == _ref_pack(values, w)
        np.testing.assert_array_equal(unpack(p), values)


GOLDEN = [
    (Hello(4, (2, 3)), "535101010d00000001000400020200000003000000"),
    (Error(1, "x"), "5351010403000000010078"),
    (Features(7, 4, (2, 3), pack([1, 0, 3, 2, 3, 3], 2)),
     "53510102160000000700000004000202000000030000000206000000b10f"),
    (Response(9, 0.5), "535101030d0000000900000001000000000000e03f"),
    (Raw16(2, np.array([1.0, -2.0], dtype=np.float16)),
     "535101060d000000020000000102000000003c00c0"),
]


class TestFrames:
    @pytest.mark.parametrize("frame, hexstr", GOLDEN)
    def test_golden_bytes(self, frame, hexstr):
        assert encode_frame(frame).hex() == hexstr
        assert decode_frame(bytes.fromhex(hexstr)) == frame

    @pytest.mark.parametrize("name, expected", [
        ("hello_k4", Hello(4, (2, 3))),
        ("features_k4", Features(7, 4, (2, 3), PackedIndices(2, 6, b"\xb1\x0f"))),
        ("error_shape", Error(4, "shape mismatch")),
    ])
    def test_fixture_files(self, name, expected):
        buf = (FIXTURES / f"{name}.bin").read_bytes()
        assert decode_frame(buf) == expected
        assert encode_frame(expected) == buf

    def test_response_tensor_roundtrip_bit_exact(self):
        arr = np.random.default_rng(0).standard_normal((3, 4))
        back = decode_frame(encode_frame(Response(1, arr)))
        assert back.result.tobytes() == arr.tobytes()

    def test_topk_roundtrip(self):
        f = TopK(3, (2, 10), 2, np.array([[0, 9], [4, 5]]),
                 np.array([[1.5, -2], [0.25, 3]], dtype=np.float16))
        assert decode_frame(encode_frame(f)) == f

    def test_header_errors(self):
        good = encode_frame(Error(1, "x"))
        with pytest.raises(FrameError, match="bad magic"):
            decode_frame(b"\x00\x00" + good[2:])
        with pytest.raises(FrameError, match="unsupported version"):
            decode_frame(good[:2] + b"\x02" + good[3:])
        with pytest.raises(FrameError, match="unknown frame type"):
            decode_frame(good[:3] + b"\x63" + good[4:])
        with pytest.raises(FrameError, match="length mismatch"):
            decode_frame(good + b"\x00")
        with pytest.raises(FrameError, match="length mismatch"):
            decode_frame(good[:5])

    def test_features_count_must_match_shape(self):
        bad = bytearray(bytes.fromhex(GOLDEN[2][1]))
        bad[HEADER_SIZE + 6 + 9 + 1] = 5   # count field
        with pytest.raises(FrameError, match="length mismatch"):
            decode_frame(bytes(bad))

    def test_stream_reader(self):
        stream = encode_frame(Hello(4, (1, 8))) + encode_frame(Error(2, "no"))
        pos = 0

        def recv(n):
            nonlocal pos
            out = stream[pos:pos + n]
            pos += n
            return out

        assert read_frame(recv) == Hello(4, (1, 8))
        assert read_frame(recv) == Error(2, "no")

    def test_parse_header(self):
        assert parse_header(bytes.fromhex("5351010203000000")) == (FrameType.FEATURES, 3)

    @settings(max_examples=500)
    @given(st.binary(max_size=64))
    def test_fuzz_never_crashes(self, buf):
        try:
            decode_frame(buf)
        except FrameError:
            pass

    @settings(max_examples=300)
    @given(st.binary(max_size=48), st.sampled_from(list(FrameType)))
    def test_fuzz_valid_header_random_body(self, body, ftype):
        buf = b"SQ" + bytes([1, ftype]) + struct.pack("<I", len(body)) + body
        try:
            decode_frame(buf)
        except FrameError:
            pass

    @settings(max_examples=100)
    @given(st.lists(st.integers(0, 255), min_size=1, max_size=40), st.integers(0, 2**32 - 1))
    def test_features_roundtrip(self, idx, rid):
        f = Features(rid, 256, (len(idx),), pack(idx, 8))
        assert decode_frame(encode_frame(f)) == f


class TestAccounting:
    @pytest.mark.parametrize("method, n, dims, rate", [
        (Method.DISCRETE, 2, None, 8.0),
        (Method.DISCRETE, 4, None, 4.0),
        ("discrete", 16, None, 1.0),
        (Method.TOPK, 64, 512, 8.0),
    ])
    def test_nominal(self, method, n, dims, rate):
        assert compression_rate(method, n, dims) == rate

    def test_zero_divisor(self):
        with pytest.raises(ValueError):
            compression_rate(Method.DISCRETE, 0)
        with pytest.raises(ValueError):
            compression_rate(Method.TOPK, 0, 512)

    def test_vit_sized_features(self):
        shape = (729, 512)
        f = Features(0, 4, shape, pack(np.zeros(729 * 512, dtype=int), 2))
        frame = encode_frame(f)
        assert len(f.packed.data) == 93_312
        assert fp16_bytes(shape) == 746_496
        assert measured_ratio(fp16_bytes(shape), len(frame)) >= 7.9

    def test_tiny_tensor_pays_for_header(self):
        frame = encode_frame(Features(0, 4, (4,), pack([0, 1, 2, 3], 2)))
        assert measured_ratio(fp16_bytes((4,)), len(frame)) < 8

    def test_raw16_ratio_near_one(self):
        frame = encode_frame(Raw16(0, np.zeros((729, 512), dtype=np.float16)))
        assert measured_ratio(fp16_bytes((729, 512)), len(frame)) == pytest.approx(1.0, abs=1e-3)

    @pytest.mark.parametrize("b", [1, 2, 4, 8])
    def test_ratio_converges_at_scale(self, b):
        n = 100_000
        frame = encode_frame(Features(0, 2 ** b, (n,), pack(np.zeros(n, dtype=int), b)))
        assert measured_ratio(fp16_bytes((n,)), len(frame)) == pytest.approx(16 / b, rel=0.01)
