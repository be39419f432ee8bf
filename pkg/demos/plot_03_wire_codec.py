"""
What actually goes over the wire
================================

Indices are bit-packed least-significant bit first and wrapped in a small
length-prefixed frame.  At two bits per element the frame is about 8x
smaller than sending the same tensor as FP16.
"""

import numpy as np

from splitquant import codec

###############################################################################
# Four 2-bit indices fill exactly one byte: 1 | 0<<2 | 3<<4 | 2<<6 = 0xb1
p = codec.pack([1, 0, 3, 2], 2)
print("packed:", p.data.hex(), "->", codec.unpack(p))

###############################################################################
# A frame: b"SQ", version, type, body length, body
hello = codec.encode_frame(codec.Hello(K=4, shape=(2, 3)))
print("hello frame:", hello.hex())
print("decoded:   ", codec.decode_frame(hello))

###############################################################################
# One image worth of patch features, 729 tokens of 512 dims
shape = (729, 512)
idx = np.random.default_rng(0).integers(0, 4, 729 * 512)
frame = codec.encode_frame(codec.Features(1, 4, shape, codec.pack(idx, 2)))
print(f"fp16 {codec.fp16_bytes(shape)} bytes, frame {len(frame)} bytes, "
      f"ratio {codec.measured_ratio(codec.fp16_bytes(shape), len(frame)):.4f}")

###############################################################################
# Corrupted input is rejected, never half-decoded
try:
    codec.decode_frame(b"XX" + hello[2:])
except codec.FrameError as exc:
    print("rejected:", exc)
