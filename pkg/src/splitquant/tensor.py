"""Dense feature tensors and the batch statistics the quantizer relies on.

Feature tensors are plain ``numpy`` arrays of rank 1 to 3, laid out as
``(batch, tokens, dims)`` when all three axes are present.  This module
validates them, computes population statistics, clips, and reads/writes the
binary fixture format used by the CLI and the test-suite::

    u32 rank | u32 dims[rank] | float32 data (row-major)

All integers and floats are little-endian.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAX_RANK = 3


@dataclass(frozen=True)
class TensorStats:
    mean: float
    std: float
    min: float
    max: float
    count: int


def as_features(x, *, name: str = "input") -> np.ndarray:
    """Validate ``x`` as a feature tensor and return it as a float64 array."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.size == 0:
        raise ValueError(f"empty input: {name} has no elements")
    if arr.ndim > MAX_RANK:
        raise ValueError(f"{name} has rank {arr.ndim}; at most {MAX_RANK} dims are supported")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or Inf")
    return arr


def stats(t) -> TensorStats:
    """Population statistics (divisor n) over every element of ``t``."""
    arr = as_features(t)
    lo = float(arr.min())
    hi = float(arr.max())
    # the mean of a constant array can drift by an ulp; pin it inside [lo, hi]
    mean = min(max(float(arr.mean()), lo), hi)
    if lo == hi:
        std = 0.0
    else:
        # normalise first so squaring tiny or huge values cannot under/overflow
        mag = max(abs(lo), abs(hi))
        std = mag * float((arr / mag).std())
    return TensorStats(mean=mean, std=std, min=lo, max=hi, count=int(arr.size))


def clip(t, lo: float, hi: float) -> np.ndarray:
    if lo > hi:
        raise ValueError(f"invalid bound: lo={lo} > hi={hi}")
    return np.clip(as_features(t), lo, hi)


def clip_sigma(t, n_sigma: float = 3.0) -> np.ndarray:
    """Clip ``t`` to ``[mean - n_sigma*std, mean + n_sigma*std]``."""
    s = stats(t)
    return clip(t, s.mean - n_sigma * s.std, s.mean + n_sigma * s.std)


# -- fixture format ---------------------------------------------------------

def tensor_to_bytes(t) -> bytes:
    arr = as_features(t)
    head = struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    return head + arr.astype("<f4").tobytes()


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < 4:
        raise ValueError("truncated tensor fixture")
    (rank,) = struct.unpack_from("<I", buf, 0)
    if not 1 <= rank <= MAX_RANK:
        raise ValueError(f"unsupported tensor rank {rank}")
    if len(buf) < 4 + 4 * rank:
        raise ValueError("truncated tensor fixture")
    shape = struct.unpack_from(f"<{rank}I", buf, 4)
    if any(d == 0 for d in shape):
        raise ValueError("tensor fixture has a zero-sized dimension")
    offset = 4 + 4 * rank
    n = int(np.prod(shape))
    if len(buf) - offset != 4 * n:
        raise ValueError(f"tensor fixture payload is {len(buf) - offset} bytes, expected {4 * n}")
    data = np.frombuffer(buf, dtype="<f4", count=n, offset=offset)
    return data.astype(np.float64).reshape(shape)


def save_tensor(path, t) -> None:
    Path(path).write_bytes(tensor_to_bytes(t))


def load_tensor(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())


def load_csv(path) -> np.ndarray:
    """Read a small tensor from CSV: one row per line, comma separated (rank <= 2)."""
    text = Path(path).read_text()
    arr = np.loadtxt(io.StringIO(text), delimiter=",", ndmin=2, dtype=np.float64)
    if arr.shape[0] == 1:
        arr = arr[0]
    return as_features(arr)


def save_csv(path, t) -> None:
    arr = as_features(t)
    if arr.ndim > 2:
        arr = arr.reshape(-1, arr.shape[-1])
    np.savetxt(path, np.atleast_2d(arr), delimiter=",", fmt="%.9g")
