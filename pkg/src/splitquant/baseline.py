"""Random top-k sparsification, the comparison baseline.

Each vector keeps ``k`` of its ``dims`` entries.  Every slot holds one of the
``k`` largest-magnitude entries, except that with probability ``epsilon`` the
slot is handed to a uniformly drawn entry from outside the top-k instead,
which keeps some diversity in what reaches the server.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .codec import index_width

VALUE_BITS = 16


@dataclass(frozen=True)
class SparseFeatures:
    dims: int
    indices: np.ndarray = field(repr=False)
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        if idx.ndim != 1 or len(idx) != len(self.values):
            raise ValueError("indices and values must be 1-D and of equal length")
        if len(idx) > self.dims:
            raise ValueError(f"k={len(idx)} exceeds dims={self.dims}")
        if len(idx) and (np.any(np.diff(idx) <= 0) or idx[0] < 0 or idx[-1] >= self.dims):
            raise ValueError("indices must be strictly ascending and < dims")

    @property
    def k(self) -> int:
        return len(self.indices)

    def wire_bits(self) -> int:
        return self.k * (VALUE_BITS + index_width(self.dims))


def topk_indices(v, k: int) -> np.ndarray:
    """Indices of the ``k`` largest |v|, ties broken by lower index."""
    mag = np.abs(np.asarray(v, dtype=np.float64))
    return np.argsort(-mag, kind="stable")[:k]


def topk_sparsify(v, k: int, epsilon: float = 0.0, seed=0) -> SparseFeatures:
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    dims = v.size
    if not 1 <= k <= dims:
        raise ValueError(f"k must be in [1, {dims}], got {k}")
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon must be in [0, 1], got {epsilon}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    top = topk_indices(v, k)
    rest = np.setdiff1d(np.arange(dims), top, assume_unique=True)
    swap = rng.random(k) < epsilon
    # cannot replace more slots than there are distinct non-top-k entries
    n_swap = min(int(swap.sum()), rest.size)
    kept = top.copy()
    if n_swap:
        slots = np.flatnonzero(swap)[:n_swap]
        kept[slots] = rng.choice(rest, size=n_swap, replace=False)
    kept.sort()
    return SparseFeatures(dims=dims, indices=kept, values=v[kept].astype(np.float16))


def densify(s: SparseFeatures) -> np.ndarray:
    out = np.zeros(s.dims)
    out[s.indices] = s.values.astype(np.float64)
    return out


def sparsify_rows(x, k: int, epsilon: float = 0.0, seed=0) -> tuple[np.ndarray, np.ndarray]:
    """Sparsify every last-axis vector of ``x``; returns ``(indices, values)`` of shape (rows, k)."""
    x = np.asarray(x, dtype=np.float64)
    rows = x.reshape(-1, x.shape[-1])
    rng = np.random.default_rng(seed)
    idx = np.empty((rows.shape[0], k), dtype=np.int64)
    vals = np.empty((rows.shape[0], k), dtype=np.float16)
    for r, row in enumerate(rows):
        s = topk_sparsify(row, k, epsilon, rng)
        idx[r], vals[r] = s.indices, s.values
    return idx, vals


def densify_rows(indices, values, shape) -> np.ndarray:
    dims = shape[-1]
    out = np.zeros((len(indices), dims))
    np.put_along_axis(out, np.asarray(indices), np.asarray(values, dtype=np.float64), axis=1)
    return out.reshape(shape)
