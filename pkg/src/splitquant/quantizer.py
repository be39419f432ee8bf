"""Finite scalar quantization of feature tensors.

The client side scales a tensor into ``[-1, 1]``, rounds each element onto a
``K``-level lattice that is symmetric around zero and emits integer indices in
``{0, ..., K-1}``.  The server side maps the indices back onto ``[-1, 1]``
knowing only ``K``.

Two scaling modes are supported:

* ``TANH`` squashes elementwise with ``tanh``.
* ``CLIPPED_LINEAR`` clips to ``mean +/- 3*std`` (statistics over the whole
  tensor) and then maps the clipped range affinely onto ``[-1, 1]``.  This
  keeps far more of the levels occupied on heavy-tailed activations.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .tensor import as_features, stats

DEFAULT_ALPHA = 0.25


class Scaling(enum.Enum):
    TANH = "tanh"
    CLIPPED_LINEAR = "linear"


class CommitmentForm(enum.Enum):
    COSINE = "cosine"
    SQUARED = "squared"


@dataclass(frozen=True)
class QuantizerConfig:
    K: int
    scaling: Scaling = Scaling.CLIPPED_LINEAR
    commitment_form: CommitmentForm = CommitmentForm.COSINE
    alpha: float = DEFAULT_ALPHA

    def __post_init__(self):
        if int(self.K) != self.K or self.K < 2:
            raise ValueError(f"K must be an integer >= 2, got {self.K}")
        if not self.alpha >= 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        object.__setattr__(self, "scaling", Scaling(self.scaling))
        object.__setattr__(self, "commitment_form", CommitmentForm(self.commitment_form))

    @property
    def half_width(self) -> float:
        return (self.K - 1) / 2


@dataclass(frozen=True)
class QuantizedBlock:
    K: int
    shape: tuple[int, ...]
    indices: np.ndarray = field(repr=False)

    def __post_init__(self):
        idx = np.asarray(self.indices)
        object.__setattr__(self, "shape", tuple(int(d) for d in self.shape))
        object.__setattr__(self, "indices", idx.reshape(-1))
        if idx.size != int(np.prod(self.shape)):
            raise ValueError(f"block has {idx.size} indices for shape {self.shape}")

    def __eq__(self, other):
        if not isinstance(other, QuantizedBlock):
            return NotImplemented
        return (self.K == other.K and self.shape == other.shape
                and np.array_equal(self.indices, other.indices))


@dataclass(frozen=True)
class QuantizeOutput:
    block: QuantizedBlock
    reconstructed: np.ndarray
    commit_loss: float
    scaled: np.ndarray
    levels: np.ndarray


@dataclass(frozen=True)
class LinearScale:
    """Affine map ``e = slope * clip(x, lo, hi) + offset`` fixed by one forward pass."""

    lo: float
    hi: float
    slope: float
    offset: float

    def apply(self, x: np.ndarray) -> np.ndarray:
        return np.clip(self.slope * np.clip(x, self.lo, self.hi) + self.offset, -1.0, 1.0)


def fit_linear_scale(t) -> LinearScale:
    arr = as_features(t)
    s = stats(arr)
    lo, hi = s.mean - 3 * s.std, s.mean + 3 * s.std
    clipped = np.clip(arr, lo, hi)
    cmin, cmax = float(clipped.min()), float(clipped.max())
    if cmax == cmin:
        return LinearScale(lo=lo, hi=hi, slope=0.0, offset=0.0)
    slope = 2.0 / (cmax - cmin)
    return LinearScale(lo=lo, hi=hi, slope=slope, offset=-1.0 - slope * cmin)


def scale_linear(t) -> np.ndarray:
    arr = as_features(t)
    s = stats(arr)
    clipped = np.clip(arr, s.mean - 3 * s.std, s.mean + 3 * s.std)
    cmin, cmax = clipped.min(), clipped.max()
    if cmax == cmin:
        return np.zeros_like(arr)
    # written as a ratio so the extremes land on -1 and +1 exactly
    return np.clip(2.0 * (clipped - cmin) / (cmax - cmin) - 1.0, -1.0, 1.0)


def scale_tanh(t) -> np.ndarray:
    return np.tanh(as_features(t))


def scale(t, mode: Scaling) -> np.ndarray:
    if Scaling(mode) is Scaling.TANH:
        return scale_tanh(t)
    return scale_linear(t)


def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _check_K(K):
    if int(K) != K or K < 2:
        raise ValueError(f"K must be an integer >= 2, got {K}")


def round_levels(e, K: int) -> np.ndarray:
    """Round scaled values onto the symmetric K-level lattice (returns ``z``)."""
    _check_K(K)
    e = np.asarray(e, dtype=np.float64)
    if e.size and (np.nanmax(np.abs(e)) > 1.0 or not np.all(np.isfinite(e))):
        raise ValueError("round_levels expects values in [-1, 1]")
    h = (K - 1) / 2
    if K % 2:
        return round_half_away(h * e)
    return round_half_away(h * e - 0.5) + 0.5


def levels_to_indices(z, K: int) -> np.ndarray:
    return np.rint(np.asarray(z) + (K - 1) / 2).astype(np.int64)


def indices_to_values(indices, K: int) -> np.ndarray:
    h = (K - 1) / 2
    return (np.asarray(indices, dtype=np.float64) - h) / h


def commitment_loss(e, z, K: int, form: CommitmentForm = CommitmentForm.COSINE) -> float:
    """Unweighted commitment loss between ``(K-1)/2 * e`` and the levels ``z``.

    ``z`` is a constant here; see :func:`commitment_grad` for d(loss)/d(e).
    """
    a = (K - 1) / 2 * np.asarray(e, dtype=np.float64).reshape(-1)
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    if CommitmentForm(form) is CommitmentForm.SQUARED:
        return float(np.mean((a - z) ** 2))
    na, nz = np.linalg.norm(a), np.linalg.norm(z)
    if na == 0.0 or nz == 0.0:
        return 0.0 if np.array_equal(a, z) else 1.0
    cos = float(a @ z) / (na * nz)
    return max(0.0, 1.0 - min(cos, 1.0))


def commitment_grad(e, z, K: int, form: CommitmentForm = CommitmentForm.COSINE) -> np.ndarray:
    e = np.asarray(e, dtype=np.float64)
    h = (K - 1) / 2
    a = h * e.reshape(-1)
    zf = np.asarray(z, dtype=np.float64).reshape(-1)
    if CommitmentForm(form) is CommitmentForm.SQUARED:
        grad_a = 2.0 * (a - zf) / a.size
    else:
        na, nz = np.linalg.norm(a), np.linalg.norm(zf)
        if na == 0.0 or nz == 0.0:
            grad_a = np.zeros_like(a)
        else:
            grad_a = -(zf / (na * nz) - (a @ zf) * a / (na ** 3 * nz))
    return (h * grad_a).reshape(e.shape)


def quantize(t, cfg: QuantizerConfig) -> QuantizeOutput:
    arr = as_features(t)
    e = scale(arr, cfg.scaling)
    z = round_levels(e, cfg.K)
    indices = levels_to_indices(z, cfg.K)
    block = QuantizedBlock(K=cfg.K, shape=arr.shape, indices=indices)
    return QuantizeOutput(
        block=block,
        reconstructed=indices_to_values(indices, cfg.K).reshape(arr.shape),
        commit_loss=commitment_loss(e, z, cfg.K, cfg.commitment_form),
        scaled=e,
        levels=z,
    )


def reconstruct(block: QuantizedBlock) -> np.ndarray:
    _check_K(block.K)
    idx = np.asarray(block.indices)
    if idx.size and (idx.min() < 0 or idx.max() >= block.K):
        bad = int(np.flatnonzero((idx < 0) | (idx >= block.K))[0])
        raise ValueError(f"corrupt block: index {int(idx[bad])} at position {bad} not in [0, {block.K})")
    return indices_to_values(idx, block.K).reshape(block.shape)


def index_entropy(indices, K: int) -> float:
    """Entropy in bits of the empirical index histogram (codebook utilization)."""
    counts = np.bincount(np.asarray(indices).reshape(-1), minlength=K).astype(np.float64)
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log2(p)).sum())
