"""Differential entropy of activations and the bit width it implies.

Densities are estimated with a Gaussian kernel and Scott's-rule bandwidth,
evaluated exactly (no binning) on a uniform grid covering the samples plus
five bandwidths on either side.  Entropy is the trapezoidal integral of
``-p log2 p`` over that grid, and the recommended code width is the smallest
integer number of bits not below it.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .quantizer import Scaling, scale

DEFAULT_GRID_POINTS = 4096
SUPPORT_BANDWIDTHS = 5.0
SCOTT_FACTOR = (4.0 / 3.0) ** 0.2
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
# kernel evaluations per chunk; bounds peak memory at ~32 MB of float64
_CHUNK = 1 << 22


class Distribution(enum.Enum):
    NORMAL = "normal"
    UNIFORM = "uniform"


ANALYTIC_ENTROPY_BITS = {
    # standard normal and uniform(-1, 1)
    Distribution.NORMAL: 0.5 * math.log2(2 * math.pi * math.e),
    Distribution.UNIFORM: 1.0,
}


@dataclass(frozen=True)
class DensityEstimate:
    grid: np.ndarray = field(repr=False)
    density: np.ndarray = field(repr=False)

    def mass(self) -> float:
        return float(np.trapezoid(self.density, self.grid))


@dataclass(frozen=True)
class EntropyReport:
    bandwidth: float
    sample_count: int
    sample_std: float
    grid_lo: float
    grid_hi: float
    grid_points: int
    entropy_bits: float
    recommended_bits: int
    density: DensityEstimate | None = field(default=None, repr=False, compare=False)

    def to_text(self) -> str:
        lines = [
            f"bandwidth={self.bandwidth:.6f}",
            f"sample_count={self.sample_count}",
            f"sample_std={self.sample_std:.6f}",
            f"grid_lo={self.grid_lo:.6f}",
            f"grid_hi={self.grid_hi:.6f}",
            f"grid_points={self.grid_points}",
            f"entropy_bits={self.entropy_bits:.6f}",
            f"recommended_bits={self.recommended_bits}",
        ]
        return "\n".join(lines) + "\n"


def _as_samples(samples) -> np.ndarray:
    x = np.asarray(samples, dtype=np.float64).reshape(-1)
    if x.size < 2:
        raise ValueError(f"need at least 2 samples, got {x.size}")
    if not np.all(np.isfinite(x)):
        raise ValueError("samples contain NaN or Inf")
    return x


def scott_bandwidth(samples) -> float:
    x = _as_samples(samples)
    sigma = float(x.std())
    if sigma == 0.0 or x.min() == x.max():
        raise ValueError("degenerate sample (constant)")
    return SCOTT_FACTOR * sigma * x.size ** -0.2


def kde_density(samples, h: float, grid_points: int = DEFAULT_GRID_POINTS) -> DensityEstimate:
    if not h > 0:
        raise ValueError(f"bandwidth must be > 0, got {h}")
    if grid_points < 64:
        raise ValueError(f"grid_points must be >= 64, got {grid_points}")
    x = np.asarray(samples, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise ValueError("empty input")
    grid = np.linspace(x.min() - SUPPORT_BANDWIDTHS * h, x.max() + SUPPORT_BANDWIDTHS * h, grid_points)
    density = np.zeros(grid_points)
    step = max(1, _CHUNK // grid_points)
    scaled_grid = grid / h
    scaled_x = x / h
    buf = np.empty((grid_points, min(step, x.size)))
    for start in range(0, x.size, step):
        chunk = scaled_x[start:start + step]
        u = buf[:, :chunk.size]
        np.subtract.outer(scaled_grid, chunk, out=u)
        np.square(u, out=u)
        u *= -0.5
        np.exp(u, out=u)
        density += u.sum(axis=1)
    density *= _INV_SQRT_2PI / (x.size * h)
    return DensityEstimate(grid=grid, density=density)


def entropy_bits(d: DensityEstimate) -> float:
    p = d.density
    integrand = np.zeros_like(p)
    pos = p > 0
    integrand[pos] = -p[pos] * np.log2(p[pos])
    return float(np.trapezoid(integrand, d.grid))


def bits_for_entropy(h_bits: float) -> int:
    """Smallest integer width ``b >= h_bits``, never below one bit."""
    return max(1, math.ceil(h_bits))


def recommend_bits(samples, grid_points: int = DEFAULT_GRID_POINTS) -> EntropyReport:
    x = _as_samples(samples)
    h = scott_bandwidth(x)
    d = kde_density(x, h, grid_points)
    hb = entropy_bits(d)
    return EntropyReport(
        bandwidth=h,
        sample_count=int(x.size),
        sample_std=float(x.std()),
        grid_lo=float(d.grid[0]),
        grid_hi=float(d.grid[-1]),
        grid_points=grid_points,
        entropy_bits=hb,
        recommended_bits=bits_for_entropy(hb),
        density=d,
    )


def feature_entropy(features, *, tap: str = "raw", scaling: Scaling = Scaling.CLIPPED_LINEAR,
                    per_dimension: bool = False, grid_points: int = DEFAULT_GRID_POINTS):
    """Entropy report for a batch of activations.

    ``tap="raw"`` measures the activations as given; ``tap="scaled"`` measures
    the values the quantizer actually rounds (after ``scaling``).  Scaled
    values live in [-1, 1], so their entropy never exceeds one bit.  By default
    every element of the batch is pooled into one 1-D sample; with
    ``per_dimension=True`` a list with one report per feature (last axis) is
    returned instead.
    """
    x = np.asarray(features, dtype=np.float64)
    if tap == "scaled":
        x = scale(x, scaling)
    elif tap != "raw":
        raise ValueError(f"unknown tap point {tap!r}")
    if not per_dimension:
        return recommend_bits(x, grid_points)
    cols = x.reshape(-1, x.shape[-1])
    return [recommend_bits(cols[:, j], grid_points) for j in range(cols.shape[1])]


def _draw(dist: Distribution, n: int, rng: np.random.Generator) -> np.ndarray:
    if dist is Distribution.NORMAL:
        return rng.standard_normal(n)
    return rng.uniform(-1.0, 1.0, n)


def convergence_probe(distribution, sizes, trials: int = 5, seed: int = 0,
                      grid_points: int = DEFAULT_GRID_POINTS) -> list[tuple[int, float]]:
    """Mean absolute entropy error against the analytic value, per sample size."""
    dist = Distribution(distribution)
    sizes = [int(n) for n in sizes]
    if sizes != sorted(sizes):
        raise ValueError("sizes must be ascending")
    if trials < 3:
        raise ValueError("trials must be >= 3")
    truth = ANALYTIC_ENTROPY_BITS[dist]
    # one independent stream per (size, trial), so results do not depend on order
    streams = np.random.SeedSequence(seed).spawn(len(sizes) * trials)
    out = []
    for i, n in enumerate(sizes):
        errs = []
        for j in range(trials):
            rng = np.random.default_rng(streams[i * trials + j])
            x = _draw(dist, n, rng)
            d = kde_density(x, scott_bandwidth(x), grid_points)
            errs.append(abs(entropy_bits(d) - truth))
        out.append((n, float(np.mean(errs))))
    return out
