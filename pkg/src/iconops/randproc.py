"""Deterministic pseudo-randomness and Gaussian-process sampling.

Reproducibility contract: all randomness in the package flows through
RngStream, which wraps the counter-based Philox 4x64 generator (fixed,
published constant set) keyed by (seed, stream_id). Uniform and Gaussian
variates are derived from the raw 64-bit integer output by fixed transforms:

    uniform  u = (raw >> 11) * 2^-53            in [0, 1)
    normal   Box-Muller on pairs (1-u1, u2):
             r = sqrt(-2 ln(1-u1)),  z0 = r cos(2 pi u2),  z1 = r sin(2 pi u2)

so the sequence depends only on the bit-generator layer, which numpy
guarantees stable across versions and platforms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.random import Philox

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _splitmix64(x: int) -> int:
    """One step of the splitmix64 mixer (Steele et al. constants)."""
    x = (x + _GOLDEN) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def mix_seed(base_seed: int, *indices: int) -> int:
    """Derive a child seed by chaining splitmix64 over the index path."""
    h = _splitmix64(base_seed & _MASK64)
    for v in indices:
        h = _splitmix64((h + (int(v) & _MASK64)) & _MASK64)
    return h


class RngStream:
    """A deterministic random stream identified by (seed, stream_id)."""

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        self._bits = Philox(key=(self.seed << 64) | self.stream_id)

    def raw(self, n: int) -> np.ndarray:
        """n raw 64-bit unsigned integers straight from the generator."""
        return self._bits.random_raw(n)

    def uniforms(self, n: int) -> np.ndarray:
        """n doubles uniform in [0, 1)."""
        return (self.raw(n) >> 11) * (2.0 ** -53)

    def uniform(self, lo: float, hi: float, n: int | None = None):
        u = self.uniforms(1 if n is None else n)
        out = lo + (hi - lo) * u
        return float(out[0]) if n is None else out

    def normals(self, n: int) -> np.ndarray:
        """n standard normal variates via Box-Muller (pairs; odd n truncates)."""
        m = (n + 1) // 2
        u = self.uniforms(2 * m)
        r = np.sqrt(-2.0 * np.log(1.0 - u[:m]))
        theta = 2.0 * np.pi * u[m:]
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])
        return z[:n]

    def integers(self, m: int, n: int | None = None):
        """Integers uniform in [0, m) by scaling (bias ~2^-53, negligible)."""
        u = self.uniforms(1 if n is None else n)
        out = np.minimum((u * m).astype(np.int64), m - 1)
        return int(out[0]) if n is None else out

    def shuffle_indices(self, m: int) -> np.ndarray:
        """A permutation of range(m) via Fisher-Yates on this stream."""
        idx = np.arange(m)
        for i in range(m - 1, 0, -1):
            j = self.integers(i + 1)
            idx[i], idx[j] = idx[j], idx[i]
        return idx


@dataclass(frozen=True)
class RbfKernelSpec:
    """Squared-exponential kernel k(p,q) = variance * exp(-|p-q|^2 / 2 l^2)."""

    length_scale: float
    variance: float

    def __post_init__(self):
        if not (self.length_scale > 0 and np.isfinite(self.length_scale)):
            raise ValueError(f"length_scale must be positive and finite, got {self.length_scale}")
        if not (self.variance > 0 and np.isfinite(self.variance)):
            raise ValueError(f"variance must be positive and finite, got {self.variance}")


class ConditioningError(RuntimeError):
    """Covariance factorization failed even after jitter escalation."""


GP_POINT_CAP = 4096

# Jitter escalation: start (1e-6 * variance unless given), then x10 at most
# three times before giving up.
_JITTER_ESCALATIONS = 3


def rbf_kernel(p, q, spec: RbfKernelSpec) -> float:
    """Kernel value between two coordinate tuples (1 to 3 coordinates)."""
    pa = np.asarray(p, dtype=np.float64).ravel()
    qa = np.asarray(q, dtype=np.float64).ravel()
    if pa.shape != qa.shape:
        raise ValueError(f"coordinate dimensionality mismatch: {pa.shape} vs {qa.shape}")
    d2 = float(np.sum((pa - qa) ** 2))
    return spec.variance * np.exp(-d2 / (2.0 * spec.length_scale ** 2))


def rbf_kernel_matrix(coords: np.ndarray, spec: RbfKernelSpec) -> np.ndarray:
    """Dense covariance matrix over rows of coords, shape (n, n)."""
    c = np.asarray(coords, dtype=np.float64)
    if c.ndim == 1:
        c = c.reshape(-1, 1)
    d2 = np.sum((c[:, None, :] - c[None, :, :]) ** 2, axis=-1)
    return spec.variance * np.exp(-d2 / (2.0 * spec.length_scale ** 2))


def gp_sample(coords, spec: RbfKernelSpec, rng: RngStream,
              jitter: float | None = None) -> np.ndarray:
    """Zero-mean GP draw at coords via Cholesky of K + jitter*I.

    Deterministic given rng; consumes exactly len(coords) normal variates.
    """
    c = np.asarray(coords, dtype=np.float64)
    if c.ndim == 1:
        c = c.reshape(-1, 1)
    n = c.shape[0]
    if n == 0:
        raise ValueError("gp_sample needs at least one coordinate")
    if n > GP_POINT_CAP:
        raise ValueError(f"gp_sample capped at {GP_POINT_CAP} points (dense covariance), got {n}")
    if jitter is None:
        jitter = 1e-6 * spec.variance
    if jitter < 0:
        raise ValueError(f"jitter must be >= 0, got {jitter}")
    K = rbf_kernel_matrix(c, spec)
    z = rng.normals(n)
    j = jitter
    for attempt in range(1 + _JITTER_ESCALATIONS):
        try:
            L = np.linalg.cholesky(K + j * np.eye(n))
            return L @ z
        except np.linalg.LinAlgError:
            j = (j * 10.0) if j > 0 else 1e-6 * spec.variance
    raise ConditioningError(
        f"covariance factorization failed for {n} points after jitter escalation to {j/10.0:g}; "
        "coordinates are likely duplicated or the kernel is too flat")
