"""Seeded random streams, Laplace sampling and small dense-matrix helpers.

Every random quantity in a simulation is drawn from its own stream, keyed by
``(seed, stream_id)``.  Stream ids are derived by hashing a purpose tag and
the ids of the client or edge involved, so switching the aggregation rule
never shifts the draws used for model initialisation or batch sampling.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .exceptions import NumericError, ParameterError

_UINT64_MASK = (1 << 64) - 1
# Half a ULP of the [0, 1) grid used by numpy's double generator.
_HALF_STEP = 2.0**-54


def stream_id(purpose: str, *ids: int) -> int:
    """Stable 64-bit stream id for ``purpose`` and an optional id tuple."""
    key = purpose + ":" + ",".join(str(int(i)) for i in ids)
    digest = hashlib.blake2b(key.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class SeededRng:
    """A reproducible random stream identified by ``(seed, stream)``.

    Two instances with the same pair produce the same sequence; different
    stream ids give independent streams (numpy ``SeedSequence`` spawn keys).
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _UINT64_MASK
        self.stream = int(stream) & _UINT64_MASK
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream,))
        self._gen = np.random.Generator(np.random.PCG64(ss))

    @classmethod
    def for_purpose(cls, seed: int, purpose: str, *ids: int) -> "SeededRng":
        return cls(seed, stream_id(purpose, *ids))

    @property
    def generator(self) -> np.random.Generator:
        """Underlying numpy generator; draws from it advance this stream."""
        return self._gen

    def centered_uniform(self, size=None):
        """Uniform draws strictly inside (-1/2, 1/2), one double per value."""
        return self._gen.random(size) + _HALF_STEP - 0.5

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, size=None):
        return self._gen.standard_normal(size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def dirichlet(self, alpha) -> np.ndarray:
        return self._gen.dirichlet(alpha)

    def __repr__(self):
        return f"SeededRng(seed={self.seed}, stream={self.stream})"


@dataclass(frozen=True)
class LaplaceSpec:
    """Zero-location Laplace distribution with per-coordinate scale."""

    scale: float

    def __post_init__(self):
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ParameterError(f"Laplace scale must be positive, got {self.scale!r}")


def laplace_from_uniform(u, scale: float):
    """Inverse CDF of Laplace(0, scale) applied to ``u`` in (-1/2, 1/2)."""
    u = np.asarray(u, dtype=np.float64)
    return -scale * np.sign(u) * np.log1p(-2.0 * np.abs(u))


def laplace_sample(rng: SeededRng, spec: LaplaceSpec) -> float:
    return float(laplace_from_uniform(rng.centered_uniform(), spec.scale))


def laplace_vector(rng: SeededRng, dim: int, spec: LaplaceSpec) -> np.ndarray:
    """``dim`` i.i.d. Laplace draws; consumes exactly ``dim`` uniforms."""
    if int(dim) < 1:
        raise ParameterError(f"dim must be >= 1, got {dim}")
    return laplace_from_uniform(rng.centered_uniform(int(dim)), spec.scale)


def as_matrix(a) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ParameterError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def mat_mul(a, b) -> np.ndarray:
    a, b = as_matrix(a), as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ParameterError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def mat_pow(w, t: int) -> np.ndarray:
    """``w`` raised to the non-negative integer power ``t`` by repeated products.

    Powers are built as ``w @ (w @ ...)`` rather than by squaring so that the
    result matches an explicit round-by-round application of ``w``.
    """
    w = as_matrix(w)
    if w.shape[0] != w.shape[1]:
        raise ParameterError(f"mat_pow needs a square matrix, got {w.shape}")
    if int(t) < 0:
        raise ParameterError(f"power must be non-negative, got {t}")
    out = np.eye(w.shape[0])
    for _ in range(int(t)):
        out = w @ out
    return out


def check_finite(x, what: str = "value") -> np.ndarray:
    arr = np.asarray(x)
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite entries in {what}")
    return arr


def finite_diff_gradient(
    f: Callable[[np.ndarray], float], x, h: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of the scalar function ``f`` at ``x``.

    Works for arrays of any shape; the result has the shape of ``x``.
    """
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    flat_x = x.reshape(-1)
    flat_g = grad.reshape(-1)
    for k in range(flat_x.size):
        orig = flat_x[k]
        flat_x[k] = orig + h
        fp = f(x)
        flat_x[k] = orig - h
        fm = f(x)
        flat_x[k] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value near coordinate {k}")
        flat_g[k] = (fp - fm) / (2.0 * h)
    return grad
