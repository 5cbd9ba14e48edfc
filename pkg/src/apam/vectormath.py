"""Component-wise vector arithmetic, weighted norms, and box projection.

Vectors are 1-d float64 numpy arrays throughout. All functions are pure
(inputs are never mutated), so they are safe to call from any thread.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def as_vec(x) -> np.ndarray:
    """Coerce to a 1-d float64 array (no copy when already one)."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 1:
        raise ValueError(f"expected a 1-d vector, got shape {a.shape}")
    return a


def _check_same_length(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"vector length mismatch: {a.shape[0]} vs {b.shape[0]}")


def safe_div(a, b) -> np.ndarray:
    """Component-wise a / b with the convention 0/0 = 0.

    A nonzero numerator over a zero denominator is a hard error rather
    than +-inf: the optimizer never produces that combination when the
    zero-denominator freeze rule is applied, so hitting it means an
    upstream bug and should fail loudly.
    """
    a = as_vec(a)
    b = as_vec(b)
    _check_same_length(a, b)
    if np.any(b < 0.0):
        raise ValueError("safe_div divisor must be nonnegative")
    zero = b == 0.0
    if np.any(a[zero] != 0.0):
        i = int(np.flatnonzero(zero & (a != 0.0))[0])
        raise ZeroDivisionError(f"nonzero/zero at coordinate {i}: {a[i]!r}/0")
    out = np.zeros_like(a)
    np.divide(a, b, out=out, where=~zero)
    return out


def weighted_norm_sq(x, v) -> float:
    """sum_i v_i * x_i**2 (the squared v-weighted norm), v >= 0."""
    x = as_vec(x)
    v = as_vec(v)
    _check_same_length(x, v)
    if np.any(v < 0.0):
        raise ValueError("weights must be nonnegative")
    return float(np.sum(v * x * x))


def hadamard(a, b) -> np.ndarray:
    """Component-wise product."""
    a = as_vec(a)
    b = as_vec(b)
    _check_same_length(a, b)
    return a * b


def sqrt_vec(v) -> np.ndarray:
    """Component-wise square root; negative entries are an error."""
    v = as_vec(v)
    if np.any(v < 0.0):
        raise ValueError("sqrt_vec requires nonnegative input")
    return np.sqrt(v)


def max_vec(a, b) -> np.ndarray:
    """Component-wise maximum."""
    a = as_vec(a)
    b = as_vec(b)
    _check_same_length(a, b)
    return np.maximum(a, b)


def axpy(alpha: float, a, b) -> np.ndarray:
    """alpha * a + b."""
    a = as_vec(a)
    b = as_vec(b)
    _check_same_length(a, b)
    return alpha * a + b


@dataclass(frozen=True)
class BoxConstraint:
    """Per-coordinate interval constraint; +-inf entries mean unconstrained."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = as_vec(self.lower)
        up = as_vec(self.upper)
        _check_same_length(lo, up)
        if np.any(np.isnan(lo)) or np.any(np.isnan(up)):
            raise ValueError("box bounds must not be NaN")
        if np.any(lo > up):
            raise ValueError("box requires lower <= upper in every coordinate")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", up)

    @classmethod
    def unbounded(cls, n: int) -> "BoxConstraint":
        return cls(np.full(n, -np.inf), np.full(n, np.inf))

    @classmethod
    def cube(cls, n: int, lo: float, up: float) -> "BoxConstraint":
        return cls(np.full(n, float(lo)), np.full(n, float(up)))

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    def is_bounded(self) -> bool:
        return bool(np.all(np.isfinite(self.lower)) and np.all(np.isfinite(self.upper)))

    def contains(self, x, tol: float = 0.0) -> bool:
        x = as_vec(x)
        return bool(np.all(x >= self.lower - tol) and np.all(x <= self.upper + tol))

    def diameter_inf(self) -> float:
        """max_i (upper_i - lower_i); inf if the box is unbounded."""
        return float(np.max(self.upper - self.lower))


def project_box(x, box: BoxConstraint) -> np.ndarray:
    """Clamp x into the box coordinate-wise (identity for interior points)."""
    x = as_vec(x)
    _check_same_length(x, box.lower)
    return np.minimum(np.maximum(x, box.lower), box.upper)


@dataclass(frozen=True)
class SparseVec:
    """Sparse vector: strictly increasing 0-based indices, no stored zeros."""

    indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        val = as_vec(self.values)
        if idx.ndim != 1 or idx.shape != val.shape:
            raise ValueError("indices and values must be 1-d and the same length")
        if idx.size and (np.any(idx < 0) or np.any(np.diff(idx) <= 0)):
            raise ValueError("indices must be nonnegative and strictly increasing")
        if np.any(val == 0.0):
            raise ValueError("stored zero values are not allowed")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", val)

    @classmethod
    def from_dense(cls, x) -> "SparseVec":
        x = as_vec(x)
        idx = np.flatnonzero(x != 0.0)
        return cls(idx.astype(np.int64), x[idx])

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    def to_dense(self, n: int) -> np.ndarray:
        if self.indices.size and int(self.indices[-1]) >= n:
            raise ValueError(f"index {int(self.indices[-1])} out of range for length {n}")
        out = np.zeros(n)
        out[self.indices] = self.values
        return out

    def dot(self, dense) -> float:
        dense = as_vec(dense)
        return float(np.dot(self.values, dense[self.indices]))
