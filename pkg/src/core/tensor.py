"""
Dense numerical foundation.

Matrices and vectors are plain float64 numpy arrays; the helpers here validate
shape and finiteness and hand out read-only views so states can be shared
between threads. GaussianVector is the (mean, diagonal variance) pair that
flows through a GAPA forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np
import scipy.linalg

from .errors import DimensionMismatch, NegativeVariance, NonFiniteValue, NotPositiveDefinite

Matrix = np.ndarray
Vector = np.ndarray
ArrayLike = Union[np.ndarray, list, tuple, float]


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


def ensure_finite(arr: np.ndarray, name: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteValue(f"{name} contains NaN or Inf entries")
    return arr


def as_vector(data: ArrayLike, name: str = "vector") -> Vector:
    vec = np.array(data, dtype=np.float64)
    if vec.ndim == 0:
        vec = vec.reshape(1)
    if vec.ndim != 1:
        raise DimensionMismatch(f"{name} must be 1-D, got shape {vec.shape}")
    return _frozen(ensure_finite(vec, name))


def as_matrix(data: ArrayLike, name: str = "matrix") -> Matrix:
    mat = np.array(data, dtype=np.float64)
    if mat.ndim != 2:
        raise DimensionMismatch(f"{name} must be 2-D, got shape {mat.shape}")
    return _frozen(ensure_finite(mat, name))


def matvec(W: Matrix, x: Vector) -> Vector:
    W = np.asarray(W, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if W.ndim != 2 or x.ndim != 1 or W.shape[1] != x.shape[0]:
        raise DimensionMismatch(f"matvec: {W.shape} x {x.shape}")
    return W @ x


def hadamard(a: Vector, b: Vector) -> Vector:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"hadamard: {a.shape} vs {b.shape}")
    return a * b


def squared(W: Matrix) -> Matrix:
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2:
        raise DimensionMismatch(f"squared expects a matrix, got shape {W.shape}")
    return W * W


def symmetrize(A: Matrix) -> Matrix:
    return 0.5 * (A + A.T)


def cholesky_factor(A: Matrix) -> np.ndarray:
    """Lower Cholesky factor of the symmetrised A."""
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionMismatch(f"cholesky needs a square matrix, got {A.shape}")
    try:
        return scipy.linalg.cholesky(symmetrize(A), lower=True, check_finite=True)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(f"non-positive pivot during Cholesky: {exc}") from exc


def cholesky_solve(A: Matrix, B: Union[Matrix, Vector]) -> np.ndarray:
    """Solve A X = B for symmetric positive definite A (jitter already added)."""
    B = np.asarray(B, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    if B.shape[0] != A.shape[0]:
        raise DimensionMismatch(f"cholesky_solve: A is {A.shape}, B is {B.shape}")
    L = cholesky_factor(A)
    return scipy.linalg.cho_solve((L, True), B, check_finite=False)


def triangular_solve(L: Matrix, B: Union[Matrix, Vector], lower: bool = True) -> np.ndarray:
    L = np.asarray(L, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if L.ndim != 2 or L.shape[0] != L.shape[1] or B.shape[0] != L.shape[0]:
        raise DimensionMismatch(f"triangular_solve: L is {L.shape}, B is {B.shape}")
    return scipy.linalg.solve_triangular(L, B, lower=lower, check_finite=False)


@dataclass(frozen=True)
class GaussianVector:
    """Mean vector plus per-coordinate variance."""

    mean: Vector
    var: Vector

    def __post_init__(self):
        mean = as_vector(self.mean, "mean")
        var = as_vector(self.var, "var")
        if mean.shape != var.shape:
            raise DimensionMismatch(f"mean has {mean.shape[0]} entries, var has {var.shape[0]}")
        if np.any(var < 0):
            raise NegativeVariance(f"variance entries must be >= 0, min is {var.min()}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "var", var)

    @classmethod
    def deterministic(cls, mean: ArrayLike) -> "GaussianVector":
        mean = np.asarray(mean, dtype=np.float64)
        return cls(mean, np.zeros_like(mean))

    @property
    def width(self) -> int:
        return int(self.mean.shape[0])
