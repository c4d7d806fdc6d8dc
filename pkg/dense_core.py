"""
Dense linear algebra for the simulator
Matrix-vector products, outer products, elementwise maps and norms over float64 numpy arrays.

Every product goes through ``np.einsum`` without path optimisation, so the
reduction runs in numpy's own sum-of-products loop instead of BLAS. Identical
inputs give bit-identical outputs, which the oracle tests rely on.

Vectors are 1-D arrays. Functions that take a vector also accept a 2-D array
whose rows are a batch of vectors (one row per sample of a micro-batch).
"""

from dataclasses import dataclass
from typing import Literal, Union

import numpy as np
import numpy.typing as npt

from sim_errors import ConfigError, NumericalError

Vector = npt.NDArray[np.float64]
Matrix = npt.NDArray[np.float64]
Tensor = Union[Vector, Matrix]

EwiseOp = Literal["mul", "abs_mul", "add_scaled"]


@dataclass(frozen=True)
class Norms:
    """Infinity norm (max |entry|) and Frobenius / l2 norm."""
    inf: float
    fro: float


def as_vector(data) -> Vector:
    """Convert to a non-empty, finite float64 vector."""
    vec = np.array(data, dtype=np.float64)
    if vec.ndim != 1 or vec.size == 0:
        raise ConfigError(f"expected a non-empty vector, got shape {vec.shape}")
    check_finite(vec, "as_vector")
    return vec


def as_matrix(data) -> Matrix:
    """Convert to a non-empty, finite, row-major float64 matrix."""
    mat = np.array(data, dtype=np.float64, order="C")
    if mat.ndim != 2 or mat.size == 0:
        raise ConfigError(f"expected a non-empty matrix, got shape {mat.shape}")
    check_finite(mat, "as_matrix")
    return mat


def check_finite(arr: Tensor, operation: str, **context) -> Tensor:
    """Raise NumericalError if any entry is NaN or Inf."""
    if not np.all(np.isfinite(arr)):
        bad = int(np.size(arr) - np.count_nonzero(np.isfinite(arr)))
        raise NumericalError(
            f"non-finite values produced by {operation}",
            {"operation": operation, "non_finite": bad, **context},
        )
    return arr


def matvec(W: Matrix, x: Tensor) -> Tensor:
    """result_i = sum_j W_ij x_j (row-wise per sample for batched x)."""
    if W.ndim != 2 or x.ndim not in (1, 2) or W.shape[1] != x.shape[-1]:
        raise ConfigError(f"matvec dimension mismatch: W {W.shape} vs x {x.shape}")
    if x.ndim == 1:
        return np.einsum("ij,j->i", W, x)
    return np.einsum("ij,bj->bi", W, x)


def vecmat(d: Tensor, W: Matrix) -> Tensor:
    """result_j = sum_i d_i W_ij, the row vector d times W."""
    if W.ndim != 2 or d.ndim not in (1, 2) or W.shape[0] != d.shape[-1]:
        raise ConfigError(f"vecmat dimension mismatch: d {d.shape} vs W {W.shape}")
    if d.ndim == 1:
        return np.einsum("i,ij->j", d, W)
    return np.einsum("bi,ij->bj", d, W)


def outer(d: Vector, x: Vector) -> Matrix:
    """result_ij = d_i x_j."""
    if d.ndim != 1 or x.ndim != 1 or d.size == 0 or x.size == 0:
        raise ConfigError(f"outer expects non-empty vectors, got {d.shape} and {x.shape}")
    return np.einsum("i,j->ij", d, x)


def outer_mean(D: Matrix, X: Matrix) -> Matrix:
    """Average of the per-row outer products d_b x_b^T over a micro-batch."""
    if D.ndim != 2 or X.ndim != 2 or D.shape[0] != X.shape[0]:
        raise ConfigError(f"outer_mean batch mismatch: {D.shape} vs {X.shape}")
    return np.einsum("bi,bj->ij", D, X) / D.shape[0]


def ewise(a: Tensor, b: Tensor, op: EwiseOp, scale: float = 1.0) -> Tensor:
    """
    Elementwise combination of two same-shape arrays.

    ``mul``: a*b, ``abs_mul``: |a|*b, ``add_scaled``: a + scale*b.
    """
    if a.shape != b.shape:
        raise ConfigError(f"ewise shape mismatch: {a.shape} vs {b.shape}")
    if op == "mul":
        return a * b
    if op == "abs_mul":
        return np.abs(a) * b
    if op == "add_scaled":
        return a + scale * b
    raise ConfigError(f"unknown elementwise op '{op}'")


def norms(M: Tensor) -> Norms:
    if M.size == 0:
        return Norms(inf=0.0, fro=0.0)
    return Norms(inf=float(np.max(np.abs(M))), fro=float(np.sqrt(np.sum(M * M))))
