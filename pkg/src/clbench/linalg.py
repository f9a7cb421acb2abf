"""Dense linear algebra helpers shared by the model and the strategies.

Matrices and vectors are plain float64 numpy arrays (row-major). The
functions here add the dimension checks the rest of the package relies on.
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

GS_TOL = 1e-10


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


def as_vector(v) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise DimensionError(f"expected a vector, got shape {arr.shape}")
    return arr


def as_matrix(m) -> np.ndarray:
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"expected a matrix, got shape {arr.shape}")
    return arr


def dot(a, b) -> float:
    """Scalar product of two equal-length vectors."""
    a = as_vector(a)
    b = as_vector(b)
    if a.shape != b.shape:
        raise DimensionError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    return float(np.dot(a, b))


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def gram_schmidt_extend(
    basis: Sequence[np.ndarray], v, tol: float = GS_TOL
) -> Optional[np.ndarray]:
    """Orthonormalize ``v`` against an orthonormal ``basis``.

    Returns the unit residual direction, or ``None`` when the residual norm
    falls below ``tol`` relative to the norm of ``v`` (``v`` already lies in
    the span). Two passes of modified Gram-Schmidt are used so the result
    stays orthogonal to ~1e-15 even with a few hundred basis vectors.
    """
    v = as_vector(v).copy()
    norm_v = float(np.linalg.norm(v))
    if norm_v == 0.0 or not np.isfinite(norm_v):
        return None
    for _ in range(2):
        for b in basis:
            v -= np.dot(b, v) * b
    norm_r = float(np.linalg.norm(v))
    if norm_r < tol * norm_v:
        return None
    return v / norm_r


def kron_quad_form(G, D, A) -> float:
    """``trace(G @ D @ A @ D.T)``, i.e. ``vec(D)^T (A kron G) vec(D)``.

    ``G`` is out x out, ``A`` is in x in and ``D`` is out x in; ``vec`` stacks
    columns. Never materializes the Kronecker product.
    """
    G = as_matrix(G)
    D = as_matrix(D)
    A = as_matrix(A)
    out, inp = D.shape
    if G.shape != (out, out) or A.shape != (inp, inp):
        raise DimensionError(
            f"factor shapes {G.shape}, {A.shape} do not fit D of shape {D.shape}"
        )
    return float(np.sum((G @ D @ A) * D))
