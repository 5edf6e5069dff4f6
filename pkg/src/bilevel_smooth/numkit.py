"""Small dense linear algebra and finite-difference helpers.

Every matrix handled here is at most a few dozen rows, so plain dense
numpy arrays are used throughout.
"""
from __future__ import annotations

import warnings
from typing import Callable, Optional, Union

import numpy as np
import scipy.linalg

from .errors import NonFiniteEvaluation, ShapeMismatch, SingularMatrix

PIVOT_RTOL = 1e-14


def inf_norm(v) -> float:
    v = np.asarray(v, dtype=float)
    if v.size == 0:
        return 0.0
    return float(np.max(np.abs(v)))


def solve_dense(A, B) -> np.ndarray:
    """Solve ``A X = B`` by LU with partial pivoting.

    ``B`` may be a vector or an ``n x k`` matrix; the result has the same
    shape as ``B``. Raises :class:`SingularMatrix` when a pivot of ``U`` is
    smaller than ``1e-14 * ||A||_inf``.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ShapeMismatch(f"solve_dense needs a square matrix, got {A.shape}")
    n = A.shape[0]
    if B.shape[0] != n:
        raise ShapeMismatch(f"right-hand side has {B.shape[0]} rows, expected {n}")
    if n == 0:
        return B.copy()
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
        raise NonFiniteEvaluation("non-finite entry in linear system")
    scale = float(np.max(np.sum(np.abs(A), axis=1)))
    with warnings.catch_warnings():
        # exact zero pivots are reported below as SingularMatrix
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu, piv = scipy.linalg.lu_factor(A, check_finite=False)
    pivots = np.abs(np.diag(lu))
    if scale == 0.0 or np.min(pivots) < PIVOT_RTOL * scale:
        raise SingularMatrix(
            f"pivot {np.min(pivots):.3e} below {PIVOT_RTOL:.0e}*||A||_inf={scale:.3e}"
        )
    return scipy.linalg.lu_solve((lu, piv), B, check_finite=False)


def default_steps(at) -> np.ndarray:
    """Per-coordinate central-difference steps ``1e-6 * max(1, |v_j|)``."""
    at = np.asarray(at, dtype=float)
    return 1e-6 * np.maximum(1.0, np.abs(at))


def central_diff_jacobian(
    fn: Callable[[np.ndarray], np.ndarray],
    at,
    step: Optional[Union[float, np.ndarray]] = None,
) -> np.ndarray:
    """Central-difference Jacobian of ``fn`` at ``at``.

    Column ``j`` is ``(fn(at + h_j e_j) - fn(at - h_j e_j)) / (2 h_j)``. A
    scalar-valued ``fn`` yields a ``1 x n`` matrix. With ``step=None`` the
    steps come from :func:`default_steps`.
    """
    at = np.asarray(at, dtype=float)
    n = at.size
    steps = default_steps(at) if step is None else np.broadcast_to(
        np.asarray(step, dtype=float), (n,)
    )
    if np.any(steps <= 0):
        raise ValueError("finite-difference step must be positive")
    cols = []
    for j in range(n):
        e = np.zeros(n)
        e[j] = steps[j]
        plus = np.atleast_1d(np.asarray(fn(at + e), dtype=float)).ravel()
        minus = np.atleast_1d(np.asarray(fn(at - e), dtype=float)).ravel()
        if not (np.all(np.isfinite(plus)) and np.all(np.isfinite(minus))):
            raise NonFiniteEvaluation(f"fn non-finite at probe along coordinate {j}")
        cols.append((plus - minus) / (2.0 * steps[j]))
    if not cols:
        out = np.atleast_1d(np.asarray(fn(at), dtype=float)).ravel()
        return np.zeros((out.size, 0))
    return np.column_stack(cols)


def rel_error(a, b, floor: float = 1.0) -> float:
    """Max-norm difference scaled by ``max(floor, ||b||_inf)``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b)) / max(floor, inf_norm(b)))
