"""
linalg.py

Plain numpy linear algebra used underneath the tensor operations and by the
oracles: batched triangular solves by substitution and an LU factorization
with partial pivoting. Nothing here records on a tape.
"""

import numpy as np

from mango.errors import DimensionError, SingularityError

# Diagonal entries below this magnitude are treated as singular pivots.
PIVOT_FLOOR = 1e-300


def _check_triangular_system(a: np.ndarray, b: np.ndarray, op: str):
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise DimensionError(op, a.shape, b.shape)
    if b.ndim < 2 or b.shape[-2] != a.shape[-1]:
        raise DimensionError(op, a.shape, b.shape)


def back_substitution(a: np.ndarray, b: np.ndarray, unit_diagonal: bool = False) -> np.ndarray:
    """Solve a @ x = b for upper-triangular a.

    Args:
        a (np.ndarray): Upper-triangular matrices of shape [..., n, n].
            Entries below the diagonal are ignored.
        b (np.ndarray): Right-hand sides of shape [..., n, k].
        unit_diagonal (bool): Treat the diagonal of a as ones.

    Returns:
        np.ndarray: x with the broadcast batch shape of a and b.
    """
    _check_triangular_system(a, b, "back_substitution")
    n = a.shape[-1]
    batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    x = np.zeros(batch + b.shape[-2:], dtype=np.float64)
    if not unit_diagonal:
        diag = np.diagonal(a, axis1=-2, axis2=-1)
        if np.any(np.abs(diag) < PIVOT_FLOOR):
            raise SingularityError("upper-triangular system has a vanishing diagonal entry")
    for i in range(n - 1, -1, -1):
        rhs = b[..., i, :]
        if i + 1 < n:
            rhs = rhs - (a[..., i:i + 1, i + 1:] @ x[..., i + 1:, :])[..., 0, :]
        if unit_diagonal:
            x[..., i, :] = rhs
        else:
            x[..., i, :] = rhs / a[..., i, i][..., None]
    return x


def forward_substitution(a: np.ndarray, b: np.ndarray, unit_diagonal: bool = False) -> np.ndarray:
    """Solve a @ x = b for lower-triangular a. Same conventions as back_substitution."""
    _check_triangular_system(a, b, "forward_substitution")
    n = a.shape[-1]
    batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    x = np.zeros(batch + b.shape[-2:], dtype=np.float64)
    if not unit_diagonal:
        diag = np.diagonal(a, axis1=-2, axis2=-1)
        if np.any(np.abs(diag) < PIVOT_FLOOR):
            raise SingularityError("lower-triangular system has a vanishing diagonal entry")
    for i in range(n):
        rhs = b[..., i, :]
        if i > 0:
            rhs = rhs - (a[..., i:i + 1, :i] @ x[..., :i, :])[..., 0, :]
        if unit_diagonal:
            x[..., i, :] = rhs
        else:
            x[..., i, :] = rhs / a[..., i, i][..., None]
    return x


def solve_triangular(a: np.ndarray, b: np.ndarray, lower: bool = False, unit_diagonal: bool = False) -> np.ndarray:
    """Dispatch to forward or back substitution."""
    if lower:
        return forward_substitution(a, b, unit_diagonal=unit_diagonal)
    return back_substitution(a, b, unit_diagonal=unit_diagonal)


def lu_factor(m: np.ndarray):
    """LU factorization with partial pivoting of one square matrix.

    Used by the oracles only, so it is written out row by row rather than
    borrowed from numpy.linalg.

    Args:
        m (np.ndarray): Square matrix [n, n].

    Returns:
        tuple (lu, perm, swaps):
            lu holds L (unit diagonal, strictly below) and U (on and above the
            diagonal); perm is the row order so that m[perm] = L @ U; swaps is
            the number of row exchanges performed.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionError("lu_factor", m.shape)
    n = m.shape[0]
    lu = m.copy()
    perm = np.arange(n)
    swaps = 0
    for col in range(n):
        pivot = col + int(np.argmax(np.abs(lu[col:, col])))
        if pivot != col:
            lu[[col, pivot]] = lu[[pivot, col]]
            perm[[col, pivot]] = perm[[pivot, col]]
            swaps += 1
        if lu[col, col] == 0.0:
            # exactly singular column, nothing left to eliminate
            continue
        lu[col + 1:, col] /= lu[col, col]
        lu[col + 1:, col + 1:] -= np.outer(lu[col + 1:, col], lu[col, col + 1:])
    return lu, perm, swaps
