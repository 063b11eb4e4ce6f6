"""Dense float64 linear algebra used throughout the package.

Matrices are plain ``numpy.ndarray`` objects of dtype float64 and ndim 2.
Every exported function validates finiteness on the way out so that a NaN
never travels silently between pipeline stages.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ZERO_COLUMN_TOL = 1e-12
KRON_MAX_ENTRIES = 10**6


class ShapeError(ValueError):
    pass


class NonFiniteError(ValueError):
    pass


class SizeGuardError(ValueError):
    pass


class SvdConvergenceError(RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


def _check_finite(a: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"{what} contains non-finite entries")
    return a


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Coerce ``x`` to a finite, C-contiguous float64 2-D array."""
    a = np.ascontiguousarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    if a.shape[0] < 1 or a.shape[1] < 1:
        raise ShapeError(f"{name} must have positive dimensions, got {a.shape}")
    return _check_finite(a, name)


def as_vector(x, name: str = "vector") -> np.ndarray:
    a = np.ascontiguousarray(x, dtype=np.float64)
    if a.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got shape {a.shape}")
    return _check_finite(a, name)


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "left operand")
    b = as_matrix(b, "right operand")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}")
    return _check_finite(a @ b, "product")


def gram(w) -> np.ndarray:
    """Return ``WᵀW``, exactly symmetrized."""
    w = as_matrix(w, "w")
    g = w.T @ w
    return _check_finite(0.5 * (g + g.T), "gram")


def normalize_columns(m) -> tuple[np.ndarray, np.ndarray]:
    """Scale each column to unit l2 norm.

    Columns whose norm is at most ``ZERO_COLUMN_TOL`` are returned unchanged
    and flagged in the boolean mask.
    """
    m = as_matrix(m)
    norms = np.sqrt(np.sum(m * m, axis=0))
    zero_mask = norms <= ZERO_COLUMN_TOL
    safe = np.where(zero_mask, 1.0, norms)
    return m / safe, zero_mask


@dataclass(frozen=True)
class SvdResult:
    U: np.ndarray  # m x m
    sigma: np.ndarray  # min(m, n), non-increasing
    V: np.ndarray  # n x n

    @property
    def rank_count(self) -> int:
        return len(self.sigma)

    def reconstruct(self) -> np.ndarray:
        h = len(self.sigma)
        return (self.U[:, :h] * self.sigma) @ self.V[:, :h].T


def _sign_flip(cols: np.ndarray) -> np.ndarray:
    # sign making the largest-magnitude entry of each column non-negative;
    # argmax picks the first index on ties
    idx = np.argmax(np.abs(cols), axis=0)
    signs = np.sign(cols[idx, np.arange(cols.shape[1])])
    signs[signs == 0] = 1.0
    return signs


def svd(m) -> SvdResult:
    """Full SVD with a deterministic sign convention.

    The largest-magnitude entry of each column of U is non-negative; the
    matching columns of V are flipped alongside. Columns of V beyond
    ``min(m, n)`` follow the same rule on their own entries.
    """
    m = as_matrix(m)
    rows, cols = m.shape
    try:
        u, s, vt = np.linalg.svd(m, full_matrices=True)
    except np.linalg.LinAlgError as exc:
        raise SvdConvergenceError(f"svd of {rows}x{cols} matrix did not converge", float("nan")) from exc
    v = vt.T.copy()
    h = len(s)
    signs_u = _sign_flip(u)
    u = u * signs_u
    v[:, :h] *= signs_u[:h]
    if cols > h:
        v[:, h:] *= _sign_flip(v[:, h:])
    result = SvdResult(U=np.ascontiguousarray(u), sigma=s, V=np.ascontiguousarray(v))
    residual = float(np.linalg.norm(result.reconstruct() - m))
    if not np.isfinite(residual) or residual > 1e-8 * (1.0 + np.linalg.norm(m)):
        raise SvdConvergenceError("svd reconstruction check failed", residual)
    return result


def kron(a, b) -> np.ndarray:
    """Kronecker product; block (i, j) equals ``a[i, j] * b``.

    Only meant for tiny oracle computations.
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    rows = a.shape[0] * b.shape[0]
    cols = a.shape[1] * b.shape[1]
    if rows * cols > KRON_MAX_ENTRIES:
        raise SizeGuardError(
            f"kron would need a {rows}x{cols} matrix ({rows * cols} entries, limit {KRON_MAX_ENTRIES})"
        )
    return np.kron(a, b)


def topk_min(values, k: int) -> np.ndarray:
    """Indices of the ``k`` smallest values, ordered by (value, index)."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 1:
        raise ShapeError("values must be 1-D")
    if k < 0 or k > len(values):
        raise ValueError(f"k={k} out of range for {len(values)} values")
    if np.any(np.isnan(values)):
        raise NonFiniteError("values contain NaN")
    return np.argsort(values, kind="stable")[:k]


def outer(u, v) -> np.ndarray:
    u = as_vector(u, "u")
    v = as_vector(v, "v")
    return np.outer(u, v)


def vec(m) -> np.ndarray:
    """Column-major vectorization (stacks columns)."""
    return np.asarray(m, dtype=np.float64).reshape(-1, order="F")


def unvec(x, rows: int, cols: int) -> np.ndarray:
    return np.asarray(x, dtype=np.float64).reshape((rows, cols), order="F")


def numerical_rank(m, rel_tol: float = 1e-8) -> int:
    s = np.linalg.svd(as_matrix(m), compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > rel_tol * s[0]))


def symmetrize(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)
