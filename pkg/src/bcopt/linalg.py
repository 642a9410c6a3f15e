"""Dense float64 kernel for small symmetric matrices.

Shampoo-style preconditioners need symmetric eigendecompositions of
matrices with dims up to ~128. A cyclic Jacobi sweep is simple, accurate
to a few ulps for matrices this size, and keeps the numerics fully under
our control. Everything is float64; bias terms downstream are O(1/m) and
must stay resolvable above rounding noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, InvalidInputError

# Off-diagonal Frobenius norm must fall below OFF_DIAG_TOL * ||A||_F.
OFF_DIAG_TOL = 1e-12
MAX_SWEEPS = 100


def as_vector(x) -> np.ndarray:
    """Coerce to a finite 1-d float64 array."""
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise InvalidInputError(f"expected a 1-d vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise InvalidInputError("vector has non-finite entries")
    return v


@dataclass(frozen=True)
class SymMatrix:
    """Symmetric matrix with exactly mirrored triangles.

    The constructor checks the input is (numerically) symmetric and then
    copies the upper triangle onto the lower one, so ``a[i, j] == a[j, i]``
    holds exactly, not just within rounding.
    """

    mat: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mat, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise InvalidInputError(f"expected a square matrix, got shape {m.shape}")
        if m.shape[0] < 1:
            raise InvalidInputError("matrix dimension must be >= 1")
        if not np.all(np.isfinite(m)):
            raise InvalidInputError("matrix has non-finite entries")
        scale = float(np.max(np.abs(m))) if m.size else 0.0
        asym = float(np.max(np.abs(m - m.T))) if m.size else 0.0
        if asym > 1e-8 * (1.0 + scale):
            raise InvalidInputError(f"matrix is not symmetric (max asymmetry {asym:g})")
        upper = np.triu(m)
        exact = upper + np.triu(m, 1).T
        exact.setflags(write=False)
        object.__setattr__(self, "mat", exact)

    @property
    def dim(self) -> int:
        return self.mat.shape[0]

    @classmethod
    def identity(cls, n: int) -> "SymMatrix":
        return cls(np.eye(n))

    @classmethod
    def diagonal(cls, values) -> "SymMatrix":
        return cls(np.diag(as_vector(values)))


@dataclass(frozen=True)
class EigenDecomp:
    """Orthogonal basis (columns) and eigenvalues sorted descending."""

    basis: np.ndarray
    eigenvalues: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.basis * self.eigenvalues) @ self.basis.T


def sym_eigen(a: SymMatrix, max_sweeps: int = MAX_SWEEPS) -> EigenDecomp:
    """Cyclic Jacobi eigendecomposition.

    Sweeps the strict upper triangle with Givens rotations until the
    off-diagonal Frobenius norm drops below ``OFF_DIAG_TOL * ||A||_F``,
    capped at ``max_sweeps`` full sweeps. Eigenvalues come back sorted
    descending with a stable tie order so downstream eigenbasis
    corrections are deterministic.
    """
    m = a.mat.copy()
    n = a.dim
    q = np.eye(n)
    threshold = OFF_DIAG_TOL * float(np.linalg.norm(m))

    off = _off_diagonal_norm(m)
    sweeps = 0
    while off > threshold:
        if sweeps >= max_sweeps:
            raise ConvergenceError(
                f"Jacobi failed to converge in {max_sweeps} sweeps "
                f"(off-diagonal norm {off:g}, threshold {threshold:g})",
                off_diagonal_norm=off,
            )
        for p in range(n - 1):
            for r in range(p + 1, n):
                apr = m[p, r]
                if apr == 0.0:
                    continue
                tau = (m[r, r] - m[p, p]) / (2.0 * apr)
                if abs(tau) > 1e150:
                    t = 1.0 / (2.0 * tau)
                else:
                    t = np.sign(tau) if tau != 0.0 else 1.0
                    t /= abs(tau) + np.sqrt(1.0 + tau * tau)
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                # A <- J^T A J, applied as row then column combinations.
                row_p = m[p, :].copy()
                row_r = m[r, :].copy()
                m[p, :] = c * row_p - s * row_r
                m[r, :] = s * row_p + c * row_r
                col_p = m[:, p].copy()
                col_r = m[:, r].copy()
                m[:, p] = c * col_p - s * col_r
                m[:, r] = s * col_p + c * col_r
                # The rotation annihilates this pair analytically.
                m[p, r] = 0.0
                m[r, p] = 0.0
                qp = q[:, p].copy()
                qr = q[:, r].copy()
                q[:, p] = c * qp - s * qr
                q[:, r] = s * qp + c * qr
        sweeps += 1
        off = _off_diagonal_norm(m)

    values = np.diagonal(m).copy()
    order = np.argsort(-values, kind="stable")
    return EigenDecomp(basis=q[:, order], eigenvalues=values[order])


def _off_diagonal_norm(m: np.ndarray) -> float:
    off = m - np.diag(np.diagonal(m))
    return float(np.linalg.norm(off))


def conjugate(a: SymMatrix, q: np.ndarray) -> SymMatrix:
    """Q^T A Q as a SymMatrix. Trace is preserved when q is orthogonal."""
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (a.dim, a.dim):
        raise InvalidInputError(
            f"basis shape {q.shape} does not match matrix dim {a.dim}"
        )
    if not np.all(np.isfinite(q)):
        raise InvalidInputError("basis has non-finite entries")
    return SymMatrix(q.T @ a.mat @ q)


def _as_array(x) -> np.ndarray:
    if isinstance(x, SymMatrix):
        return x.mat
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("operand has non-finite entries")
    return arr


def matmul(a, b) -> np.ndarray:
    a, b = _as_array(a), _as_array(b)
    if a.shape[-1] != b.shape[0]:
        raise InvalidInputError(f"incompatible shapes {a.shape} and {b.shape}")
    return a @ b


def add(a, b) -> np.ndarray:
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise InvalidInputError(f"incompatible shapes {a.shape} and {b.shape}")
    return a + b


def scale(a, c: float) -> np.ndarray:
    return _as_array(a) * float(c)


def frobenius_norm(a) -> float:
    return float(np.linalg.norm(_as_array(a)))
