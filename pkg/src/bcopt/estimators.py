"""Microbatch statistics and bias-corrected inverse preconditioners.

The statistical core of the package. Given m per-microbatch preconditioner
statistics, three mechanisms produce a lower-bias inverse (or inverse-root):

* ``corrected_diag_inverse``: subtract the leading curvature-times-variance
  term of the damped inverse, ``1/(p+lam) - Var(pbar)/(p+lam)^3``, then
  clamp at zero.
* ``jackknife_inverse``: leave-one-microbatch-out recombination
  ``m*T(pbar) - ((m-1)/m) * sum_j T(pbar_{-j})``, which cancels the same
  leading O(1/m) bias for any smooth functional.
* ``corrected_inverse_root_eigs``: the delta correction for spectral maps
  ``T(x) = (x + damping)**(-alpha)`` applied per eigenvalue, used by
  matrix preconditioners after projecting microbatch matrices into the
  eigenbasis of their average.

The variance throughout is the variance of the microbatch *mean*,
``sum_j (p_j - pbar)^2 / (m*(m-1))``, not the variance of one microbatch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import DomainError, InsufficientMicrobatchesError, InvalidInputError
from .linalg import SymMatrix


@dataclass(frozen=True)
class MicrobatchDiagSet:
    """m per-microbatch statistic vectors, stacked as an (m, d) array."""

    samples: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim == 1:
            s = s[:, None]
        if s.ndim != 2:
            raise InvalidInputError(f"expected (m, d) samples, got shape {s.shape}")
        if s.shape[0] < 2:
            raise InsufficientMicrobatchesError(
                f"need at least 2 microbatches, got {s.shape[0]}"
            )
        if not np.all(np.isfinite(s)):
            raise InvalidInputError("microbatch samples contain non-finite entries")
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)

    @property
    def m(self) -> int:
        return self.samples.shape[0]

    @property
    def dim(self) -> int:
        return self.samples.shape[1]


@dataclass(frozen=True)
class MeanVar:
    """Coordinatewise mean and variance of that mean."""

    mean: np.ndarray
    var_of_mean: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        var = np.asarray(self.var_of_mean, dtype=np.float64)
        if mean.shape != var.shape:
            raise InvalidInputError(
                f"mean shape {mean.shape} != variance shape {var.shape}"
            )
        if np.any(var < 0):
            raise InvalidInputError("variance of the mean must be nonnegative")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "var_of_mean", var)


@dataclass(frozen=True)
class CorrectedInverse:
    """Clamped corrected inverse entries plus correction diagnostics.

    ``clamp_count`` is the number of coordinates whose raw corrected value
    was negative before clamping; ``correction_l2`` is the L2 norm of the
    subtracted bias term.
    """

    values: np.ndarray
    clamp_count: int
    correction_l2: float


@dataclass(frozen=True)
class SpectralMap:
    """The scalar spectral map T(x) = (x + damping)**(-alpha)."""

    alpha: float
    damping: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise InvalidInputError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.damping < 0.0:
            raise InvalidInputError(f"damping must be >= 0, got {self.damping}")

    def value(self, x: np.ndarray) -> np.ndarray:
        return (x + self.damping) ** (-self.alpha)

    def second_derivative(self, x: np.ndarray) -> np.ndarray:
        a = self.alpha
        return a * (a + 1.0) * (x + self.damping) ** (-a - 2.0)


def mean_and_var_of_mean(stats: MicrobatchDiagSet) -> MeanVar:
    """Microbatch mean and the unbiased variance-of-the-mean estimator."""
    s = stats.samples
    m = stats.m
    mean = s.mean(axis=0)
    dev = s - mean
    var = (dev * dev).sum(axis=0) / (m * (m - 1.0))
    return MeanVar(mean=mean, var_of_mean=var)


def corrected_diag_inverse(mv: MeanVar, damping: float = 0.0) -> CorrectedInverse:
    """Delta-corrected damped inverse, clamped at zero.

    values[k] = max(0, 1/(mean_k + damping) - var_k/(mean_k + damping)^3).
    """
    denom = mv.mean + damping
    bad = denom <= 0.0
    if np.any(bad):
        k = int(np.argmax(bad))
        raise DomainError(
            f"coordinate {k}: mean + damping = {denom[k]:g} is not positive",
            coordinate=k,
        )
    correction = mv.var_of_mean / denom**3
    raw = 1.0 / denom - correction
    values = np.maximum(raw, 0.0)
    return CorrectedInverse(
        values=values,
        clamp_count=int(np.count_nonzero(raw < 0.0)),
        correction_l2=float(np.linalg.norm(correction)),
    )


def jackknife_inverse(
    stats: MicrobatchDiagSet,
    functional: Callable[[np.ndarray], np.ndarray] = np.reciprocal,
    damping: float = 0.0,
) -> np.ndarray:
    """Leave-one-microbatch-out jackknife of a smooth functional.

    Evaluates ``functional`` at the damped full mean and at all m damped
    leave-one-out means, and returns
    ``m*T(pbar) - ((m-1)/m) * sum_j T(pbar_{-j})`` coordinatewise.
    Affine functionals pass through unchanged.
    """
    s = stats.samples
    m = stats.m
    mean = s.mean(axis=0)
    loo = (m * mean - s) / (m - 1.0)
    full_val = _evaluate(functional, mean + damping)
    loo_val = _evaluate(functional, loo + damping)
    return m * full_val - (m - 1.0) / m * loo_val.sum(axis=0)


def _evaluate(functional, points: np.ndarray) -> np.ndarray:
    # finiteness is checked below, so let the functional overflow quietly
    with np.errstate(all="ignore"):
        values = np.asarray(functional(points), dtype=np.float64)
    if values.shape != points.shape:
        raise InvalidInputError(
            f"functional changed shape {points.shape} -> {values.shape}"
        )
    if not np.all(np.isfinite(values)):
        flat = np.argwhere(~np.isfinite(values))
        raise DomainError(
            f"functional undefined at evaluation point index {tuple(flat[0])}"
        )
    return values


def corrected_inverse_root_eigs(
    eigs: np.ndarray,
    eig_var_of_mean: np.ndarray,
    spectral_map: SpectralMap,
    cap: float | None = None,
) -> CorrectedInverse:
    """Delta-corrected inverse-root eigenvalues.

    values[k] = max(0, T(eig_k) - 0.5 * T''(eig_k) * var_k) with
    T(x) = (x + damping)**(-alpha), optionally capped from above. With
    alpha = 1 this reduces to ``corrected_diag_inverse``.
    """
    eigs = np.asarray(eigs, dtype=np.float64)
    var = np.asarray(eig_var_of_mean, dtype=np.float64)
    if eigs.shape != var.shape:
        raise InvalidInputError(
            f"eigenvalue shape {eigs.shape} != variance shape {var.shape}"
        )
    if np.any(var < 0):
        raise InvalidInputError("eigenvalue variance must be nonnegative")
    shifted = eigs + spectral_map.damping
    bad = shifted <= 0.0
    if np.any(bad):
        k = int(np.argmax(bad))
        raise DomainError(
            f"eigenvalue {k}: value + damping = {shifted[k]:g} is not positive",
            coordinate=k,
        )
    correction = 0.5 * spectral_map.second_derivative(eigs) * var
    raw = spectral_map.value(eigs) - correction
    values = np.maximum(raw, 0.0)
    if cap is not None:
        values = np.minimum(values, cap)
    return CorrectedInverse(
        values=values,
        clamp_count=int(np.count_nonzero(raw < 0.0)),
        correction_l2=float(np.linalg.norm(correction)),
    )


def project_microbatch_matrices(
    mats: Sequence[SymMatrix], basis: np.ndarray
) -> MicrobatchDiagSet:
    """Diagonals of Q^T M_j Q for each microbatch matrix M_j.

    The rows estimate per-eigendirection variability when ``basis`` is the
    eigenbasis of the averaged preconditioner.
    """
    basis = np.asarray(basis, dtype=np.float64)
    if len(mats) < 2:
        raise InsufficientMicrobatchesError(
            f"need at least 2 microbatch matrices, got {len(mats)}"
        )
    dim = mats[0].dim
    if basis.shape != (dim, dim):
        raise InvalidInputError(
            f"basis shape {basis.shape} does not match matrix dim {dim}"
        )
    rows = np.empty((len(mats), dim))
    for j, mat in enumerate(mats):
        if mat.dim != dim:
            raise InvalidInputError(
                f"microbatch matrix {j} has dim {mat.dim}, expected {dim}"
            )
        rows[j] = np.einsum("ji,jk,ki->i", basis, mat.mat, basis)
    return MicrobatchDiagSet(rows)
