"""Bias-corrected Shampoo for matrix parameters.

Left/right second-moment factors L = E[G G^T], R = E[G^T G] are tracked by
EMA (or cumulatively), damped, and applied through inverse fourth roots.
Corrected variants eigendecompose the damped averaged factor, project each
microbatch's hypothetical factor into that eigenbasis, estimate the
variance of the mean along each eigendirection, and subtract the leading
bias of x**(-1/4) per eigenvalue: for f(x) = x**(-1/4) the curvature is
f''(x) = (5/16) x**(-9/4), so the corrected root is
x**(-1/4) - (5/32) x**(-9/4) * var.

Eigendecompositions are recomputed on a fixed cadence; between recomputes
the cached corrected operators are reused. If the eigensolver fails to
converge, the step falls back to the previous cached operators and flags
the result.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigurationError, ConvergenceError, InvalidInputError
from ..estimators import (
    SpectralMap,
    corrected_inverse_root_eigs,
    mean_and_var_of_mean,
    project_microbatch_matrices,
)
from ..linalg import SymMatrix, sym_eigen
from .common import StepResult, Variant, require_finite

MATRIX_ROOT_EXPONENT = 0.25


@dataclass
class ShampooState:
    m: np.ndarray  # (d1, d2) momentum
    left: np.ndarray  # (d1, d1)
    right: np.ndarray  # (d2, d2)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.95
    damping: float = 1e-6
    alpha: float = MATRIX_ROOT_EXPONENT
    eigen_every: int = 5
    cumulative: bool = False
    clip: float = 0.0  # Frobenius clip on the update; 0 disables
    max_root: float | None = None  # cap on corrected root eigenvalues; None disables
    weight_decay: float = 0.0
    cached_left_op: np.ndarray | None = None
    cached_right_op: np.ndarray | None = None
    cached_diag: tuple = (0, 0.0, 0.0, 0.0)

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigurationError("betas must lie in [0, 1)")
        if self.eigen_every < 1:
            raise ConfigurationError("eigen_every must be >= 1")
        if self.damping < 0.0:
            raise ConfigurationError("damping must be >= 0")
        self.m = np.asarray(self.m, dtype=np.float64)
        self.left = np.asarray(self.left, dtype=np.float64)
        self.right = np.asarray(self.right, dtype=np.float64)

    @classmethod
    def init(cls, shape: tuple, **hyper) -> "ShampooState":
        d1, d2 = shape
        return cls(m=np.zeros((d1, d2)), left=np.zeros((d1, d1)),
                   right=np.zeros((d2, d2)), **hyper)


def shampoo_step(state: ShampooState, grad_a: np.ndarray,
                 microbatch_grads_b: np.ndarray, variant: Variant) -> StepResult:
    """One Shampoo step on a matrix parameter."""
    grad_a = np.asarray(grad_a, dtype=np.float64)
    grads_b = np.asarray(microbatch_grads_b, dtype=np.float64)
    if grad_a.ndim != 2:
        raise InvalidInputError(f"expected a matrix gradient, got shape {grad_a.shape}")
    if grads_b.ndim != 3 or grads_b.shape[1:] != grad_a.shape:
        raise InvalidInputError(
            f"expected (m, d1, d2) microbatch grads matching {grad_a.shape}, "
            f"got {grads_b.shape}"
        )
    require_finite(grad_a, grads_b)

    t = state.t + 1
    m_new = state.beta1 * state.m + (1.0 - state.beta1) * grad_a
    with np.errstate(over="ignore", invalid="ignore"):
        sl_j = np.einsum("jab,jcb->jac", grads_b, grads_b)
        sr_j = np.einsum("jba,jbc->jac", grads_b, grads_b)
    require_finite(sl_j, sr_j)
    sl = sl_j.mean(axis=0)
    sr = sr_j.mean(axis=0)
    if state.cumulative:
        left_new = state.left + sl
        right_new = state.right + sr
        hyp_left = state.left + sl_j
        hyp_right = state.right + sr_j
    else:
        left_new = state.beta2 * state.left + (1.0 - state.beta2) * sl
        right_new = state.beta2 * state.right + (1.0 - state.beta2) * sr
        hyp_left = state.beta2 * state.left + (1.0 - state.beta2) * sl_j
        hyp_right = state.beta2 * state.right + (1.0 - state.beta2) * sr_j

    fallback = False
    used_cache = False
    if state.t % state.eigen_every == 0:
        try:
            left_op, ldiag = _root_operator(state, left_new, hyp_left, variant)
            right_op, rdiag = _root_operator(state, right_new, hyp_right, variant)
            diag = (
                ldiag[0] + rdiag[0],
                float(np.hypot(ldiag[1], rdiag[1])),
                0.5 * (ldiag[2] + rdiag[2]),
                0.5 * (ldiag[3] + rdiag[3]),
            )
        except ConvergenceError:
            if state.cached_left_op is None or state.cached_right_op is None:
                raise
            left_op, right_op = state.cached_left_op, state.cached_right_op
            diag = state.cached_diag
            fallback = True
    else:
        if state.cached_left_op is None or state.cached_right_op is None:
            raise ConfigurationError("operator cache empty off the eigen cadence")
        left_op, right_op = state.cached_left_op, state.cached_right_op
        diag = state.cached_diag
        used_cache = True

    update = left_op @ m_new @ right_op
    if state.clip > 0:
        norm = float(np.linalg.norm(update))
        if norm > state.clip:
            update = update * (state.clip / norm)

    state.m = m_new
    state.left = left_new
    state.right = right_new
    state.t = t
    state.cached_left_op = left_op
    state.cached_right_op = right_op
    state.cached_diag = diag
    return StepResult(
        update=update,
        clamp_count=diag[0],
        correction_l2=diag[1],
        denom_mean=diag[2],
        denom_var=diag[3],
        used_cached_operators=used_cache,
        eigen_fallback=fallback,
    )


def _root_operator(state: ShampooState, stat: np.ndarray, hyp: np.ndarray,
                   variant: Variant):
    """Inverse-root operator of one damped factor, corrected per eigenvalue
    for corrected variants. Returns (operator, diagnostics tuple)."""
    dim = stat.shape[0]
    damped = SymMatrix(stat + state.damping * np.eye(dim))
    eig = sym_eigen(damped)
    spectral = SpectralMap(alpha=state.alpha, damping=0.0)
    if variant.corrected:
        mats = [SymMatrix(hyp[j] + state.damping * np.eye(dim))
                for j in range(hyp.shape[0])]
        projected = project_microbatch_matrices(mats, eig.basis)
        mv = mean_and_var_of_mean(projected)
        ci = corrected_inverse_root_eigs(
            eig.eigenvalues, mv.var_of_mean, spectral, cap=state.max_root
        )
        roots = ci.values
        diag = (ci.clamp_count, ci.correction_l2,
                float(eig.eigenvalues.mean()), float(mv.var_of_mean.mean()))
    else:
        ci = corrected_inverse_root_eigs(
            eig.eigenvalues, np.zeros(dim), spectral, cap=state.max_root
        )
        roots = ci.values
        diag = (0, 0.0, float(eig.eigenvalues.mean()), 0.0)
    operator = (eig.basis * roots) @ eig.basis.T
    return operator, diag
