"""Bias-corrected Sophia-G.

The denominator is a diagonal curvature EMA fed by squared
Gauss-Newton-Bartlett gradients (gradients of the loss against labels
sampled from the model's own predictive distribution). Curvature is
re-estimated every ``hess_interval`` steps; between curvature steps the
most recent corrected inverse denominator is reused while the first
moment keeps updating from the numerator group.

The corrected inverse subtracts Var(pbar)/p^3 from 1/p before Sophia's
elementwise ratio clip, so every update coordinate stays inside
[-clip_bound, clip_bound].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import (
    ConfigurationError,
    InitializationError,
    InvalidInputError,
    UnsupportedProblemError,
)
from ..estimators import MicrobatchDiagSet, mean_and_var_of_mean
from .common import StepResult, Variant, require_finite
from .adamw import POST_EMA, PRE_EMA


@dataclass
class SophiaState:
    m: np.ndarray
    h: np.ndarray
    t: int = 0
    beta1: float = 0.965
    beta2: float = 0.99
    rho: float = 0.05
    batch_scale: float = 1.0  # b in the denominator rho*b*h + eps
    hess_interval: int = 5  # K
    clip_bound: float = 1.0
    eps: float = 1e-12
    weight_decay: float = 0.0
    inverse_timing: str = POST_EMA
    cached_denom_inv: np.ndarray | None = None
    cached_diag: tuple = (0, 0.0, 0.0, 0.0)  # clamp_count, corr_l2, denom_mean, denom_var

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigurationError("betas must lie in [0, 1)")
        if self.hess_interval < 1:
            raise ConfigurationError("hess_interval must be >= 1")
        if self.clip_bound <= 0.0:
            raise ConfigurationError("clip_bound must be positive")
        if self.inverse_timing not in (POST_EMA, PRE_EMA):
            raise ConfigurationError(f"unknown inverse timing {self.inverse_timing!r}")
        self.m = np.asarray(self.m, dtype=np.float64)
        self.h = np.asarray(self.h, dtype=np.float64)
        if np.any(self.h < 0):
            raise InvalidInputError("curvature EMA must be nonnegative")

    @classmethod
    def init(cls, dim: int, **hyper) -> "SophiaState":
        return cls(m=np.zeros(dim), h=np.zeros(dim), **hyper)

    def is_curvature_step(self) -> bool:
        return self.t % self.hess_interval == 0


def sophia_step(state: SophiaState, grad_a: np.ndarray,
                gnb_microbatch_grads_b: np.ndarray | None,
                variant: Variant) -> StepResult:
    """One Sophia-G step. ``gnb_microbatch_grads_b`` is required on
    curvature steps (state.t % K == 0) and ignored otherwise."""
    grad_a = np.asarray(grad_a, dtype=np.float64)
    require_finite(grad_a)

    t = state.t + 1
    m_new = state.beta1 * state.m + (1.0 - state.beta1) * grad_a

    if state.is_curvature_step():
        if gnb_microbatch_grads_b is None:
            raise ConfigurationError("curvature step requires GNB microbatch gradients")
        gnb = np.asarray(gnb_microbatch_grads_b, dtype=np.float64)
        if gnb.ndim != 2 or gnb.shape[1:] != grad_a.shape:
            raise InvalidInputError(
                f"expected (m, d) GNB grads matching shape {grad_a.shape}, got {gnb.shape}"
            )
        require_finite(gnb)
        with np.errstate(over="ignore"):
            r_j = gnb**2
        require_finite(r_j)
        h_new = state.beta2 * state.h + (1.0 - state.beta2) * r_j.mean(axis=0)
        p_t = state.rho * state.batch_scale * h_new + state.eps

        if state.inverse_timing == POST_EMA:
            h_j = state.beta2 * state.h + (1.0 - state.beta2) * r_j
        else:
            h_j = r_j  # pre-EMA: spread of the raw microbatch curvature
        p_j = state.rho * state.batch_scale * h_j + state.eps
        mv = mean_and_var_of_mean(MicrobatchDiagSet(p_j))

        if variant.corrected:
            correction = mv.var_of_mean / p_t**3
            raw = 1.0 / p_t - correction
            denom_inv = np.maximum(raw, 0.0)
            diag = (
                int(np.count_nonzero(raw < 0.0)),
                float(np.linalg.norm(correction)),
                float(p_t.mean()),
                float(mv.var_of_mean.mean()),
            )
        else:
            denom_inv = 1.0 / p_t
            diag = (0, 0.0, float(p_t.mean()), float(mv.var_of_mean.mean()))
        used_cache = False
    else:
        if state.cached_denom_inv is None:
            raise InitializationError(
                "no cached corrected denominator; the first step must be a curvature step"
            )
        h_new = state.h
        denom_inv = state.cached_denom_inv
        diag = state.cached_diag
        used_cache = True

    q = m_new * denom_inv
    update = np.clip(q, -state.clip_bound, state.clip_bound)

    state.m = m_new
    state.h = h_new
    state.t = t
    state.cached_denom_inv = denom_inv
    state.cached_diag = diag
    return StepResult(
        update=update,
        clamp_count=diag[0],
        correction_l2=diag[1],
        denom_mean=diag[2],
        denom_var=diag[3],
        used_cached_operators=used_cache,
    )


def sophia_gnb_sample(task, params: np.ndarray, microbatch, rng) -> np.ndarray:
    """Gradient of the loss against labels sampled from the model's own
    predictive distribution on the microbatch. Squaring is the caller's job."""
    gnb = getattr(task, "gnb_gradient", None)
    if gnb is None:
        raise UnsupportedProblemError(
            f"{type(task).__name__} has no categorical/Bernoulli output to sample from"
        )
    return gnb(params, microbatch, rng)
