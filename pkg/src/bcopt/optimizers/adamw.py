"""Bias-corrected AdamW.

The numerator first moment comes from the A group, the second moment from
the B group's microbatches. Corrected variants treat the square-root
denominator as the preconditioning statistic: per-microbatch hypothetical
denominators p_j = sqrt(vhat_j) give a variance of the mean denominator,
and the update divides by the delta-corrected inverse instead of
1/(sqrt(vhat) + eps).

The leave-one-out variant avoids the half-batch denominator penalty of a
two-fold split: fold r keeps gradient g_r in the numerator and builds the
denominator from the leave-one-out mean (m*gbar - g_r)/(m - 1), so each
fold's denominator sees m-1 of the m microbatches. A per-fold Jensen
correction subtracts var_fold(p_r) * mhat_r / p_r^3 with a sign-preserving
clamp, and the fold updates are averaged.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigurationError, InvalidInputError
from ..estimators import MeanVar, MicrobatchDiagSet, corrected_diag_inverse, mean_and_var_of_mean
from .common import StepResult, Variant, norm_clip_update, require_finite

POST_EMA = "post_ema"
PRE_EMA = "pre_ema"


@dataclass
class AdamWState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    clip: float = 0.0  # L2 norm clip on the final update; 0 disables
    inverse_timing: str = POST_EMA

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigurationError("betas must lie in [0, 1)")
        if self.eps <= 0.0:
            raise ConfigurationError("eps must be positive")
        if self.inverse_timing not in (POST_EMA, PRE_EMA):
            raise ConfigurationError(f"unknown inverse timing {self.inverse_timing!r}")
        self.m = np.asarray(self.m, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        if np.any(self.v < 0):
            raise InvalidInputError("second moment must be nonnegative")

    @classmethod
    def init(cls, dim: int, **hyper) -> "AdamWState":
        return cls(m=np.zeros(dim), v=np.zeros(dim), **hyper)


def adamw_step(state: AdamWState, grad_a: np.ndarray,
               microbatch_grads_b: np.ndarray, variant: Variant) -> StepResult:
    """One AdamW step. Returns the update direction; weight decay and the
    learning rate are applied by the caller via ``apply_update``.

    State is committed only after all inputs validate, so a refused
    (poisoned) step leaves it untouched.
    """
    grad_a = np.asarray(grad_a, dtype=np.float64)
    grads_b = np.asarray(microbatch_grads_b, dtype=np.float64)
    if grads_b.ndim != 2 or grad_a.shape != grads_b.shape[1:]:
        raise InvalidInputError(
            f"expected (m, d) microbatch grads matching grad shape {grad_a.shape}, "
            f"got {grads_b.shape}"
        )
    require_finite(grad_a, grads_b)

    t = state.t + 1
    with np.errstate(over="ignore"):
        m_new = state.beta1 * state.m + (1.0 - state.beta1) * grad_a
        sq = grads_b**2
    # squared statistics may overflow on extreme finite gradients; refuse
    # the step rather than propagate infs into state
    require_finite(sq)
    v_new = state.beta2 * state.v + (1.0 - state.beta2) * sq.mean(axis=0)
    mhat = m_new / (1.0 - state.beta1**t)
    vhat = v_new / (1.0 - state.beta2**t)

    # Hypothetical per-microbatch denominators, for the correction and for
    # the denominator diagnostics recorded with every variant.
    if state.inverse_timing == POST_EMA:
        v_j = state.beta2 * state.v + (1.0 - state.beta2) * sq
        p_j = np.sqrt(v_j / (1.0 - state.beta2**t))
        center = None  # use the mean of the hypotheticals
    else:
        p_j = np.abs(grads_b)  # pre-EMA: spread of the raw microbatch statistic
        center = np.sqrt(vhat)

    mv = mean_and_var_of_mean(MicrobatchDiagSet(p_j))
    if center is not None:
        mv = MeanVar(mean=center, var_of_mean=mv.var_of_mean)

    if variant.corrected:
        ci = corrected_diag_inverse(mv, damping=state.eps)
        denom_inv = ci.values
        clamp_count, correction_l2 = ci.clamp_count, ci.correction_l2
    else:
        denom_inv = 1.0 / (np.sqrt(vhat) + state.eps)
        clamp_count, correction_l2 = 0, 0.0

    update = norm_clip_update(mhat * denom_inv, state.clip)
    require_finite(update)

    state.m = m_new
    state.v = v_new
    state.t = t
    return StepResult(
        update=update,
        clamp_count=clamp_count,
        correction_l2=correction_l2,
        denom_mean=float(mv.mean.mean()),
        denom_var=float(mv.var_of_mean.mean()),
    )


@dataclass(frozen=True)
class LooConfig:
    """Leave-one-out fold setup with per-parameter-class routing.

    ``routing`` maps a parameter class name to "loo" or "standard";
    embedding-style parameters stay on the standard path.
    """

    m: int
    jensen_enabled: bool = True
    routing: dict = field(default_factory=lambda: {"dense": "loo", "embedding": "standard"})

    def __post_init__(self):
        if self.m < 2:
            raise ConfigurationError(f"fold count must be >= 2, got {self.m}")
        for cls, path in self.routing.items():
            if path not in ("loo", "standard"):
                raise ConfigurationError(f"routing[{cls!r}] must be 'loo' or 'standard'")

    def route(self, param_class: str) -> str:
        if param_class not in self.routing:
            raise ConfigurationError(f"no routing for parameter class {param_class!r}")
        return self.routing[param_class]


def loo_mean(microbatch_grads: np.ndarray) -> np.ndarray:
    """Leave-one-out means (m*gbar - g_r)/(m-1), one row per held-out fold."""
    g = np.asarray(microbatch_grads, dtype=np.float64)
    m = g.shape[0]
    if m < 2:
        raise ConfigurationError(f"need >= 2 folds, got {m}")
    return (m * g.mean(axis=0) - g) / (m - 1.0)


def adamw_loo_jensen_step(state: AdamWState, microbatch_grads: np.ndarray,
                          loo: LooConfig, param_class: str = "dense") -> StepResult:
    """LOO cross-fit AdamW step with the per-fold Jensen inverse correction.

    Parameters routed to the standard path get a plain same-batch AdamW
    update instead. The shared first-moment EMA commits with the full-batch
    mean gradient; fold gradients enter only the current-step innovation.
    """
    g = np.asarray(microbatch_grads, dtype=np.float64)
    if g.ndim != 2:
        raise InvalidInputError(f"expected (m, d) fold gradients, got shape {g.shape}")
    if g.shape[0] != loo.m:
        raise ConfigurationError(
            f"got {g.shape[0]} fold gradients but config expects m={loo.m}"
        )
    require_finite(g)

    if loo.route(param_class) == "standard":
        return adamw_step(state, g.mean(axis=0), g, Variant.STD)

    m = loo.m
    t = state.t + 1
    gbar = g.mean(axis=0)
    g_loo = loo_mean(g)
    with np.errstate(over="ignore"):
        s_loo = g_loo**2
    require_finite(s_loo)
    v_r = state.beta2 * state.v + (1.0 - state.beta2) * s_loo
    p_r = np.sqrt(v_r / (1.0 - state.beta2**t)) + state.eps
    m_r = state.beta1 * state.m + (1.0 - state.beta1) * g
    mhat_r = m_r / (1.0 - state.beta1**t)

    raw = mhat_r / p_r
    clamp_count = 0
    correction_l2 = 0.0
    pbar = p_r.mean(axis=0)
    var_fold = ((p_r - pbar) ** 2).sum(axis=0) / (m - 1.0)
    if loo.jensen_enabled:
        corrected = raw - var_fold * mhat_r / p_r**3
        # Sign-preserving clamp: a fold term may shrink to zero but never
        # flip against its uncorrected direction.
        clamped = np.where(raw >= 0.0, np.maximum(corrected, 0.0),
                           np.minimum(corrected, 0.0))
        clamp_count = int(np.count_nonzero(clamped != corrected))
        update = clamped.mean(axis=0)
        correction_l2 = float(np.linalg.norm((var_fold * mhat_r / p_r**3).mean(axis=0)))
    else:
        update = raw.mean(axis=0)

    update = norm_clip_update(update, state.clip)
    require_finite(update)

    state.m = state.beta1 * state.m + (1.0 - state.beta1) * gbar
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * s_loo.mean(axis=0)
    state.t = t
    return StepResult(
        update=update,
        clamp_count=clamp_count,
        correction_l2=correction_l2,
        denom_mean=float(pbar.mean()),
        denom_var=float(var_fold.mean()),
    )
