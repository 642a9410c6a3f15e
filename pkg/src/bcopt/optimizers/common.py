"""Shared optimizer machinery: ablation variants, batch splitting, schedule."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigurationError, InvalidInputError, PoisonedStepError


class Variant(enum.Enum):
    """The four-way ablation of the correction mechanisms.

    STD: same-batch numerator and denominator, plain inverse.
    CROSSFIT: disjoint numerator/denominator groups, plain inverse.
    INVERSE_ONLY: same-batch groups, delta-corrected inverse.
    FULL: disjoint groups and delta-corrected inverse.
    """

    STD = "std"
    CROSSFIT = "crossfit"
    INVERSE_ONLY = "inverse"
    FULL = "full"

    @property
    def corrected(self) -> bool:
        return self in (Variant.INVERSE_ONLY, Variant.FULL)

    @property
    def split(self) -> bool:
        return self in (Variant.CROSSFIT, Variant.FULL)

    @classmethod
    def parse(cls, name: str) -> "Variant":
        try:
            return cls(name.strip().lower())
        except ValueError:
            valid = ", ".join(v.value for v in cls)
            raise ConfigurationError(f"unknown variant {name!r} (valid: {valid})")


@dataclass(frozen=True)
class BatchSplit:
    """Numerator group A, denominator group B, and B's microbatches.

    A and B are disjoint for split variants; A == B == the whole batch
    otherwise. The partition is deterministic given (step, seed).
    """

    group_a: np.ndarray
    group_b: np.ndarray
    microbatches: tuple = field(default_factory=tuple)


def split_batch(batch_indices, variant: Variant, m: int, step: int, seed: int) -> BatchSplit:
    """Deterministically split one step's batch per the variant's policy.

    Split variants get an even A/B halving of a seeded permutation; the
    denominator group is partitioned into m microbatches. Same-batch
    variants keep A = B = the whole batch and partition it directly.
    """
    idx = np.asarray(batch_indices)
    n = idx.size
    if m < 2:
        raise ConfigurationError(f"microbatch count must be >= 2, got {m}")
    if variant.split and n < 2 * m:
        raise ConfigurationError(
            f"batch of {n} too small to split into two groups with {m} microbatches"
        )
    if not variant.split and n < m:
        raise ConfigurationError(f"batch of {n} too small for {m} microbatches")
    rng = np.random.default_rng([abs(int(seed)), int(step)])
    perm = idx[rng.permutation(n)]
    if variant.split:
        half = n // 2
        group_a = perm[:half]
        group_b = perm[half:]
        micro = tuple(np.array_split(group_b, m))
    else:
        group_a = idx
        group_b = idx
        # same-batch variants still draw microbatches from the shuffled order
        micro = tuple(np.array_split(perm, m))
    return BatchSplit(group_a=group_a, group_b=group_b, microbatches=micro)


@dataclass(frozen=True)
class StepResult:
    """One optimizer step's update direction plus correction diagnostics."""

    update: np.ndarray
    clamp_count: int = 0
    correction_l2: float = 0.0
    denom_mean: float = 0.0
    denom_var: float = 0.0
    used_cached_operators: bool = False
    eigen_fallback: bool = False


def lr_schedule(step: int, total: int, warmup: int, peak: float,
                floor_fraction: float = 0.0) -> float:
    """Linear warmup to ``peak`` then cosine decay to ``floor_fraction * peak``."""
    if warmup > total:
        raise ConfigurationError(f"warmup {warmup} exceeds total steps {total}")
    if not 0 <= step <= total:
        raise ConfigurationError(f"step {step} outside [0, {total}]")
    if step < warmup:
        return peak * step / warmup
    if total == warmup:
        return peak
    progress = (step - warmup) / (total - warmup)
    cosine = 0.5 * (1.0 + np.cos(np.pi * progress))
    return peak * (floor_fraction + (1.0 - floor_fraction) * cosine)


def clip_global_norm(grad: np.ndarray, max_norm: float) -> np.ndarray:
    """Scale a gradient down to the given global L2 norm. 0 disables."""
    if max_norm <= 0:
        return grad
    norm = float(np.linalg.norm(grad))
    if norm > max_norm:
        return grad * (max_norm / norm)
    return grad


def norm_clip_update(update: np.ndarray, threshold: float) -> np.ndarray:
    if threshold > 0:
        norm = float(np.linalg.norm(update))
        if norm > threshold:
            return update * (threshold / norm)
    return update


def apply_update(params: np.ndarray, update: np.ndarray, lr: float,
                 weight_decay: float = 0.0) -> np.ndarray:
    """Decoupled weight decay then the adaptive step:
    theta <- (theta - lr*wd*theta) - lr*update."""
    if params.shape != update.shape:
        raise InvalidInputError(
            f"params shape {params.shape} != update shape {update.shape}"
        )
    decayed = params - lr * weight_decay * params
    return decayed - lr * update


def require_finite(*arrays) -> None:
    for arr in arrays:
        if arr is None:
            continue
        if not np.all(np.isfinite(arr)):
            raise PoisonedStepError("gradient contains NaN or Inf; step refused")
