from .common import (
    BatchSplit,
    StepResult,
    Variant,
    apply_update,
    clip_global_norm,
    lr_schedule,
    norm_clip_update,
    split_batch,
)
from .adamw import AdamWState, LooConfig, adamw_loo_jensen_step, adamw_step, loo_mean
from .sophia import SophiaState, sophia_gnb_sample, sophia_step
from .shampoo import ShampooState, shampoo_step

__all__ = [
    "AdamWState",
    "BatchSplit",
    "LooConfig",
    "ShampooState",
    "SophiaState",
    "StepResult",
    "Variant",
    "adamw_loo_jensen_step",
    "adamw_step",
    "apply_update",
    "clip_global_norm",
    "loo_mean",
    "lr_schedule",
    "norm_clip_update",
    "shampoo_step",
    "sophia_gnb_sample",
    "sophia_step",
    "split_batch",
]
