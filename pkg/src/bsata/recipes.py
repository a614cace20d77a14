"""Named configurations.

``SYNTHETIC`` is the desk-scale recipe for the 16-identity synthetic set:
toy encoders at d=64 on 64x32 inputs, tau=0.07, default loss weights, and
longer schedules than the full-scale defaults because an epoch on that set
is only two P x K batches.
"""
from __future__ import annotations

from .config import ExperimentConfig, build_config

SYNTHETIC = {
    "model.embed_dim": "64",
    "model.input_size": "64,32",
    "loss.temperature": "0.07",
    "train.aug_pad": "2",
    "train.stage1_epochs": "600",
    "train.base_lr_stage1": "3e-2",
    "train.precompute_stage1_features": "true",
    "train.stage2_epochs": "600",
    "train.base_lr_stage2": "6e-3",
    "train.warmup_epochs": "10",
    "train.decay_epochs": "400,520",
}

# a few steps of each stage; for plumbing tests and replay checks
SMOKE = dict(SYNTHETIC, **{
    "train.stage1_epochs": "2",
    "train.stage2_epochs": "2",
    "train.warmup_epochs": "1",
    "train.decay_epochs": "",
})


def synthetic_config(seed: int = 0, overrides: dict | None = None,
                     base: dict = SYNTHETIC) -> ExperimentConfig:
    layer = dict(base, seed=str(seed))
    layer.update({k: str(v) for k, v in (overrides or {}).items()})
    return build_config(layer)


def recipe_text(recipe: dict) -> str:
    return "".join(f"{k} = {v}\n" for k, v in sorted(recipe.items()))
