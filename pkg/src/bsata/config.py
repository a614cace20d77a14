"""Experiment configuration and the flat ``section.key = value`` file format.

Example::

    # comments start with '#'
    train.stage1_epochs = 60
    loss.lambda1 = 0.04
    model.embed_dim = 64
    train.decay_epochs = 40,70
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .encoders import ModelConfig
from .losses import LossWeights


@dataclass
class TrainConfig:
    stage1_epochs: int = 60
    stage2_epochs: int = 120
    base_lr_stage1: float = 3e-4
    base_lr_stage2: float = 3e-4
    warmup_start: float = 3e-6
    warmup_epochs: int = 10
    decay_epochs: tuple = (40, 70)
    decay_factor: float = 0.1
    weight_decay: float = 4e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    P: int = 8
    K: int = 4
    allow_replacement: bool = False
    use_tvcr: bool = True
    use_dcc: bool = True
    use_shape: bool = True
    use_appearance: bool = True
    label_smoothing: float = 0.0
    precompute_stage1_features: bool = False
    augment: bool = True
    aug_flip: bool = True
    aug_pad: int = 10

    def __post_init__(self):
        self.decay_epochs = tuple(int(e) for e in self.decay_epochs)
        if self.stage1_epochs <= 0 or self.stage2_epochs <= 0:
            raise ValueError("epochs must be positive")
        for name in ("base_lr_stage1", "base_lr_stage2", "warmup_start"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if any(b <= a for a, b in zip(self.decay_epochs, self.decay_epochs[1:])):
            raise ValueError("decay_epochs must be strictly increasing")
        if self.P < 1 or self.K < 1:
            raise ValueError("P and K must be positive")


@dataclass
class DataConfig:
    root: str = ""
    kind: str = "auto"
    trial: int = 1


@dataclass
class ExperimentConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    data: DataConfig = field(default_factory=DataConfig)

    def to_flat(self) -> dict:
        out = {"seed": self.seed}
        for section in ("model", "train", "loss", "data"):
            for k, v in dataclasses.asdict(getattr(self, section)).items():
                if (section, k) not in DERIVED:
                    out[f"{section}.{k}"] = v
        return out

    def to_text(self) -> str:
        return "".join(f"{k} = {format_value(v)}\n" for k, v in sorted(self.to_flat().items()))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_flat(), sort_keys=True, default=list).encode()).hexdigest()


SECTIONS = ("model", "train", "loss", "data")
# filled from the master seed at model construction, never set directly
DERIVED = {("model", "init_seed")}


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(format_value(x) for x in v)
    if v is None:
        return "none"
    return repr(v) if isinstance(v, float) else str(v)


def _parse_scalar(text: str, like):
    t = text.strip()
    if isinstance(like, bool):
        if t.lower() in ("true", "1", "yes", "on"):
            return True
        if t.lower() in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if isinstance(like, int):
        return int(t)
    if isinstance(like, float):
        return float(t)
    if like is None:
        if t.lower() == "none":
            return None
        try:
            return int(t)
        except ValueError:
            return t
    return t


def parse_value(text: str, like):
    if isinstance(like, tuple):
        proto = like[0] if like else 0
        return tuple(_parse_scalar(p, proto) for p in text.split(",") if p.strip())
    return _parse_scalar(text, like)


def _defaults() -> dict:
    return ExperimentConfig().to_flat()


def known_keys() -> list:
    return sorted(_defaults())


def parse_flat(text: str) -> dict:
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected 'key = value', got {raw!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def build_config(*layers: dict) -> ExperimentConfig:
    """Merge string-valued flat layers (later layers win) over the defaults."""
    defaults = _defaults()
    merged = dict(defaults)
    # token_dim follows embed_dim unless some layer sets it
    merged["model.token_dim"] = None
    for layer in layers:
        for k, v in layer.items():
            if k not in defaults:
                raise KeyError(f"unknown config key {k!r}")
            merged[k] = parse_value(v, defaults[k]) if isinstance(v, str) else v
    return from_flat(merged)


def from_flat(flat: dict) -> ExperimentConfig:
    sections = {s: {} for s in SECTIONS}
    seed = flat.get("seed", 0)
    for k, v in flat.items():
        if k == "seed":
            continue
        s, name = k.split(".", 1)
        sections[s][name] = tuple(v) if isinstance(v, list) else v
    return ExperimentConfig(
        seed=int(seed),
        model=ModelConfig(**sections["model"]),
        train=TrainConfig(**sections["train"]),
        loss=LossWeights(**sections["loss"]),
        data=DataConfig(**sections["data"]),
    )


def load_config(path=None, overrides: dict | None = None, env=None) -> ExperimentConfig:
    """Defaults < BSATA_SEED env < config file < overrides."""
    env = os.environ if env is None else env
    layers = []
    if env.get("BSATA_SEED"):
        layers.append({"seed": env["BSATA_SEED"]})
    if path is not None:
        layers.append(parse_flat(Path(path).read_text()))
    if overrides:
        layers.append(overrides)
    return build_config(*layers)
