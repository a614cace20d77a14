"""Two-stage optimisation.

Stage 1 learns the prompt tokens against a frozen visual encoder; stage 2
freezes the prompts (and the prototype bank built from them) and trains the
visual encoder, shape encoder and fresh identity classifiers.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from . import checkpoint as ckpt
from .config import ExperimentConfig, TrainConfig
from .data_io import AugmentPolicy, augment
from .datamodel import Batch, ImageRecord, Modality, epoch_iterator
from .encoders import (
    BSaTaModel,
    ModelConfig,
    TextPrototypeBank,
    encode_identities,
    records_to_tensor,
)
from .errors import ManifestMismatch, NonFiniteLoss, OutOfRange
from .losses import (
    LossReport,
    LossWeights,
    bidirectional_contrastive,
    cosine_sim,
    dcc,
    i2tce,
    id_loss,
    sim_asymmetry,
    stage1_loss,
    stage2_loss,
    tvcr,
    wrt_loss,
)

log = logging.getLogger(__name__)


# -- schedules ----------------------------------------------------------------

def cosine_schedule(epoch: int, total_epochs: int, base_lr: float) -> float:
    if not 0 <= epoch < total_epochs:
        raise OutOfRange(f"epoch {epoch} outside [0, {total_epochs})")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))


def warmup_step_schedule(epoch: int, cfg: TrainConfig) -> float:
    if not 0 <= epoch < cfg.stage2_epochs:
        raise OutOfRange(f"epoch {epoch} outside [0, {cfg.stage2_epochs})")
    if epoch < cfg.warmup_epochs:
        return cfg.warmup_start + (cfg.base_lr_stage2 - cfg.warmup_start) * epoch / cfg.warmup_epochs
    lr = cfg.base_lr_stage2
    for milestone in cfg.decay_epochs:
        if epoch >= milestone:
            lr *= cfg.decay_factor
    return lr


# -- seeds and freezing -------------------------------------------------------

@dataclass(frozen=True)
class SeedPlan:
    """Independent streams fanned out from one master seed."""

    master: int
    sampler: int
    init: int
    augment: int
    classifier: int

    @classmethod
    def from_master(cls, master: int) -> "SeedPlan":
        kids = np.random.SeedSequence(master).spawn(4)
        s = [int(k.generate_state(1)[0]) for k in kids]
        return cls(master, *s)

    def as_dict(self) -> dict:
        return {"master": self.master, "sampler": self.sampler, "init": self.init,
                "augment": self.augment, "classifier": self.classifier}


def build_model(cfg: ExperimentConfig, num_identities: Optional[int] = None,
                seeds: Optional[SeedPlan] = None) -> BSaTaModel:
    """Model whose initialisation stream comes from the master seed."""
    seeds = seeds or SeedPlan.from_master(cfg.seed)
    n = num_identities if num_identities is not None else cfg.model.num_identities
    return BSaTaModel(replace(cfg.model, num_identities=n, init_seed=seeds.init))


STAGE1_TRAINABLE = ("prompts.",)
STAGE2_TRAINABLE = ("backbone.", "classifier_appearance.", "classifier_shape.")


def freeze_mask(model: BSaTaModel, stage: int) -> dict:
    prefixes = STAGE1_TRAINABLE if stage == 1 else STAGE2_TRAINABLE
    return {name: name.startswith(prefixes) for name, _ in model.named_parameters()}


def apply_freeze_mask(model: BSaTaModel, mask: dict):
    for name, p in model.named_parameters():
        p.requires_grad_(mask[name])


def param_snapshot(model: torch.nn.Module, prefixes: Optional[tuple] = None) -> dict:
    return {
        n: p.detach().clone()
        for n, p in model.named_parameters()
        if prefixes is None or n.startswith(prefixes)
    }


def _make_optimizer(model, lr, tcfg: TrainConfig):
    params = [p for p in model.parameters() if p.requires_grad]
    return torch.optim.Adam(params, lr=lr, betas=(tcfg.adam_beta1, tcfg.adam_beta2),
                            weight_decay=tcfg.weight_decay)


def _set_lr(optimizer, lr):
    for g in optimizer.param_groups:
        g["lr"] = lr


# -- batch preparation --------------------------------------------------------

def _augment_batch(batch: Batch, cfg: ExperimentConfig, seed_base) -> Batch:
    t = cfg.train
    if not t.augment:
        return batch
    policy = AugmentPolicy(size=cfg.model.input_size, flip=t.aug_flip, pad=t.aug_pad)
    vis = [augment(r, policy, list(seed_base) + [0, i]) for i, r in enumerate(batch.visible)]
    ir = [augment(r, policy, list(seed_base) + [1, i]) for i, r in enumerate(batch.infrared)]
    return Batch(vis, ir, batch.pairing)


@dataclass
class BatchFeatures:
    labels: torch.Tensor
    a_vis: torch.Tensor
    a_ir: torch.Tensor
    s_vis: Optional[torch.Tensor] = None
    s_ir: Optional[torch.Tensor] = None


def batch_features(model: BSaTaModel, batch: Batch, use_shape: bool) -> BatchFeatures:
    """Features with rows aligned by the batch pairing (row i of each half is one pair)."""
    bb = model.backbone
    size = model.cfg.input_size
    dt = next(bb.parameters()).dtype
    pairs = sorted(batch.pairing)
    visible = [batch.visible[i] for i, _ in pairs]
    infrared = [batch.infrared[j] for _, j in pairs]
    xv = records_to_tensor(visible, size, "pixels", dt)
    xr = records_to_tensor(infrared, size, "pixels", dt)
    out = BatchFeatures(
        labels=torch.as_tensor([r.identity for r in visible]),
        a_vis=bb.appearance(xv, Modality.VISIBLE),
        a_ir=bb.appearance(xr, Modality.INFRARED),
    )
    if use_shape:
        hv = records_to_tensor(visible, size, "shape_map", dt)
        hr = records_to_tensor(infrared, size, "shape_map", dt)
        out.s_vis = bb.shape(hv, Modality.VISIBLE)
        out.s_ir = bb.shape(hr, Modality.INFRARED)
    return out


def _check_finite(report: LossReport, step: int):
    if not report.is_finite():
        raise NonFiniteLoss(step, report.as_record())


# -- stage 1 ------------------------------------------------------------------

def stage1_parts(model: BSaTaModel, feats: BatchFeatures, cfg: ExperimentConfig) -> dict:
    t, tau = cfg.train, cfg.loss.temperature
    ids, inverse = torch.unique(feats.labels, return_inverse=True)
    parts = {}
    if t.use_shape:
        texts = encode_identities(model.prompts, model.text_encoder, ids, "shape")[inverse]
        parts["s_bcon"] = bidirectional_contrastive(feats.s_vis, feats.s_ir, texts, feats.labels, tau)
        if t.use_tvcr:
            parts["s_tvcr"] = tvcr(feats.s_vis, feats.s_ir, texts)
    if t.use_appearance:
        texts = encode_identities(model.prompts, model.text_encoder, ids, "person")[inverse]
        parts["a_bcon"] = bidirectional_contrastive(feats.a_vis, feats.a_ir, texts, feats.labels, tau)
        if t.use_tvcr:
            parts["a_tvcr"] = tvcr(feats.a_vis, feats.a_ir, texts)
    return parts


@dataclass
class StageResult:
    history: list = field(default_factory=list)
    bank: Optional[TextPrototypeBank] = None
    optimizer: Optional[torch.optim.Optimizer] = None


def run_stage1(model: BSaTaModel, data: Sequence[ImageRecord], cfg: ExperimentConfig,
               seeds: Optional[SeedPlan] = None,
               on_step: Optional[Callable[[dict], None]] = None) -> StageResult:
    """Optimise prompt tokens only; returns the history and the frozen prototype bank."""
    seeds = seeds or SeedPlan.from_master(cfg.seed)
    t = cfg.train
    apply_freeze_mask(model, freeze_mask(model, 1))
    model.eval()
    opt = _make_optimizer(model, t.base_lr_stage1, t)
    history, step = [], 0
    cache = None
    for epoch in range(t.stage1_epochs):
        lr = cosine_schedule(epoch, t.stage1_epochs, t.base_lr_stage1)
        _set_lr(opt, lr)
        if t.precompute_stage1_features and cache is None:
            cache = _feature_cache(model, data, t.use_shape)
        for b, batch in enumerate(epoch_iterator(data, t.P, t.K, seeds.sampler, epoch)):
            if cache is not None:
                feats = _cached_features(cache, batch)
            else:
                batch = _augment_batch(batch, cfg, [seeds.augment, 1, epoch, b])
                with torch.no_grad():
                    feats = batch_features(model, batch, t.use_shape)
            report = stage1_loss(stage1_parts(model, feats, cfg), cfg.loss)
            _check_finite(report, step)
            opt.zero_grad(set_to_none=True)
            report.total.backward()
            opt.step()
            rec = {"stage": 1, "epoch": epoch, "step": step, "lr": lr, **report.as_record()}
            history.append(rec)
            if on_step:
                on_step(rec)
            step += 1
    bank = model.prototype_bank()
    return StageResult(history, bank, opt)


def _feature_cache(model, data, use_shape):
    cache = {}
    with torch.no_grad():
        for i in range(0, len(data), 128):
            chunk = data[i:i + 128]
            for mod in (Modality.VISIBLE, Modality.INFRARED):
                recs = [r for r in chunk if r.modality is mod]
                if not recs:
                    continue
                x = records_to_tensor(recs, model.cfg.input_size)
                a = model.backbone.appearance(x, mod)
                s = model.backbone.shape(records_to_tensor(recs, model.cfg.input_size, "shape_map"),
                                         mod) if use_shape else None
                for j, r in enumerate(recs):
                    cache[id(r)] = (a[j], None if s is None else s[j])
    return cache


def _cached_features(cache, batch: Batch) -> BatchFeatures:
    pairs = sorted(batch.pairing)
    visible = [batch.visible[i] for i, _ in pairs]
    infrared = [batch.infrared[j] for _, j in pairs]

    def stack(recs, k):
        return torch.stack([cache[id(r)][k] for r in recs])

    use_shape = cache[id(visible[0])][1] is not None
    return BatchFeatures(
        torch.as_tensor([r.identity for r in visible]),
        stack(visible, 0), stack(infrared, 0),
        stack(visible, 1) if use_shape else None,
        stack(infrared, 1) if use_shape else None,
    )


# -- stage 2 ------------------------------------------------------------------

def stage2_parts(model: BSaTaModel, bank: TextPrototypeBank, feats: BatchFeatures,
                 cfg: ExperimentConfig) -> dict:
    t, tau = cfg.train, cfg.loss.temperature
    labels = feats.labels
    both = torch.cat([labels, labels])
    a_all = torch.cat([feats.a_vis, feats.a_ir])
    parts = {
        "id": id_loss(a_all, both, model.classifier_appearance, t.label_smoothing),
        "wrt": wrt_loss(a_all, both),
    }
    if t.use_shape:
        s_all = torch.cat([feats.s_vis, feats.s_ir])
        parts["id"] = parts["id"] + id_loss(s_all, both, model.classifier_shape, t.label_smoothing)
        parts["wrt"] = parts["wrt"] + wrt_loss(s_all, both)
        parts["s_i2tce"] = i2tce(feats.s_vis, feats.s_ir, bank.shape, labels, tau=tau)
        if t.use_dcc:
            parts["s_dcc"] = dcc(feats.s_vis, feats.s_ir, bank.shape, tau=tau)
    if t.use_appearance:
        parts["a_i2tce"] = i2tce(feats.a_vis, feats.a_ir, bank.appearance, labels, tau=tau)
        if t.use_dcc:
            parts["a_dcc"] = dcc(feats.a_vis, feats.a_ir, bank.appearance, tau=tau)
    return parts


def run_stage2(model: BSaTaModel, bank: TextPrototypeBank, data: Sequence[ImageRecord],
               cfg: ExperimentConfig, seeds: Optional[SeedPlan] = None,
               on_step: Optional[Callable[[dict], None]] = None) -> StageResult:
    seeds = seeds or SeedPlan.from_master(cfg.seed)
    t = cfg.train
    model.reset_classifiers(seeds.classifier)
    apply_freeze_mask(model, freeze_mask(model, 2))
    model.train()
    opt = _make_optimizer(model, t.warmup_start, t)
    history, step = [], 0
    for epoch in range(t.stage2_epochs):
        lr = warmup_step_schedule(epoch, t)
        _set_lr(opt, lr)
        for b, batch in enumerate(epoch_iterator(data, t.P, t.K, seeds.sampler, 10_000 + epoch)):
            batch = _augment_batch(batch, cfg, [seeds.augment, 2, epoch, b])
            feats = batch_features(model, batch, t.use_shape)
            report = stage2_loss(stage2_parts(model, bank, feats, cfg), cfg.loss)
            _check_finite(report, step)
            opt.zero_grad(set_to_none=True)
            report.total.backward()
            opt.step()
            rec = {"stage": 2, "epoch": epoch, "step": step, "lr": lr, **report.as_record()}
            history.append(rec)
            if on_step:
                on_step(rec)
            step += 1
    model.eval()
    return StageResult(history, bank, opt)


# -- measurements -------------------------------------------------------------

def paired_batch(records: Sequence[ImageRecord]) -> Batch:
    """Pair visible/infrared records sharing (identity, index)."""
    ir = {(r.identity, r.index): r for r in records if r.modality is Modality.INFRARED}
    vis = [r for r in records if r.modality is Modality.VISIBLE and (r.identity, r.index) in ir]
    vis.sort(key=lambda r: (r.identity, r.index))
    return Batch(vis, [ir[(r.identity, r.index)] for r in vis])


@torch.no_grad()
def measure_dcc(model: BSaTaModel, bank: TextPrototypeBank, records, tau: float,
                use_shape: bool = True) -> float:
    model.eval()
    feats = batch_features(model, paired_batch(records), use_shape)
    total = dcc(feats.a_vis, feats.a_ir, bank.appearance, tau=tau)
    if use_shape:
        total = total + dcc(feats.s_vis, feats.s_ir, bank.shape, tau=tau)
    return float(total)


@torch.no_grad()
def measure_asymmetry(model: BSaTaModel, records, channel: str = "shape") -> float:
    """Mean squared asymmetry of the per-sample image-text similarity matrices,
    averaged over the two modalities."""
    model.eval()
    batch = paired_batch(records)
    feats = batch_features(model, batch, channel == "shape")
    kind = "shape" if channel == "shape" else "person"
    texts = encode_identities(model.prompts, model.text_encoder, feats.labels, kind)
    v_vis, v_ir = (feats.s_vis, feats.s_ir) if channel == "shape" else (feats.a_vis, feats.a_ir)
    return 0.5 * (sim_asymmetry(cosine_sim(v_vis, texts)) + sim_asymmetry(cosine_sim(v_ir, texts)))


# -- checkpoints --------------------------------------------------------------

def model_structure(model: BSaTaModel) -> dict:
    return model.cfg.structure()


def save_checkpoint(path, model: BSaTaModel, bank: Optional[TextPrototypeBank] = None,
                    optimizer: Optional[torch.optim.Optimizer] = None, meta: Optional[dict] = None):
    tensors = {f"model.{n}": p for n, p in model.named_parameters()}
    if bank is not None:
        tensors["bank.shape"] = bank.shape
        tensors["bank.appearance"] = bank.appearance
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        tensors.update(ckpt.optimizer_tensors(optimizer, names))
    meta = dict(meta or {})
    meta.setdefault("model_config", _model_config_dict(model.cfg))
    meta["has_bank"] = bank is not None
    meta["bank_normalized"] = bool(bank.normalized) if bank is not None else None
    ckpt.save_tensors(path, tensors, model_structure(model), meta)


def _model_config_dict(cfg: ModelConfig) -> dict:
    d = dict(cfg.__dict__)
    d["input_size"] = list(cfg.input_size)
    d["trunk_channels"] = list(cfg.trunk_channels)
    return d


def load_checkpoint(path, expected: Optional[ModelConfig] = None):
    """Return (model, bank or None, tensors, manifest)."""
    tensors, manifest = ckpt.load_tensors(path, expected.structure() if expected else None)
    mc = dict(manifest["meta"]["model_config"])
    cfg = ModelConfig(**mc)
    if cfg.structure() != manifest["config"]:
        raise ManifestMismatch(f"{path}: meta model config disagrees with manifest")
    model = BSaTaModel(cfg)
    ckpt.load_into(model, tensors, "model.")
    bank = None
    if manifest["meta"].get("has_bank"):
        bank = TextPrototypeBank(tensors["bank.shape"], tensors["bank.appearance"],
                                 bool(manifest["meta"].get("bank_normalized")))
    return model, bank, tensors, manifest


def checkpoint_roundtrip(model: BSaTaModel, path, bank=None):
    save_checkpoint(path, model, bank)
    return load_checkpoint(path, model.cfg)


def write_metrics(path, records: Sequence[dict], mode: str = "w"):
    with open(path, mode) as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")
