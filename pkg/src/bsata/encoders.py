"""Visual backbone, text encoder and learnable prompt bank.

The visual path is two modality-specific stems feeding a shared trunk; the
shape branch reuses the stems and every trunk stage but the last, which is
replaced by a separate shape encoder initialised as a copy of that stage.
The text encoder is a small frozen attention block over token embeddings,
standing in for a pretrained one.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .datamodel import Batch, ImageRecord, Modality
from .errors import MissingShapeMap, ShapeMismatch, UnknownIdentity

VOCAB = ("a", "photo", "of", "shape", "person")
PREFIX = ("a", "photo", "of", "a")
SUFFIX = {"shape": "shape", "person": "person"}


@dataclass
class ModelConfig:
    num_identities: int = 0
    embed_dim: int = 64
    token_dim: Optional[int] = None
    input_size: tuple = (288, 144)
    stem_channels: int = 16
    trunk_channels: tuple = (32,)
    n_shape_ctx: int = 4
    n_app_ctx: int = 4
    shape_route: str = "full_trunk"
    prompt_init: str = "random"
    normalize_bank: bool = True
    init_seed: int = 0

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        self.trunk_channels = tuple(int(v) for v in self.trunk_channels)
        if self.token_dim is None:
            self.token_dim = self.embed_dim
        if self.n_shape_ctx < 1 or self.n_app_ctx < 1:
            raise ValueError("need at least one learnable context token per prompt")
        if self.shape_route not in ("full_trunk", "stems_only"):
            raise ValueError(f"unknown shape_route {self.shape_route!r}")
        if self.prompt_init not in ("random", "shared"):
            raise ValueError(f"unknown prompt_init {self.prompt_init!r}")

    def structure(self) -> dict:
        """Fields that determine parameter shapes; hashed into checkpoints."""
        return {
            "num_identities": self.num_identities,
            "embed_dim": self.embed_dim,
            "token_dim": self.token_dim,
            "input_size": list(self.input_size),
            "stem_channels": self.stem_channels,
            "trunk_channels": list(self.trunk_channels),
            "n_shape_ctx": self.n_shape_ctx,
            "n_app_ctx": self.n_app_ctx,
            "shape_route": self.shape_route,
        }


def _conv(c_in, c_out, stride):
    conv = nn.Conv2d(c_in, c_out, 3, stride, 1)
    # zero biases: otherwise pooled features share one dominant direction at init
    nn.init.zeros_(conv.bias)
    return conv


def _conv_block(c_in, c_out, stride, final=False):
    layers = [_conv(c_in, c_out, stride), nn.GELU(), _conv(c_out, c_out, 1)]
    if not final:
        layers.append(nn.GELU())
    return nn.Sequential(*layers)


class VisualBackbone(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.stem_channels
        self.stem_visible = _conv_block(3, c, 2)
        self.stem_infrared = _conv_block(3, c, 2)
        widths = (c,) + cfg.trunk_channels
        stages = [_conv_block(widths[i], widths[i + 1], 2) for i in range(len(widths) - 1)]
        stages.append(_conv_block(widths[-1], cfg.embed_dim, 2, final=True))
        self.shared_trunk = nn.ModuleList(stages)
        if cfg.shape_route == "full_trunk":
            self.shape_encoder = copy.deepcopy(stages[-1])
        else:
            self.shape_encoder = _conv_block(c, cfg.embed_dim, 2, final=True)

    @property
    def embed_dim(self) -> int:
        return self.cfg.embed_dim

    def stem(self, x: torch.Tensor, modality) -> torch.Tensor:
        m = Modality(modality)
        x = (x - 0.5) / 0.5  # [0, 1] -> [-1, 1]
        return (self.stem_visible if m is Modality.VISIBLE else self.stem_infrared)(x)

    def appearance_from_stem(self, h: torch.Tensor) -> torch.Tensor:
        for stage in self.shared_trunk:
            h = stage(h)
        return h.mean(dim=(2, 3))

    def shape_from_stem(self, h: torch.Tensor) -> torch.Tensor:
        if self.cfg.shape_route == "full_trunk":
            for stage in self.shared_trunk[:-1]:
                h = stage(h)
        return self.shape_encoder(h).mean(dim=(2, 3))

    def appearance(self, x: torch.Tensor, modality) -> torch.Tensor:
        return self.appearance_from_stem(self.stem(x, modality))

    def shape(self, x: torch.Tensor, modality) -> torch.Tensor:
        return self.shape_from_stem(self.stem(x, modality))


class TextEncoder(nn.Module):
    """Token table, positional embedding, one attention block, mean pooling, projection."""

    def __init__(self, token_dim: int, embed_dim: int, max_len: int = 32):
        super().__init__()
        self.token_embedding = nn.Embedding(len(VOCAB), token_dim)
        self.positional = nn.Parameter(torch.empty(max_len, token_dim))
        self.ln1 = nn.LayerNorm(token_dim)
        self.qkv = nn.Linear(token_dim, 3 * token_dim)
        self.attn_out = nn.Linear(token_dim, token_dim)
        self.ln2 = nn.LayerNorm(token_dim)
        self.mlp = nn.Sequential(
            nn.Linear(token_dim, 2 * token_dim), nn.Tanh(), nn.Linear(2 * token_dim, token_dim)
        )
        self.ln_final = nn.LayerNorm(token_dim)
        self.proj = nn.Linear(token_dim, embed_dim, bias=False)
        nn.init.normal_(self.token_embedding.weight, std=0.02)
        nn.init.normal_(self.positional, std=0.01)

    def token_ids(self, words: Sequence[str]) -> torch.Tensor:
        return torch.tensor([VOCAB.index(w) for w in words], dtype=torch.long)

    def embed_words(self, words: Sequence[str]) -> torch.Tensor:
        return self.token_embedding(self.token_ids(words).to(self.positional.device))

    def forward(self, seq: torch.Tensor) -> torch.Tensor:
        """``seq``: (B, L, token_dim) or (L, token_dim) -> (B, d) or (d,)."""
        single = seq.ndim == 2
        x = seq.unsqueeze(0) if single else seq
        L = x.shape[1]
        x = x + self.positional[:L]
        q, k, v = self.qkv(self.ln1(x)).chunk(3, dim=-1)
        att = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(q.shape[-1]), dim=-1)
        x = x + self.attn_out(att @ v)
        x = x + self.mlp(self.ln2(x))
        out = self.proj(self.ln_final(x).mean(dim=1))
        return out[0] if single else out


class PromptState(nn.Module):
    """Learnable context tokens for the shape and person prompts plus one class token per identity."""

    def __init__(self, num_identities: int, token_dim: int, n_shape_ctx: int = 4,
                 n_app_ctx: int = 4, init: str = "random"):
        super().__init__()
        self.shape_context = nn.Parameter(torch.randn(n_shape_ctx, token_dim) * 0.02)
        self.appearance_context = nn.Parameter(torch.randn(n_app_ctx, token_dim) * 0.02)
        if init == "shared":
            # every identity starts from one token: texts coincide, similarity rows are constant
            cls = torch.randn(1, token_dim).repeat(num_identities, 1) * 0.02
        else:
            cls = torch.randn(num_identities, token_dim) * 0.02
        self.class_tokens = nn.Parameter(cls)

    @property
    def num_identities(self) -> int:
        return self.class_tokens.shape[0]

    def context(self, kind: str) -> torch.Tensor:
        if kind == "shape":
            return self.shape_context
        if kind == "person":
            return self.appearance_context
        raise ValueError(f"prompt kind must be 'shape' or 'person', got {kind!r}")


@dataclass
class TokenSequence:
    embeddings: torch.Tensor  # (L, token_dim)
    labels: tuple = field(default=())

    def __len__(self):
        return self.embeddings.shape[0]


def assemble_prompt(prompts: PromptState, identity: int, kind: str,
                    text_encoder: TextEncoder) -> TokenSequence:
    """"a photo of a [ctx]*n [CLS_identity] shape|person" as token embeddings."""
    if not 0 <= identity < prompts.num_identities:
        raise UnknownIdentity(f"identity {identity} outside [0, {prompts.num_identities})")
    ctx = prompts.context(kind)
    emb = torch.cat([
        text_encoder.embed_words(PREFIX),
        ctx,
        prompts.class_tokens[identity:identity + 1],
        text_encoder.embed_words([SUFFIX[kind]]),
    ])
    tag = "s" if kind == "shape" else "a"
    labels = PREFIX + tuple(f"ctx_{tag}{m}" for m in range(ctx.shape[0])) + (
        f"cls_{identity}", SUFFIX[kind])
    return TokenSequence(emb, labels)


def prompt_batch(prompts: PromptState, identities, kind: str,
                 text_encoder: TextEncoder) -> torch.Tensor:
    """Batched :func:`assemble_prompt`; returns (B, L, token_dim)."""
    ids = torch.as_tensor(identities, dtype=torch.long)
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= prompts.num_identities):
        raise UnknownIdentity(f"identities must lie in [0, {prompts.num_identities})")
    B = ids.numel()
    ctx = prompts.context(kind)
    prefix = text_encoder.embed_words(PREFIX)
    suffix = text_encoder.embed_words([SUFFIX[kind]])
    return torch.cat([
        prefix.unsqueeze(0).expand(B, -1, -1),
        ctx.unsqueeze(0).expand(B, -1, -1),
        prompts.class_tokens[ids].unsqueeze(1),
        suffix.unsqueeze(0).expand(B, -1, -1),
    ], dim=1)


def encode_text(sequence, text_encoder: TextEncoder) -> torch.Tensor:
    emb = sequence.embeddings if isinstance(sequence, TokenSequence) else sequence
    return text_encoder(emb)


def encode_identities(prompts, text_encoder, identities, kind) -> torch.Tensor:
    return text_encoder(prompt_batch(prompts, identities, kind, text_encoder))


@dataclass
class TextPrototypeBank:
    shape: torch.Tensor
    appearance: torch.Tensor
    normalized: bool = False

    def channel(self, name: str) -> torch.Tensor:
        return {"shape": self.shape, "appearance": self.appearance}[name]

    def check(self):
        for m in (self.shape, self.appearance):
            if not torch.isfinite(m).all():
                raise ValueError("prototype bank has non-finite entries")
            if self.normalized and not torch.allclose(
                m.norm(dim=1), torch.ones(m.shape[0], dtype=m.dtype), atol=1e-6
            ):
                raise ValueError("normalized bank rows must have unit norm")


@torch.no_grad()
def build_prototype_bank(prompts: PromptState, text_encoder: TextEncoder,
                         normalize: bool = True) -> TextPrototypeBank:
    ids = torch.arange(prompts.num_identities)
    shape = encode_identities(prompts, text_encoder, ids, "shape")
    app = encode_identities(prompts, text_encoder, ids, "person")
    if normalize:
        shape = F.normalize(shape, dim=1)
        app = F.normalize(app, dim=1)
    bank = TextPrototypeBank(shape.detach().clone(), app.detach().clone(), normalize)
    bank.check()
    return bank


class BSaTaModel(nn.Module):
    """Everything trainable in one module so freezing and checkpointing see named parameters."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        if cfg.num_identities < 1:
            raise ValueError("model needs num_identities >= 1")
        self.cfg = cfg
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.init_seed)
            self.backbone = VisualBackbone(cfg)
            self.text_encoder = TextEncoder(cfg.token_dim, cfg.embed_dim)
            self.prompts = PromptState(cfg.num_identities, cfg.token_dim, cfg.n_shape_ctx,
                                       cfg.n_app_ctx, cfg.prompt_init)
            self.classifier_appearance = nn.Linear(cfg.embed_dim, cfg.num_identities, bias=False)
            self.classifier_shape = nn.Linear(cfg.embed_dim, cfg.num_identities, bias=False)
        self.text_encoder.requires_grad_(False)

    def reset_classifiers(self, seed: int):
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.classifier_appearance.reset_parameters()
            self.classifier_shape.reset_parameters()

    def prototype_bank(self) -> TextPrototypeBank:
        return build_prototype_bank(self.prompts, self.text_encoder, self.cfg.normalize_bank)


# -- record-level routing -----------------------------------------------------

@dataclass
class FeatureBundle:
    modality: Modality
    identities: np.ndarray
    appearance: Optional[torch.Tensor] = None
    shape: Optional[torch.Tensor] = None


def records_to_tensor(records: Sequence[ImageRecord], input_size, attr: str = "pixels",
                      dtype=torch.float32) -> torch.Tensor:
    arrays = []
    missing = []
    for i, r in enumerate(records):
        a = getattr(r, attr)
        if a is None:
            missing.append(i)
            continue
        if tuple(a.shape[:2]) != tuple(input_size):
            raise ShapeMismatch(f"record {i}: {a.shape[:2]} != configured {tuple(input_size)}")
        arrays.append(a)
    if missing:
        mod = records[missing[0]].modality.value if records else None
        raise MissingShapeMap(missing, mod)
    if not arrays:
        return torch.zeros((0, 3) + tuple(input_size), dtype=dtype)
    x = np.stack(arrays).transpose(0, 3, 1, 2)
    return torch.from_numpy(np.ascontiguousarray(x)).to(dtype)


def _param_dtype(module: nn.Module):
    return next(module.parameters()).dtype


def forward_appearance(batch: Batch, backbone: VisualBackbone):
    size, dt = backbone.cfg.input_size, _param_dtype(backbone)
    out = []
    for mod, recs in ((Modality.VISIBLE, batch.visible), (Modality.INFRARED, batch.infrared)):
        x = records_to_tensor(recs, size, "pixels", dt)
        ids = np.array([r.identity for r in recs], dtype=np.int64)
        out.append(FeatureBundle(mod, ids, appearance=backbone.appearance(x, mod)))
    return tuple(out)


def forward_shape(batch: Batch, backbone: VisualBackbone):
    size, dt = backbone.cfg.input_size, _param_dtype(backbone)
    out = []
    for mod, recs in ((Modality.VISIBLE, batch.visible), (Modality.INFRARED, batch.infrared)):
        x = records_to_tensor(recs, size, "shape_map", dt)
        ids = np.array([r.identity for r in recs], dtype=np.int64)
        out.append(FeatureBundle(mod, ids, shape=backbone.shape(x, mod)))
    return tuple(out)
