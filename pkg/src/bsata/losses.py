"""Training objectives.

Every function is pure and works in whatever dtype it is handed; tests run
them in float64. Similarities are cosine on raw (unnormalized) features, and
``tau`` divides every similarity before exponentiation (``tau=1`` is the
untempered form).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional

import torch
import torch.nn.functional as F

from .errors import (
    DegenerateRow,
    EmptyPositiveSet,
    LabelOutOfRange,
    NoNegative,
    NonSquare,
    NoPositive,
    PairingMismatch,
)

NORM_EPS = 1e-12


@dataclass
class LossWeights:
    lambda1: float = 0.04
    lambda2: float = 0.15
    lambda3: float = 0.05
    lambda4: float = 0.05
    temperature: float = 1.0

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3", "lambda4", "temperature"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {v}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


@dataclass
class LossReport:
    """Named loss terms plus their weighted total.

    Values may be tensors (during training) or floats; :meth:`as_record`
    flattens to floats for the metrics log.
    """

    terms: dict = field(default_factory=dict)
    total: object = 0.0

    def as_record(self) -> dict:
        out = {k: _scalar(v) for k, v in self.terms.items()}
        out["total"] = _scalar(self.total)
        return out

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in self.as_record().values())


def _scalar(v) -> float:
    return float(v.detach()) if torch.is_tensor(v) else float(v)


def _normalize(x: torch.Tensor) -> torch.Tensor:
    norms = x.norm(dim=1, keepdim=True)
    bad = (norms.squeeze(1) < NORM_EPS).nonzero().flatten().tolist()
    if bad:
        raise DegenerateRow(f"rows with near-zero norm: {bad[:10]}")
    return x / norms


def cosine_sim(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise cosine similarity, ``S[i, j] = cos(a_i, b_j)``."""
    return _normalize(a) @ _normalize(b).t()


def _check_rows(*mats):
    n = mats[0].shape[0]
    if any(m.shape[0] != n for m in mats):
        raise ValueError(f"row counts differ: {[m.shape[0] for m in mats]}")


# -- image-to-text / text-to-image contrastive ------------------------------

def i2t_from_sim(s_vis: torch.Tensor, s_ir: torch.Tensor, tau: float = 1.0) -> torch.Tensor:
    """Row-wise cross-entropy with the diagonal as target, summed over modalities."""
    total = 0.0
    for s in (s_vis, s_ir):
        logp = F.log_softmax(s / tau, dim=1)
        total = total - logp.diagonal().mean()
    return total


def i2t_contrastive(v_vis, v_ir, texts, tau: float = 1.0) -> torch.Tensor:
    """``texts[i]`` is the text embedding of sample i's identity (repeats allowed)."""
    _check_rows(v_vis, v_ir, texts)
    return i2t_from_sim(cosine_sim(v_vis, texts), cosine_sim(v_ir, texts), tau)


def _positive_mask(labels: torch.Tensor) -> torch.Tensor:
    return labels.view(-1, 1) == labels.view(1, -1)


def t2i_from_sim(s_vis, s_ir, labels, tau: float = 1.0) -> torch.Tensor:
    """Text-anchored contrastive term.

    ``s[j, i] = sim(v_j, t_{y_i})``. For anchor i the softmax runs over the
    image axis j, and the loss averages ``-log p`` over the positives of
    ``y_i`` before averaging over anchors.
    """
    pos = _positive_mask(labels).to(s_vis.dtype)
    counts = pos.sum(dim=0)
    if bool((counts == 0).any()):
        raise EmptyPositiveSet("every anchor needs at least one positive")
    total = 0.0
    for s in (s_vis, s_ir):
        logp = F.log_softmax(s / tau, dim=0)  # over images, per text column
        per_anchor = (logp * pos).sum(dim=0) / counts
        total = total - per_anchor.mean()
    return total


def t2i_contrastive(v_vis, v_ir, texts, labels, tau: float = 1.0) -> torch.Tensor:
    _check_rows(v_vis, v_ir, texts, labels)
    return t2i_from_sim(cosine_sim(v_vis, texts), cosine_sim(v_ir, texts), labels, tau)


def bidirectional_contrastive(v_vis, v_ir, texts, labels, tau: float = 1.0) -> torch.Tensor:
    s_vis, s_ir = cosine_sim(v_vis, texts), cosine_sim(v_ir, texts)
    return i2t_from_sim(s_vis, s_ir, tau) + t2i_from_sim(s_vis, s_ir, labels, tau)


# -- consistency regularizers -------------------------------------------------

def tvcr_from_sim(s_vis: torch.Tensor, s_ir: torch.Tensor) -> torch.Tensor:
    total = 0.0
    for s in (s_vis, s_ir):
        if s.ndim != 2 or s.shape[0] != s.shape[1]:
            raise NonSquare(f"similarity matrix must be square, got {tuple(s.shape)}")
        total = total + ((s - s.t()) ** 2).sum() / s.shape[0]
    return total


def tvcr(v_vis, v_ir, texts) -> torch.Tensor:
    """Penalty on asymmetry of the image-text similarity matrices."""
    if v_vis.shape[0] != texts.shape[0] or v_ir.shape[0] != texts.shape[0]:
        raise NonSquare("tvcr needs one text per sample")
    return tvcr_from_sim(cosine_sim(v_vis, texts), cosine_sim(v_ir, texts))


def sim_asymmetry(s: torch.Tensor) -> float:
    """Mean squared asymmetry ``mean_ij (S_ij - S_ji)^2`` of one matrix."""
    return float(((s - s.t()) ** 2).mean())


# -- prototype supervision ----------------------------------------------------

def _check_labels(labels: torch.Tensor, num_classes: int):
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= num_classes):
        raise LabelOutOfRange(f"labels must lie in [0, {num_classes})")


def i2tce_from_sim(s_vis, s_ir, labels_vis, labels_ir=None, tau: float = 1.0) -> torch.Tensor:
    labels_ir = labels_vis if labels_ir is None else labels_ir
    _check_labels(labels_vis, s_vis.shape[1])
    _check_labels(labels_ir, s_ir.shape[1])
    return F.cross_entropy(s_vis / tau, labels_vis) + F.cross_entropy(s_ir / tau, labels_ir)


def i2tce(v_vis, v_ir, bank: torch.Tensor, labels_vis, labels_ir=None, tau: float = 1.0):
    """Cross-entropy over all identity prototypes, summed over both modalities."""
    return i2tce_from_sim(cosine_sim(v_vis, bank), cosine_sim(v_ir, bank),
                          labels_vis, labels_ir, tau)


def sim_distribution(v: torch.Tensor, bank: torch.Tensor, tau: float = 1.0) -> torch.Tensor:
    if bank.shape[0] == 0:
        raise ValueError("prototype bank is empty")
    return F.softmax(cosine_sim(v, bank) / tau, dim=1)


def dcc_from_probs(p_vis: torch.Tensor, p_ir: torch.Tensor) -> torch.Tensor:
    if p_vis.shape != p_ir.shape:
        raise PairingMismatch(f"distribution shapes differ: {tuple(p_vis.shape)} vs {tuple(p_ir.shape)}")
    return ((p_vis - p_ir) ** 2).sum() / p_vis.shape[0]


def dcc(v_vis, v_ir, bank, pairing=None, tau: float = 1.0) -> torch.Tensor:
    """Squared gap between paired modalities' prototype distributions.

    ``pairing`` is a sequence of (visible_row, infrared_row); default is the
    identity pairing.
    """
    if pairing is not None:
        pairing = list(pairing)
        if len(pairing) != v_vis.shape[0] or len(pairing) != v_ir.shape[0]:
            raise PairingMismatch("pairing must cover every row of both modalities")
        vi = torch.tensor([p[0] for p in pairing])
        ri = torch.tensor([p[1] for p in pairing])
        v_vis, v_ir = v_vis[vi], v_ir[ri]
    elif v_vis.shape[0] != v_ir.shape[0]:
        raise PairingMismatch("visible and infrared row counts differ")
    return dcc_from_probs(sim_distribution(v_vis, bank, tau), sim_distribution(v_ir, bank, tau))


# -- identity supervision -----------------------------------------------------

def id_loss(feats_or_logits, labels, classifier=None, label_smoothing: float = 0.0):
    """Mean softmax cross-entropy; ``classifier`` maps features to logits if given."""
    logits = feats_or_logits if classifier is None else classifier(feats_or_logits)
    _check_labels(labels, logits.shape[1])
    return F.cross_entropy(logits, labels, label_smoothing=label_smoothing)


def _pairwise_euclidean(x: torch.Tensor) -> torch.Tensor:
    diff = x.unsqueeze(1) - x.unsqueeze(0)
    return (diff * diff).sum(dim=2).clamp_min(NORM_EPS).sqrt()


def _masked_softmax(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    x = x.masked_fill(~mask, float("-inf"))
    return torch.softmax(x, dim=1).masked_fill(~mask, 0.0)


def wrt_loss(feats: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Weighted regularized triplet loss over the combined batch.

    Positives exclude the anchor itself. Positive distances are weighted by
    their softmax (emphasising far positives), negatives by the softmax of
    the negated distance (emphasising near negatives).
    """
    n = feats.shape[0]
    same = _positive_mask(labels)
    eye = torch.eye(n, dtype=torch.bool, device=feats.device)
    is_pos = same & ~eye
    is_neg = ~same
    for i in range(n):
        if not bool(is_pos[i].any()):
            raise NoPositive(i)
        if not bool(is_neg[i].any()):
            raise NoNegative(i)
    dist = _pairwise_euclidean(feats)
    w_pos = _masked_softmax(dist, is_pos)
    w_neg = _masked_softmax(-dist, is_neg)
    far_pos = (w_pos * dist).sum(dim=1)
    near_neg = (w_neg * dist).sum(dim=1)
    return F.softplus(far_pos - near_neg).mean()


# -- stage compositions -------------------------------------------------------

STAGE1_TERMS = ("s_bcon", "a_bcon", "s_tvcr", "a_tvcr")
STAGE2_TERMS = ("id", "wrt", "a_i2tce", "s_i2tce", "s_dcc", "a_dcc")


def stage1_loss(parts: Mapping, weights: LossWeights) -> LossReport:
    """``s_bcon + a_bcon + lambda1 * (s_tvcr + a_tvcr)``; missing parts count as 0."""
    g = lambda k: parts.get(k, 0.0)  # noqa: E731
    total = g("s_bcon") + g("a_bcon") + weights.lambda1 * (g("s_tvcr") + g("a_tvcr"))
    return LossReport(dict(parts), total)


def stage2_loss(parts: Mapping, weights: LossWeights) -> LossReport:
    g = lambda k: parts.get(k, 0.0)  # noqa: E731
    total = (
        g("id")
        + weights.lambda2 * g("wrt")
        + weights.lambda3 * (g("a_i2tce") + g("s_i2tce"))
        + weights.lambda4 * (g("s_dcc") + g("a_dcc"))
    )
    return LossReport(dict(parts), total)


def report_from_record(record: Optional[dict]) -> LossReport:
    record = dict(record or {})
    total = record.pop("total", 0.0)
    return LossReport(record, total)
