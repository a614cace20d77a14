"""Retrieval evaluation: inference features, cosine distances, CMC and mAP.

SYSU protocols query with infrared images (cameras 3 and 6) against a
visible gallery that is re-drawn in every trial; RegDB protocols use every
record of one split in one direction.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .datamodel import ImageRecord, Modality
from .encoders import VisualBackbone, records_to_tensor
from .errors import DegenerateRow, EmptyGalleryForIdentity, ShapeMismatch

PROTOCOLS = ("sysu_all", "sysu_indoor", "regdb_v2i", "regdb_i2v")
SHOTS = ("single", "multi")
SYSU_GALLERY_CAMS = {"sysu_all": (1, 2, 4, 5), "sysu_indoor": (1, 2)}
SYSU_QUERY_CAMS = (3, 6)
MULTI_SHOT = 10
NORM_EPS = 1e-12


# -- features and distances ---------------------------------------------------

@torch.no_grad()
def extract_inference_features(records: Sequence[ImageRecord], backbone: VisualBackbone,
                               use_shape: bool = True, chunk: int = 128) -> np.ndarray:
    """Rows ``[appearance, shape]`` (or appearance alone), grouped by modality internally."""
    was_training = backbone.training
    backbone.eval()
    size = backbone.cfg.input_size
    dim = backbone.embed_dim * (2 if use_shape else 1)
    out = np.zeros((len(records), dim), dtype=np.float64)
    for mod in (Modality.VISIBLE, Modality.INFRARED):
        idx = [i for i, r in enumerate(records) if r.modality is mod]
        for lo in range(0, len(idx), chunk):
            part = idx[lo:lo + chunk]
            recs = [records[i] for i in part]
            feats = [backbone.appearance(records_to_tensor(recs, size), mod)]
            if use_shape:
                feats.append(backbone.shape(records_to_tensor(recs, size, "shape_map"), mod))
            out[part] = torch.cat(feats, dim=1).double().numpy()
    backbone.train(was_training)
    return out


def distance_matrix(Q: np.ndarray, G: np.ndarray) -> np.ndarray:
    """``D[i, j] = 1 - cos(Q_i, G_j)``."""
    Q, G = np.asarray(Q, dtype=np.float64), np.asarray(G, dtype=np.float64)
    if Q.shape[1] != G.shape[1]:
        raise ShapeMismatch(f"feature dims differ: {Q.shape[1]} vs {G.shape[1]}")
    qn, gn = np.linalg.norm(Q, axis=1), np.linalg.norm(G, axis=1)
    for name, n in (("query", qn), ("gallery", gn)):
        bad = np.flatnonzero(n < NORM_EPS)
        if bad.size:
            raise DegenerateRow(f"{name} rows with near-zero norm: {bad[:10].tolist()}")
    return 1.0 - (Q / qn[:, None]) @ (G / gn[:, None]).T


# -- ranking metrics ----------------------------------------------------------

def average_precision(matches: np.ndarray) -> float:
    """AP of a boolean relevance vector in ranked order (all relevant items in the denominator).

    Summed as an exact rational and rounded once, so the value does not
    depend on summation order.
    """
    hits = np.flatnonzero(matches)
    if hits.size == 0:
        return 0.0
    return float(sum(Fraction(m + 1, int(r) + 1) for m, r in enumerate(hits)) / hits.size)


def rank_metrics(D: np.ndarray, q_ids, g_ids, valid: Optional[np.ndarray] = None,
                 max_rank: int = 20):
    """Per-query CMC rows and APs.

    ``valid[i, j]`` False removes gallery j from query i's ranking (junk).
    Queries left without any relevant item are skipped. Returns
    ``(cmc_rows, aps)`` as lists over the scored queries.
    """
    q_ids, g_ids = np.asarray(q_ids), np.asarray(g_ids)
    cmc_rows, aps = [], []
    for i in range(D.shape[0]):
        order = np.argsort(D[i], kind="stable")
        if valid is not None:
            order = order[valid[i, order]]
        matches = g_ids[order] == q_ids[i]
        if not matches.any():
            continue
        first = int(np.argmax(matches))
        cmc_rows.append([1.0 if first < k else 0.0 for k in range(1, max_rank + 1)])
        aps.append(average_precision(matches))
    return cmc_rows, aps


@dataclass
class RetrievalReport:
    cmc: list
    map: float
    trials: int
    protocol: str = ""
    shot: str = ""
    per_trial: list = field(default_factory=list)  # [{"cmc": [...], "map": x}, ...]

    def rank(self, k: int) -> float:
        return self.cmc[k - 1]

    @property
    def label(self) -> str:
        if self.protocol.startswith("sysu"):
            mode = "AS" if self.protocol == "sysu_all" else "IS"
            return f"{mode}–{'SS' if self.shot == 'single' else 'MS'}"
        return {"regdb_v2i": "V2I", "regdb_i2v": "I2V"}.get(self.protocol, self.protocol)

    def document(self) -> str:
        """Flat ``key = value`` lines; byte-stable for a given report."""
        lines = [
            f"label = {self.label}",
            f"protocol = {self.protocol}",
            f"shot = {self.shot}",
            f"trials = {self.trials}",
            "map_denominator = all_relevant",
            f"map = {self.map!r}",
        ]
        lines += [f"r{k} = {v!r}" for k, v in enumerate(self.cmc, 1)]
        for t, tr in enumerate(self.per_trial):
            lines.append(f"trial{t}.map = {tr['map']!r}")
            lines.append(f"trial{t}.r1 = {tr['cmc'][0]!r}")
        return "\n".join(lines) + "\n"

    def table(self) -> str:
        ks = [k for k in (1, 5, 10, 20) if k <= len(self.cmc)]
        head = "| setting | " + " | ".join(f"R@{k}" for k in ks) + " | mAP |"
        sep = "|" + "---|" * (len(ks) + 2)
        row = f"| {self.label} | " + " | ".join(f"{100 * self.rank(k):.2f}" for k in ks)
        return f"{head}\n{sep}\n{row} | {100 * self.map:.2f} |\n"

    def to_json(self) -> str:
        return json.dumps({"label": self.label, "protocol": self.protocol, "shot": self.shot,
                           "trials": self.trials, "cmc": self.cmc, "map": self.map,
                           "per_trial": self.per_trial}, sort_keys=True)


def _mean(values) -> float:
    values = list(values)
    return math.fsum(values) / len(values) if values else 0.0


def _summarise(cmc_rows, aps, max_rank):
    cmc = [_mean(r[k] for r in cmc_rows) for k in range(max_rank)]
    return cmc, _mean(aps)


def draw_sysu_gallery(g_ids, g_cams, protocol: str, shot: str, rng) -> np.ndarray:
    """Indices of one gallery draw: 1 or up to 10 images per (identity, camera)."""
    cams = SYSU_GALLERY_CAMS[protocol]
    per = 1 if shot == "single" else MULTI_SHOT
    g_ids, g_cams = np.asarray(g_ids), np.asarray(g_cams)
    chosen = []
    for pid in np.unique(g_ids):
        for cam in cams:
            pool = np.flatnonzero((g_ids == pid) & (g_cams == cam))
            if pool.size == 0:
                continue
            take = min(per, pool.size)
            chosen.extend(rng.choice(pool, size=take, replace=False).tolist())
    return np.sort(np.asarray(chosen, dtype=np.int64))


def _sysu_valid(q_cams, g_cams) -> np.ndarray:
    """Junk rule: query camera 3 ignores gallery camera 2 (same room)."""
    q_cams, g_cams = np.asarray(q_cams), np.asarray(g_cams)
    return ~((q_cams[:, None] == 3) & (g_cams[None, :] == 2))


def _check_gallery_covers(q_ids, g_ids):
    missing = sorted(set(np.asarray(q_ids).tolist()) - set(np.asarray(g_ids).tolist()))
    if missing:
        raise EmptyGalleryForIdentity(f"query identities absent from gallery: {missing[:10]}")


def cmc_map(D, q_ids, g_ids, q_cams, g_cams, protocol: str, shot: str = "single",
            trials: int = 10, seed: int = 0, max_rank: int = 20) -> RetrievalReport:
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}")
    if shot not in SHOTS:
        raise ValueError(f"unknown shot {shot!r}")
    D = np.asarray(D, dtype=np.float64)
    q_ids, g_ids = np.asarray(q_ids), np.asarray(g_ids)
    q_cams, g_cams = np.asarray(q_cams), np.asarray(g_cams)
    if D.shape != (len(q_ids), len(g_ids)) or len(q_cams) != len(q_ids) or len(g_cams) != len(g_ids):
        raise ShapeMismatch(f"distance matrix {D.shape} disagrees with id/camera vectors")

    if protocol.startswith("regdb"):
        _check_gallery_covers(q_ids, g_ids)
        rows, aps = rank_metrics(D, q_ids, g_ids, None, max_rank)
        cmc, mAP = _summarise(rows, aps, max_rank)
        return RetrievalReport(cmc, mAP, 1, protocol, shot, [{"cmc": cmc, "map": mAP}])

    qmask = np.isin(q_cams, SYSU_QUERY_CAMS)
    gmask = np.isin(g_cams, SYSU_GALLERY_CAMS[protocol])
    D, q_ids, q_cams = D[qmask][:, gmask], q_ids[qmask], q_cams[qmask]
    g_ids, g_cams = g_ids[gmask], g_cams[gmask]
    _check_gallery_covers(q_ids, g_ids)
    valid_full = _sysu_valid(q_cams, g_cams)
    rng = np.random.default_rng(seed)
    per_trial = []
    for _ in range(trials):
        sel = draw_sysu_gallery(g_ids, g_cams, protocol, shot, rng)
        rows, aps = rank_metrics(D[:, sel], q_ids, g_ids[sel], valid_full[:, sel], max_rank)
        cmc, mAP = _summarise(rows, aps, max_rank)
        per_trial.append({"cmc": cmc, "map": mAP})
    cmc = [_mean(t["cmc"][k] for t in per_trial) for k in range(max_rank)]
    return RetrievalReport(cmc, _mean(t["map"] for t in per_trial), trials, protocol, shot, per_trial)


# -- composed evaluation ------------------------------------------------------

def split_query_gallery(records: Sequence[ImageRecord], protocol: str):
    """Query/gallery record lists for a protocol (query modality first)."""
    vis = [r for r in records if r.modality is Modality.VISIBLE]
    ir = [r for r in records if r.modality is Modality.INFRARED]
    if protocol == "regdb_v2i":
        return vis, ir
    return ir, vis


def evaluate(model, records: Sequence[ImageRecord], protocol: str, shot: str = "single",
             seed: int = 0, use_shape: Optional[bool] = None, trials: int = 10,
             max_rank: int = 20) -> RetrievalReport:
    backbone = model.backbone if hasattr(model, "backbone") else model
    if use_shape is None:
        use_shape = all(r.shape_map is not None for r in records)
    query, gallery = split_query_gallery(records, protocol)
    Q = extract_inference_features(query, backbone, use_shape)
    G = extract_inference_features(gallery, backbone, use_shape)
    D = distance_matrix(Q, G)
    return cmc_map(
        D,
        [r.identity for r in query], [r.identity for r in gallery],
        [r.camera for r in query], [r.camera for r in gallery],
        protocol, shot, trials=trials, seed=seed, max_rank=min(max_rank, len(gallery)),
    )


# -- feature dumps ------------------------------------------------------------

def save_features(path, feats: np.ndarray, ids, cams, modality: str, protocol: str):
    """One JSON header line, then little-endian float32 rows; ids/cams in ``<path>.ids.tsv``."""
    path = Path(path)
    feats = np.ascontiguousarray(feats, dtype="<f4")
    header = {"count": int(feats.shape[0]), "dim": int(feats.shape[1]),
              "modality": modality, "protocol": protocol}
    with open(path, "wb") as f:
        f.write((json.dumps(header, sort_keys=True) + "\n").encode())
        f.write(feats.tobytes())
    with open(str(path) + ".ids.tsv", "w") as f:
        f.write("identity\tcamera\n")
        for i, c in zip(ids, cams):
            f.write(f"{int(i)}\t{int(c)}\n")


def load_features(path):
    path = Path(path)
    data = path.read_bytes()
    nl = data.index(b"\n")
    header = json.loads(data[:nl])
    feats = np.frombuffer(data[nl + 1:], dtype="<f4").reshape(header["count"], header["dim"])
    rows = Path(str(path) + ".ids.tsv").read_text().splitlines()[1:]
    table = np.array([[int(x) for x in r.split("\t")] for r in rows], dtype=np.int64).reshape(-1, 2)
    return header, feats.astype(np.float32), table[:, 0], table[:, 1]
