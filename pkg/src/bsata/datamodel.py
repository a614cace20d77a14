"""Sample, batch and label types plus the cross-modal P x K batch sampler."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .errors import InsufficientSamples


class Modality(str, Enum):
    VISIBLE = "visible"
    INFRARED = "infrared"


@dataclass(frozen=True, eq=False)
class ImageRecord:
    """One image with its labels.

    ``pixels`` and ``shape_map`` are H x W x 3 float arrays in [0, 1].
    ``index`` is the record's position within its identity/modality, used to
    pair synthetic records and to name exported files.
    """

    pixels: np.ndarray
    modality: Modality
    identity: int
    camera: int
    shape_map: Optional[np.ndarray] = None
    index: int = 0
    path: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "modality", Modality(self.modality))
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"pixels must be HxWx3, got {self.pixels.shape}")
        if not np.all(np.isfinite(self.pixels)):
            raise ValueError("pixels contain non-finite values")
        if self.identity < 0:
            raise ValueError(f"identity must be non-negative, got {self.identity}")
        if self.shape_map is not None:
            if self.shape_map.shape != self.pixels.shape:
                raise ValueError(
                    f"shape_map dims {self.shape_map.shape} != pixel dims {self.pixels.shape}"
                )
            if self.shape_map.min() < 0.0 or self.shape_map.max() > 1.0:
                raise ValueError("shape_map values must lie in [0, 1]")

    def replace(self, **changes) -> "ImageRecord":
        kwargs = dict(
            pixels=self.pixels,
            modality=self.modality,
            identity=self.identity,
            camera=self.camera,
            shape_map=self.shape_map,
            index=self.index,
            path=self.path,
        )
        kwargs.update(changes)
        return ImageRecord(**kwargs)


@dataclass(frozen=True)
class Batch:
    """Paired cross-modal batch; ``visible[i]`` and ``infrared[i]`` share an identity."""

    visible: tuple
    infrared: tuple
    pairing: tuple = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "visible", tuple(self.visible))
        object.__setattr__(self, "infrared", tuple(self.infrared))
        if not self.pairing:
            object.__setattr__(self, "pairing", tuple((i, i) for i in range(len(self.visible))))
        else:
            object.__setattr__(self, "pairing", tuple(tuple(p) for p in self.pairing))
        if len(self.visible) != len(self.infrared):
            raise ValueError("visible and infrared halves must have equal length")
        left = sorted(p[0] for p in self.pairing)
        right = sorted(p[1] for p in self.pairing)
        n = len(self.visible)
        if left != list(range(n)) or right != list(range(n)):
            raise ValueError("pairing must be a bijection over batch positions")
        for i, j in self.pairing:
            if self.visible[i].identity != self.infrared[j].identity:
                raise ValueError(f"paired positions ({i}, {j}) disagree on identity")

    def __len__(self):
        return len(self.visible) + len(self.infrared)

    @property
    def n(self) -> int:
        return len(self.visible)

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.identity for r in self.visible], dtype=np.int64)

    @property
    def infrared_labels(self) -> np.ndarray:
        return np.array([r.identity for r in self.infrared], dtype=np.int64)


@dataclass(frozen=True)
class LabelSpace:
    num_identities: int

    def one_hot(self, y: int) -> np.ndarray:
        if not 0 <= y < self.num_identities:
            raise ValueError(f"label {y} outside [0, {self.num_identities})")
        v = np.zeros(self.num_identities)
        v[y] = 1.0
        return v


def _index_by_identity(dataset: Sequence[ImageRecord]):
    vis, ir = defaultdict(list), defaultdict(list)
    for pos, rec in enumerate(dataset):
        (vis if rec.modality is Modality.VISIBLE else ir)[rec.identity].append(pos)
    return vis, ir


def _draw(rng, pool, K, allow_replacement):
    if len(pool) >= K:
        return list(rng.choice(pool, size=K, replace=False))
    return list(rng.choice(pool, size=K, replace=True)) if allow_replacement else None


def pk_sample(dataset: Sequence[ImageRecord], P: int, K: int, rng_seed: int,
              allow_replacement: bool = False) -> Batch:
    """Draw P identities and K visible + K infrared records for each."""
    vis, ir = _index_by_identity(dataset)
    need = 1 if allow_replacement else K
    ids = sorted(i for i in set(vis) & set(ir) if len(vis[i]) >= need and len(ir[i]) >= need)
    if len(ids) < P:
        short = sorted(i for i in set(vis) | set(ir) if i not in ids)
        raise InsufficientSamples(
            f"need {P} identities with >= {K} records per modality, have {len(ids)}; "
            f"deficient identities: {short[:10]}"
        )
    rng = np.random.default_rng(rng_seed)
    chosen = rng.choice(ids, size=P, replace=False)
    v_out, r_out = [], []
    for pid in chosen:
        v = _draw(rng, vis[pid], K, allow_replacement)
        r = _draw(rng, ir[pid], K, allow_replacement)
        if v is None or r is None:
            raise InsufficientSamples(f"identity {pid} lacks {K} records in a modality")
        v_out += [dataset[i] for i in v]
        r_out += [dataset[i] for i in r]
    return Batch(v_out, r_out)


def epoch_iterator(dataset: Sequence[ImageRecord], P: int, K: int, rng_seed: int,
                   epoch: int = 0) -> list:
    """Partition one epoch into disjoint P x K x 2 batches.

    Each identity's records are shuffled and cut into K-sized groups per
    modality; every batch takes one group from each of P identities, always
    drawing from the identities with the most groups left so the number of
    batches is maximal.
    """
    vis, ir = _index_by_identity(dataset)
    rng = np.random.default_rng([rng_seed, epoch])
    groups = {}
    for pid in sorted(set(vis) & set(ir)):
        v = rng.permutation(vis[pid])
        r = rng.permutation(ir[pid])
        g = min(len(v) // K, len(r) // K)
        if g:
            groups[pid] = [(v[k * K:(k + 1) * K], r[k * K:(k + 1) * K]) for k in range(g)]
    if len(groups) < P:
        raise InsufficientSamples(
            f"need {P} identities with >= {K} records per modality, have {len(groups)}"
        )
    batches = []
    while True:
        live = [pid for pid, g in groups.items() if g]
        if len(live) < P:
            break
        tie = rng.random(len(live))
        order = sorted(range(len(live)), key=lambda i: (-len(groups[live[i]]), tie[i]))
        chosen = [live[i] for i in order[:P]]
        chosen = [chosen[i] for i in rng.permutation(P)]
        v_out, r_out = [], []
        for pid in chosen:
            v, r = groups[pid].pop()
            v_out += [dataset[i] for i in v]
            r_out += [dataset[i] for i in r]
        batches.append(Batch(v_out, r_out))
    return batches


def usable_samples(dataset: Sequence[ImageRecord], K: int) -> int:
    """Records that fit into complete K-groups in both modalities."""
    vis, ir = _index_by_identity(dataset)
    return sum(2 * K * min(len(vis[p]) // K, len(ir[p]) // K) for p in set(vis) & set(ir))
