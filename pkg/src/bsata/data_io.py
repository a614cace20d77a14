"""Dataset layouts, augmentation, shape-map delivery and the synthetic generator.

Layouts understood by :func:`load_manifest`:

* ``sysu``: ``cam1..cam6/<id:04d>/*.jpg`` with ``exp/train_id.txt``,
  ``exp/val_id.txt`` and ``exp/test_id.txt`` (comma separated ids).
  Visible cameras are 1, 2, 4, 5; infrared are 3 and 6.
* ``regdb``: ``idx/{train,test}_{visible,thermal}_<trial>.txt`` with lines
  ``<relative path> <label>``.
* ``synthetic``: the SYSU-style tree written by :func:`export_synthetic`
  (visible in cam1/cam2, infrared in cam3/cam6) plus ``synth_spec.json`` and
  a mirrored ``shape/`` tree of silhouettes.
"""
from __future__ import annotations

import dataclasses
import functools
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .datamodel import ImageRecord, Modality
from .errors import MapNotFound, MissingFile, UnknownLayout

SYSU_VISIBLE_CAMS = (1, 2, 4, 5)
SYSU_INFRARED_CAMS = (3, 6)
IMAGE_EXTS = (".jpg", ".jpeg", ".png", ".bmp")


# -- decoding seam ------------------------------------------------------------

def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def write_image(path, arr: np.ndarray):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    data = np.clip(np.rint(np.asarray(arr) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path, format="PNG", optimize=False)


# -- manifest -----------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    path: str  # relative to manifest root
    modality: Modality
    identity: int  # contiguous within the split family (train / test)
    camera: int
    split: str  # train | query | gallery
    raw_identity: int
    index: int = 0


@dataclass
class DatasetManifest:
    root: Path
    kind: str
    entries: tuple
    trial: Optional[int] = None
    extra: dict = field(default_factory=dict)

    def select(self, split=None, modality=None) -> list:
        out = []
        for e in self.entries:
            if split is not None and e.split not in (split if isinstance(split, tuple) else (split,)):
                continue
            if modality is not None and e.modality is not Modality(modality):
                continue
            out.append(e)
        return out

    def num_identities(self, split="train") -> int:
        return len({e.identity for e in self.select(split)})

    def counts(self) -> dict:
        out = {}
        for split in ("train", "query", "gallery"):
            sel = self.select(split)
            out[split] = {"records": len(sel), "identities": len({e.raw_identity for e in sel})}
        return out

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for e in self.entries:
            h.update(f"{e.path}|{e.modality.value}|{e.raw_identity}|{e.camera}|{e.split}\n".encode())
            h.update(hashlib.sha256((self.root / e.path).read_bytes()).digest())
        return h.hexdigest()


def _read_id_list(path: Path) -> list:
    text = path.read_text().strip()
    return [int(t) for t in text.replace("\n", ",").split(",") if t.strip()]


def _image_files(d: Path) -> list:
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_EXTS) if d.is_dir() else []


def _remap(raw_ids) -> dict:
    return {r: i for i, r in enumerate(sorted(set(raw_ids)))}


def _detect(root: Path) -> str:
    if (root / "synth_spec.json").is_file():
        return "synthetic"
    if (root / "idx").is_dir():
        return "regdb"
    if any((root / f"cam{c}").is_dir() for c in range(1, 7)):
        return "sysu"
    raise UnknownLayout(f"{root}: no recognizable dataset layout")


def _camera_modality(cam: int) -> Modality:
    return Modality.VISIBLE if cam in SYSU_VISIBLE_CAMS else Modality.INFRARED


def _load_sysu(root: Path) -> DatasetManifest:
    exp = root / "exp"
    if not (exp / "train_id.txt").is_file() or not (exp / "test_id.txt").is_file():
        raise UnknownLayout(f"{root}: SYSU layout needs exp/train_id.txt and exp/test_id.txt")
    train_ids = _read_id_list(exp / "train_id.txt")
    if (exp / "val_id.txt").is_file():
        train_ids += _read_id_list(exp / "val_id.txt")
    test_ids = _read_id_list(exp / "test_id.txt")
    raw = []
    for family, ids in (("train", train_ids), ("test", test_ids)):
        for cam in range(1, 7):
            mod = _camera_modality(cam)
            for pid in sorted(set(ids)):
                for k, f in enumerate(_image_files(root / f"cam{cam}" / f"{pid:04d}")):
                    split = "train" if family == "train" else (
                        "query" if mod is Modality.INFRARED else "gallery")
                    raw.append((str(f.relative_to(root)), mod, pid, cam, split, k))
    return _finish(root, "sysu", raw)


def _finish(root, kind, raw, trial=None, extra=None) -> DatasetManifest:
    train_map = _remap(r[2] for r in raw if r[4] == "train")
    test_map = _remap(r[2] for r in raw if r[4] != "train")
    entries = []
    for path, mod, pid, cam, split, k in raw:
        ident = (train_map if split == "train" else test_map)[pid]
        entries.append(ManifestEntry(path, mod, ident, cam, split, pid, k))
    entries.sort(key=lambda e: e.path)
    return DatasetManifest(Path(root), kind, tuple(entries), trial, extra or {})


def _load_regdb(root: Path, trial: int) -> DatasetManifest:
    raw, missing = [], []
    for family in ("train", "test"):
        for mod_name, mod, cam in (("visible", Modality.VISIBLE, 1), ("thermal", Modality.INFRARED, 2)):
            idx = root / "idx" / f"{family}_{mod_name}_{trial}.txt"
            if not idx.is_file():
                raise UnknownLayout(f"{root}: missing index file {idx.name}")
            seen = {}
            for line in idx.read_text().splitlines():
                if not line.strip():
                    continue
                rel, label = line.split()[:2]
                if not (root / rel).is_file():
                    missing.append(rel)
                    continue
                pid = int(label)
                k = seen.get(pid, 0)
                seen[pid] = k + 1
                split = "train" if family == "train" else (
                    "query" if mod is Modality.INFRARED else "gallery")
                raw.append((rel, mod, pid, cam, split, k))
    if missing:
        raise MissingFile(missing)
    return _finish(root, "regdb", raw, trial)


def _load_synthetic(root: Path) -> DatasetManifest:
    spec = SynthSpec.from_dict(json.loads((root / "synth_spec.json").read_text()))
    raw = []
    for cam in range(1, 7):
        cam_dir = root / f"cam{cam}"
        if not cam_dir.is_dir():
            continue
        mod = _camera_modality(cam)
        for id_dir in sorted(p for p in cam_dir.iterdir() if p.is_dir()):
            pid = int(id_dir.name)
            for f in _image_files(id_dir):
                k = int(f.stem)
                if k >= spec.records_per_modality - spec.holdout_per_modality:
                    split = "query" if mod is Modality.INFRARED else "gallery"
                else:
                    split = "train"
                raw.append((str(f.relative_to(root)), mod, pid, cam, split, k))
    if not raw:
        raise UnknownLayout(f"{root}: synthetic sidecar present but no images")
    m = _finish(root, "synthetic", raw, extra={"spec": spec.to_dict()})
    # synthetic held-out records keep training identities so prototypes stay meaningful
    ids = _remap(r[2] for r in raw)
    m.entries = tuple(dataclasses.replace(e, identity=ids[e.raw_identity]) for e in m.entries)
    return m


def load_manifest(root, dataset_kind: str = "auto", trial: int = 1) -> DatasetManifest:
    root = Path(root)
    if not root.is_dir():
        raise UnknownLayout(f"{root}: not a directory")
    kind = _detect(root) if dataset_kind == "auto" else dataset_kind
    if kind == "sysu":
        return _load_sysu(root)
    if kind == "regdb":
        return _load_regdb(root, trial)
    if kind == "synthetic":
        if not (root / "synth_spec.json").is_file():
            raise UnknownLayout(f"{root}: missing synth_spec.json")
        return _load_synthetic(root)
    raise UnknownLayout(f"unknown dataset kind {dataset_kind!r}")


# -- shape maps ---------------------------------------------------------------

@dataclass
class ShapeMapProvider:
    """Delivers silhouettes for records.

    ``precomputed_dir``: maps live under ``root`` mirroring the image tree,
    saved as PNG with the image's stem. ``synthetic_silhouette``: re-rendered
    from ``spec`` by identity and record index. ``disabled``: no maps.
    """

    mode: str = "disabled"
    root: Optional[Path] = None
    spec: Optional["SynthSpec"] = None
    binarize: bool = False

    def lookup(self, record: ImageRecord) -> np.ndarray:
        if self.mode == "precomputed_dir":
            if record.path is None:
                raise MapNotFound("record has no path to resolve a shape map from")
            p = Path(self.root) / Path(record.path).with_suffix(".png")
            if not p.is_file():
                raise MapNotFound(f"no shape map for {record.path} (looked for {p})")
            m = read_image(p)
            return (m > 0.5).astype(np.float32) if self.binarize else m
        if self.mode == "synthetic_silhouette":
            return synth_shape_map(self.spec, record.identity, record.index)
        raise ValueError("shape map provider is disabled")


def provide_shape(record: ImageRecord, provider: ShapeMapProvider) -> ImageRecord:
    if provider.mode == "disabled":
        raise ValueError("provide_shape needs an enabled provider")
    m = provider.lookup(record)
    if m.shape[:2] != record.pixels.shape[:2]:
        m = _resize(m, record.pixels.shape[:2])
    return record.replace(shape_map=np.clip(m, 0.0, 1.0).astype(record.pixels.dtype))


def load_records(manifest: DatasetManifest, split=None, modality=None,
                 provider: Optional[ShapeMapProvider] = None,
                 size: Optional[tuple] = None) -> list:
    if provider is None and manifest.kind == "synthetic":
        provider = ShapeMapProvider("precomputed_dir", manifest.root / "shape")
    out = []
    for e in manifest.select(split, modality):
        px = read_image(manifest.root / e.path)
        if size is not None and px.shape[:2] != tuple(size):
            px = _resize(px, size)
        rec = ImageRecord(px, e.modality, e.identity, e.camera, index=e.index, path=e.path)
        if provider is not None and provider.mode != "disabled":
            rec = provide_shape(rec, provider)
        out.append(rec)
    return out


# -- augmentation -------------------------------------------------------------

@dataclass
class AugmentPolicy:
    size: tuple = (288, 144)
    flip: bool = True
    pad: int = 10
    crop: bool = True


def _resize(a: np.ndarray, size) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(a, dtype=np.float32)).permute(2, 0, 1)[None]
    t = F.interpolate(t, size=tuple(size), mode="bilinear", align_corners=False)
    return t[0].permute(1, 2, 0).numpy()


def augment(record: ImageRecord, policy: AugmentPolicy, seed) -> ImageRecord:
    """Resize, random horizontal flip, zero-pad then random crop.

    The same geometric transform is applied to ``shape_map``.
    """
    rng = np.random.default_rng(seed)
    H, W = policy.size
    arrays = [record.pixels, record.shape_map]
    arrays = [None if a is None else (a if a.shape[:2] == (H, W) else _resize(a, (H, W)))
              for a in arrays]
    if policy.flip and rng.random() < 0.5:
        arrays = [None if a is None else a[:, ::-1] for a in arrays]
    if policy.crop and policy.pad > 0:
        p = policy.pad
        top, left = rng.integers(0, 2 * p + 1, size=2)
        padded = [None if a is None else np.pad(a, ((p, p), (p, p), (0, 0))) for a in arrays]
        arrays = [None if a is None else a[top:top + H, left:left + W] for a in padded]
    px, sm = (None if a is None else np.ascontiguousarray(a, dtype=record.pixels.dtype)
              for a in arrays)
    return record.replace(pixels=px, shape_map=None if sm is None else np.clip(sm, 0.0, 1.0))


# -- synthetic generator ------------------------------------------------------

@dataclass
class SynthSpec:
    num_identities: int = 16
    records_per_modality: int = 8
    holdout_per_modality: int = 2
    image_size: tuple = (64, 32)
    geometry_spread: float = 1.0
    jitter_px: int = 2
    visible_noise: float = 0.04
    infrared_noise: float = 0.06
    channel_shift: float = 0.08
    seed: int = 0

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        if self.num_identities < 1 or self.records_per_modality < 1:
            raise ValueError("need at least one identity and one record per modality")
        if not 0 <= self.holdout_per_modality < self.records_per_modality:
            raise ValueError("holdout_per_modality must be in [0, records_per_modality)")
        if min(self.image_size) < 8:
            raise ValueError("image_size too small")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown synth spec keys: {sorted(unknown)}")
        return cls(**d)

    def is_holdout(self, index: int) -> bool:
        return index >= self.records_per_modality - self.holdout_per_modality


@dataclass(frozen=True)
class BodyGeometry:
    """Silhouette parameters in fractions of image height (y) and width (x)."""

    head_r: float
    neck_y: float
    shoulder_w: float
    torso_len: float
    hip_w: float
    leg_len: float
    leg_w: float
    leg_gap: float
    arm_w: float
    arm_spread: float
    upper_color: tuple
    lower_color: tuple
    stripe_freq: float
    thermal_upper: float
    thermal_lower: float


MAX_IDENTITY_IOU = 0.85
_GEOMETRY_ATTEMPTS = 64


def _draw_geometry(spec: SynthSpec, identity: int, attempt: int) -> BodyGeometry:
    rng = np.random.default_rng([spec.seed, 7919, identity, attempt])
    s = spec.geometry_spread

    def u(lo, hi):
        mid = 0.5 * (lo + hi)
        return mid + s * (rng.uniform(lo, hi) - mid)

    upper = tuple(rng.uniform(0.1, 0.95, size=3).round(4))
    lower = tuple(rng.uniform(0.05, 0.8, size=3).round(4))
    lum_u = 0.3 * upper[0] + 0.59 * upper[1] + 0.11 * upper[2]
    lum_l = 0.3 * lower[0] + 0.59 * lower[1] + 0.11 * lower[2]
    return BodyGeometry(
        head_r=u(0.05, 0.085),
        neck_y=u(0.14, 0.2),
        shoulder_w=u(0.22, 0.42),
        torso_len=u(0.24, 0.36),
        hip_w=u(0.16, 0.34),
        leg_len=u(0.3, 0.42),
        leg_w=u(0.07, 0.15),
        leg_gap=u(0.0, 0.14),
        arm_w=u(0.05, 0.1),
        arm_spread=u(0.0, 0.25),
        upper_color=upper,
        lower_color=lower,
        stripe_freq=u(0.0, 6.0),
        thermal_upper=float(0.45 + 0.4 * (1.0 - lum_u)),
        thermal_lower=float(0.35 + 0.4 * (1.0 - lum_l)),
    )


@functools.lru_cache(maxsize=32)
def _all_geometries(spec_key: str) -> tuple:
    """Identity geometries drawn in order, redrawing any whose silhouette
    overlaps an earlier identity's by IoU above ``MAX_IDENTITY_IOU``."""
    spec = SynthSpec.from_dict(json.loads(spec_key))
    H, W = spec.image_size
    out, sils = [], []
    for pid in range(spec.num_identities):
        best, best_iou = None, 2.0
        for attempt in range(_GEOMETRY_ATTEMPTS):
            g = _draw_geometry(spec, pid, attempt)
            sil = np.logical_or.reduce(_parts(g, H, W, 0.0, 0.0))
            worst = max((silhouette_iou(sil, o) for o in sils), default=0.0)
            if worst < best_iou:
                best, best_iou, best_sil = g, worst, sil
            if worst < MAX_IDENTITY_IOU:
                break
        out.append(best)
        sils.append(best_sil)
    return tuple(out)


def identity_geometry(spec: SynthSpec, identity: int) -> BodyGeometry:
    key = json.dumps(spec.to_dict(), sort_keys=True)
    return _all_geometries(key)[identity]


def _parts(g: BodyGeometry, H: int, W: int, dx: float, dy: float):
    """Boolean masks (head, upper body incl. arms, legs)."""
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    y = (yy + 0.5 - dy) / H
    x = (xx + 0.5 - dx) / W
    aspect = W / H
    cx = 0.5
    head_cy = g.neck_y - g.head_r
    head = ((x - cx) * aspect) ** 2 + (y - head_cy) ** 2 <= g.head_r ** 2
    t0, t1 = g.neck_y, g.neck_y + g.torso_len
    frac = np.clip((y - t0) / max(t1 - t0, 1e-6), 0.0, 1.0)
    half = 0.5 * (g.shoulder_w + (g.hip_w - g.shoulder_w) * frac)
    torso = (y >= t0) & (y <= t1) & (np.abs(x - cx) <= half)
    arm_len = 0.8 * g.torso_len
    arm_t = np.clip((y - t0) / arm_len, 0.0, 1.0)
    arm_cx = 0.5 * g.shoulder_w + 0.5 * g.arm_w + g.arm_spread * arm_t * 0.5
    arms = (y >= t0) & (y <= t0 + arm_len) & (np.abs(np.abs(x - cx) - arm_cx) <= 0.5 * g.arm_w)
    l0, l1 = t1, min(t1 + g.leg_len, 0.98)
    leg_cx = 0.5 * g.leg_gap + 0.5 * g.leg_w
    legs = (y >= l0) & (y <= l1) & (np.abs(np.abs(x - cx) - leg_cx) <= 0.5 * g.leg_w)
    return head, torso | arms, legs


def _pair_jitter(spec: SynthSpec, identity: int, index: int):
    rng = np.random.default_rng([spec.seed, 104729, identity, index])
    j = spec.jitter_px
    return float(rng.integers(-j, j + 1)), float(rng.integers(-max(j // 2, 0), max(j // 2, 0) + 1))


def render_silhouette(spec: SynthSpec, identity: int, dx: float = 0.0, dy: float = 0.0) -> np.ndarray:
    H, W = spec.image_size
    head, upper, legs = _parts(identity_geometry(spec, identity), H, W, dx, dy)
    return (head | upper | legs).astype(np.float32)


def synth_shape_map(spec: SynthSpec, identity: int, index: int) -> np.ndarray:
    dx, dy = _pair_jitter(spec, identity, index)
    sil = render_silhouette(spec, identity, dx, dy)
    return np.repeat(sil[:, :, None], 3, axis=2)


def _render(spec: SynthSpec, identity: int, index: int, modality: Modality) -> np.ndarray:
    H, W = spec.image_size
    g = identity_geometry(spec, identity)
    dx, dy = _pair_jitter(spec, identity, index)
    head, upper, legs = _parts(g, H, W, dx, dy)
    rng = np.random.default_rng([spec.seed, 15485863, identity, index,
                                 0 if modality is Modality.VISIBLE else 1])
    yy, xx = np.mgrid[0:H, 0:W]
    if modality is Modality.VISIBLE:
        bg = rng.uniform(0.25, 0.75, size=3)
        img = np.empty((H, W, 3))
        img[:] = bg
        img += 0.08 * np.sin(2 * np.pi * (yy / H) * rng.uniform(0.5, 2.0))[:, :, None]
        stripes = 0.12 * np.sign(np.sin(2 * np.pi * g.stripe_freq * yy / H))[:, :, None]
        img = np.where(upper[:, :, None], np.asarray(g.upper_color) + stripes, img)
        img = np.where(legs[:, :, None], np.asarray(g.lower_color), img)
        img = np.where(head[:, :, None], np.array([0.85, 0.65, 0.5]), img)
        img += rng.uniform(-spec.channel_shift, spec.channel_shift, size=3)
        img += rng.normal(0.0, spec.visible_noise, size=img.shape)
    else:
        bg = rng.uniform(0.05, 0.25)
        grad = 0.1 * (yy / H)
        inten = bg + grad
        inten = np.where(upper, g.thermal_upper, inten)
        inten = np.where(legs, g.thermal_lower, inten)
        inten = np.where(head, 0.95, inten)
        inten = inten + rng.uniform(-spec.channel_shift, spec.channel_shift)
        inten = inten + rng.normal(0.0, spec.infrared_noise, size=inten.shape)
        img = np.repeat(inten[:, :, None], 3, axis=2)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def synth_camera(modality: Modality, index: int) -> int:
    return (1, 2)[index % 2] if modality is Modality.VISIBLE else (3, 6)[index % 2]


def synth_generate(spec: SynthSpec) -> list:
    """All records, ordered by identity, then modality (visible first), then index."""
    out = []
    for pid in range(spec.num_identities):
        for mod in (Modality.VISIBLE, Modality.INFRARED):
            for k in range(spec.records_per_modality):
                out.append(ImageRecord(
                    pixels=_render(spec, pid, k, mod),
                    modality=mod,
                    identity=pid,
                    camera=synth_camera(mod, k),
                    shape_map=synth_shape_map(spec, pid, k),
                    index=k,
                ))
    return out


def split_holdout(records: Sequence[ImageRecord], spec: SynthSpec):
    train = [r for r in records if not spec.is_holdout(r.index)]
    test = [r for r in records if spec.is_holdout(r.index)]
    return train, test


def export_synthetic(spec: SynthSpec, out_dir) -> Path:
    """Write records as PNG in the SYSU-style tree plus silhouettes and the spec sidecar."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise PermissionError(f"{out} is not writable")
    for rec in synth_generate(spec):
        rel = Path(f"cam{rec.camera}") / f"{rec.identity:04d}" / f"{rec.index:04d}.png"
        write_image(out / rel, rec.pixels)
        write_image(out / "shape" / rel, rec.shape_map)
    ids = ",".join(str(i) for i in range(spec.num_identities))
    (out / "exp").mkdir(exist_ok=True)
    (out / "exp" / "train_id.txt").write_text(ids + "\n")
    (out / "exp" / "test_id.txt").write_text(ids + "\n")
    (out / "synth_spec.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    return out


def silhouette_iou(a: np.ndarray, b: np.ndarray) -> float:
    a, b = a > 0.5, b > 0.5
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 1.0

