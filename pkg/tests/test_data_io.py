import io
import itertools
import os

import numpy as np
import pytest
from hypothesis import given, strategies as st
from PIL import Image

from bsata.data_io import (
    AugmentPolicy,
    ShapeMapProvider,
    SynthSpec,
    augment,
    export_synthetic,
    load_manifest,
    load_records,
    provide_shape,
    render_silhouette,
    silhouette_iou,
    split_holdout,
    synth_generate,
    write_image,
)
from bsata.datamodel import ImageRecord, Modality
from bsata.errors import MapNotFound, MissingFile, UnknownLayout


def _png_bytes():
    buf = io.BytesIO()
    Image.new("RGB", (2, 4), (10, 20, 30)).save(buf, format="PNG")
    return buf.getvalue()


PNG = _png_bytes()


def make_sysu(root, train_ids, test_ids, per_cam=1, cams=(1, 3)):
    for pid in list(train_ids) + list(test_ids):
        for cam in cams:
            d = root / f"cam{cam}" / f"{pid:04d}"
            d.mkdir(parents=True)
            for k in range(per_cam):
                (d / f"{k:04d}.jpg").write_bytes(PNG)
    (root / "exp").mkdir()
    (root / "exp" / "train_id.txt").write_text(",".join(map(str, train_ids)))
    (root / "exp" / "test_id.txt").write_text(",".join(map(str, test_ids)))
    return root


def make_regdb(root, n_ids, per_mod=10, trial=1, skip=()):
    (root / "idx").mkdir(parents=True)
    for family, offset in (("train", 0), ("test", n_ids)):
        for mod in ("visible", "thermal"):
            lines = []
            for i in range(n_ids):
                pid = offset + i
                for k in range(per_mod):
                    rel = f"{mod.capitalize()}/{pid}/{k}.bmp"
                    lines.append(f"{rel} {pid}")
                    if rel not in skip:
                        p = root / rel
                        p.parent.mkdir(parents=True, exist_ok=True)
                        p.write_bytes(PNG)
            (root / "idx" / f"{family}_{mod}_{trial}.txt").write_text("\n".join(lines) + "\n")
    return root


def test_full_sysu_identity_counts(tmp_path):
    m = load_manifest(make_sysu(tmp_path, range(1, 396), range(400, 496)))
    assert m.kind == "sysu"
    assert m.num_identities("train") == 395
    assert len({e.identity for e in m.select(("query", "gallery"))}) == 96
    assert m.counts()["query"] == {"records": 96, "identities": 96}


def test_sysu_modalities_and_contiguous_ids(tmp_path):
    m = load_manifest(make_sysu(tmp_path, [5, 9, 20], [33], cams=(1, 2, 3, 4, 5, 6)))
    for e in m.entries:
        assert e.modality is (Modality.INFRARED if e.camera in (3, 6) else Modality.VISIBLE)
    assert sorted({e.identity for e in m.select("train")}) == [0, 1, 2]
    assert [e.path for e in m.entries] == sorted(e.path for e in m.entries)


def test_full_regdb_split(tmp_path):
    m = load_manifest(make_regdb(tmp_path, 206), "regdb", trial=1)
    assert m.num_identities("train") == 206
    train = m.select("train")
    for mod in Modality:
        per_id = np.bincount([e.identity for e in train if e.modality is mod])
        assert per_id.tolist() == [10] * 206
    assert m.num_identities(("query", "gallery")) == 206


def test_regdb_missing_files_listed(tmp_path):
    skip = {f"Visible/0/{k}.bmp" for k in range(10)} | {"Thermal/1/3.bmp", "Thermal/2/0.bmp"}
    make_regdb(tmp_path, 3, skip=skip)
    with pytest.raises(MissingFile) as e:
        load_manifest(tmp_path)
    assert len(e.value.paths) == 12
    msg = str(e.value)
    assert "(+2 more)" in msg and msg.count(".bmp") == 10


def test_empty_dir_unknown_layout(tmp_path):
    with pytest.raises(UnknownLayout):
        load_manifest(tmp_path)
    with pytest.raises(UnknownLayout):
        load_manifest(tmp_path / "absent")
    with pytest.raises(UnknownLayout):
        load_manifest(tmp_path, "synthetic")


def test_manifest_loading_idempotent(tmp_path):
    make_sysu(tmp_path, [1, 2], [3], per_cam=2)
    a, b = load_manifest(tmp_path), load_manifest(tmp_path)
    assert a.entries == b.entries and a.fingerprint() == b.fingerprint()


# -- augmentation ---------------------------------------------------------------

def _record(h=20, w=10, seed=0):
    rng = np.random.default_rng(seed)
    return ImageRecord(rng.random((h, w, 3)).astype(np.float32), "visible", 3, 2,
                       shape_map=(rng.random((h, w, 3)) > 0.5).astype(np.float32))


def test_augment_default_output_size():
    out = augment(_record(), AugmentPolicy(), seed=1)
    assert out.pixels.shape == (288, 144, 3) == out.shape_map.shape


def test_augment_deterministic():
    a, b = augment(_record(), AugmentPolicy(), 7), augment(_record(), AugmentPolicy(), 7)
    assert np.array_equal(a.pixels, b.pixels) and np.array_equal(a.shape_map, b.shape_map)


def test_flip_mirrors_both_arrays():
    rec = _record()
    pol = AugmentPolicy(size=(20, 10), pad=0, crop=False)
    flipped = next(s for s in range(50) if not np.array_equal(augment(rec, pol, s).pixels, rec.pixels))
    out = augment(rec, pol, flipped)
    W = 10
    for r, c in itertools.product(range(20), range(W)):
        assert np.array_equal(out.pixels[r, c], rec.pixels[r, W - 1 - c])
        assert np.array_equal(out.shape_map[r, c], rec.shape_map[r, W - 1 - c])


@given(st.integers(0, 10_000))
def test_augment_keeps_alignment_and_labels(seed):
    # shape map equal to the pixels: any geometric mismatch would show up
    rng = np.random.default_rng(seed)
    px = rng.random((20, 10, 3)).astype(np.float32)
    rec = ImageRecord(px, "infrared", 4, 6, shape_map=px.copy(), index=2)
    out = augment(rec, AugmentPolicy(size=(20, 10), pad=3), seed)
    assert np.array_equal(out.pixels, out.shape_map)
    assert (out.identity, out.modality, out.camera, out.index) == (4, Modality.INFRARED, 6, 2)


# -- synthetic generator --------------------------------------------------------

@pytest.fixture(scope="module")
def synth():
    spec = SynthSpec(seed=3)
    return spec, synth_generate(spec)


def test_synth_counts(synth):
    spec, recs = synth
    assert len(recs) == 256
    assert sum(r.modality is Modality.VISIBLE for r in recs) == 128
    train, test = split_holdout(recs, spec)
    assert len(train) == 192 and len(test) == 64


def test_synth_pairs_share_shape_map(synth):
    _, recs = synth
    by_key = {(r.identity, r.modality, r.index): r for r in recs}
    for (pid, mod, k), r in by_key.items():
        if mod is Modality.VISIBLE:
            assert np.array_equal(r.shape_map, by_key[(pid, Modality.INFRARED, k)].shape_map)


def test_synth_identity_silhouettes_separated(synth):
    spec, _ = synth
    sils = [render_silhouette(spec, i) for i in range(spec.num_identities)]
    worst = max(silhouette_iou(a, b) for a, b in itertools.combinations(sils, 2))
    assert worst < 0.9


def test_synth_infrared_is_grayscale(synth):
    _, recs = synth
    ir = [r for r in recs if r.modality is Modality.INFRARED]
    assert all(np.array_equal(r.pixels[..., 0], r.pixels[..., 2]) for r in ir)
    vis = [r for r in recs if r.modality is Modality.VISIBLE]
    assert not all(np.array_equal(r.pixels[..., 0], r.pixels[..., 2]) for r in vis)


def test_synth_byte_identical_per_seed():
    a, b = synth_generate(SynthSpec(num_identities=3, seed=9)), synth_generate(SynthSpec(num_identities=3, seed=9))
    assert all(x.pixels.tobytes() == y.pixels.tobytes() and x.shape_map.tobytes() == y.shape_map.tobytes()
               for x, y in zip(a, b))
    c = synth_generate(SynthSpec(num_identities=3, seed=10))
    assert a[0].pixels.tobytes() != c[0].pixels.tobytes()


def test_synth_spec_validation():
    with pytest.raises(ValueError):
        SynthSpec(num_identities=0)
    with pytest.raises(ValueError):
        SynthSpec(records_per_modality=2, holdout_per_modality=2)
    with pytest.raises(ValueError):
        SynthSpec.from_dict({"bogus": 1})
    assert SynthSpec.from_dict(SynthSpec(seed=4).to_dict()) == SynthSpec(seed=4)


def test_export_roundtrip(tmp_path):
    spec = SynthSpec(num_identities=2, records_per_modality=3, holdout_per_modality=1, seed=1)
    out = export_synthetic(spec, tmp_path / "ds")
    files = [p for p in (out).rglob("*.png") if "shape" not in p.parts]
    assert len(files) == 12
    m = load_manifest(out)
    assert m.kind == "synthetic" and m.counts()["train"]["records"] == 8
    recs = load_records(m)
    gen = {(r.identity, r.modality, r.index): r for r in synth_generate(spec)}
    for r in recs:
        g = gen[(r.identity, r.modality, r.index)]
        assert np.abs(r.pixels - g.pixels).max() <= 0.5 / 255 + 1e-6
        assert np.array_equal(r.shape_map, g.shape_map)


def test_export_byte_identical(tmp_path):
    spec = SynthSpec(num_identities=2, records_per_modality=2, holdout_per_modality=0, seed=5)
    a, b = export_synthetic(spec, tmp_path / "a"), export_synthetic(spec, tmp_path / "b")
    rel = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert rel == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    assert all((a / r).read_bytes() == (b / r).read_bytes() for r in rel)


@pytest.mark.skipif(os.geteuid() == 0, reason="root ignores directory permissions")
def test_export_unwritable(tmp_path):
    d = tmp_path / "ro"
    d.mkdir()
    d.chmod(0o500)
    with pytest.raises(PermissionError):
        export_synthetic(SynthSpec(num_identities=1, records_per_modality=1, holdout_per_modality=0), d)


# -- shape-map providers --------------------------------------------------------

def test_synthetic_provider_gives_generator_silhouette(synth):
    spec, recs = synth
    r = recs[20]
    bare = r.replace(shape_map=None)
    out = provide_shape(bare, ShapeMapProvider("synthetic_silhouette", spec=spec))
    assert np.array_equal(out.shape_map, r.shape_map)


def test_precomputed_provider(tmp_path):
    m = np.zeros((6, 4, 3))
    m[2:5, 1:3] = 1.0
    write_image(tmp_path / "cam1" / "0001" / "0000.png", m)
    rec = ImageRecord(np.zeros((6, 4, 3)), "visible", 0, 1, path="cam1/0001/0000.jpg")
    out = provide_shape(rec, ShapeMapProvider("precomputed_dir", tmp_path))
    assert out.shape_map.shape == rec.pixels.shape
    assert np.array_equal(out.shape_map, m.astype(np.float32))


def test_precomputed_provider_missing_file(tmp_path):
    rec = ImageRecord(np.zeros((6, 4, 3)), "visible", 0, 1, path="cam1/0001/0007.jpg")
    with pytest.raises(MapNotFound, match="0007"):
        provide_shape(rec, ShapeMapProvider("precomputed_dir", tmp_path))


def test_disabled_provider_refused():
    with pytest.raises(ValueError):
        provide_shape(_record(), ShapeMapProvider("disabled"))
