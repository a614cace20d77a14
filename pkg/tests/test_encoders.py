import numpy as np
import pytest
import torch

import oracles
from bsata.datamodel import Batch, ImageRecord, Modality
from bsata.encoders import (
    PREFIX,
    BSaTaModel,
    ModelConfig,
    VisualBackbone,
    assemble_prompt,
    build_prototype_bank,
    encode_text,
    forward_appearance,
    forward_shape,
    prompt_batch,
)
from bsata.errors import MissingShapeMap, ShapeMismatch, UnknownIdentity

SIZE = (16, 8)


def toy_cfg(**kw):
    kw.setdefault("num_identities", 4)
    kw.setdefault("embed_dim", 16)
    kw.setdefault("input_size", SIZE)
    kw.setdefault("stem_channels", 4)
    kw.setdefault("trunk_channels", (8,))
    return ModelConfig(**kw)


def rec(mod, pid, seed, shape=True, size=SIZE):
    rng = np.random.default_rng(seed)
    pix = rng.random(size + (3,))
    sm = (rng.random(size + (3,)) > 0.5).astype(float) if shape else None
    return ImageRecord(pix, mod, pid, 1 if mod == "visible" else 3, shape_map=sm)


def pair_batch(n=2, **kw):
    vis = [rec("visible", i, 10 + i, **kw) for i in range(n)]
    ir = [rec("infrared", i, 20 + i, **kw) for i in range(n)]
    return Batch(vis, ir)


@pytest.fixture
def model():
    return BSaTaModel(toy_cfg()).eval()


def test_appearance_bundles(model):
    v, r = forward_appearance(pair_batch(), model.backbone)
    assert v.appearance.shape == r.appearance.shape == (2, 16)
    assert v.modality is Modality.VISIBLE and r.identities.tolist() == [0, 1]
    assert torch.isfinite(v.appearance).all()


def test_identical_images_give_identical_rows(model):
    a = rec("visible", 0, 1)
    b = Batch([a, a], [rec("infrared", 0, 2), rec("infrared", 0, 3)])
    v, _ = forward_appearance(b, model.backbone)
    assert torch.equal(v.appearance[0], v.appearance[1])


def test_reference_resolution_accepted():
    cfg = ModelConfig(num_identities=2, embed_dim=8, stem_channels=2, trunk_channels=(4,))
    assert cfg.input_size == (288, 144)
    bb = VisualBackbone(cfg).eval()
    b = Batch([rec("visible", 0, 0, size=(288, 144))], [rec("infrared", 0, 1, size=(288, 144))])
    with torch.no_grad():
        v, _ = forward_appearance(b, bb)
    assert v.appearance.shape == (1, 8)


def test_resolution_mismatch(model):
    b = Batch([rec("visible", 0, 0, size=(12, 8))], [rec("infrared", 0, 1, size=(12, 8))])
    with pytest.raises(ShapeMismatch):
        forward_appearance(b, model.backbone)


def test_shape_bundles(model):
    v, r = forward_shape(pair_batch(), model.backbone)
    assert v.shape.shape == r.shape.shape == (2, 16)


def test_missing_shape_map_names_records(model):
    vis = [rec("visible", 0, 0), rec("visible", 1, 1, shape=False)]
    b = Batch(vis, [rec("infrared", 0, 2), rec("infrared", 1, 3)])
    with pytest.raises(MissingShapeMap) as e:
        forward_shape(b, model.backbone)
    assert e.value.indices == [1] and e.value.modality == "visible"


def test_zero_map_through_zeroed_encoder_is_zero():
    bb = VisualBackbone(toy_cfg()).eval()
    with torch.no_grad():
        for p in bb.parameters():
            p.zero_()
    zero = ImageRecord(np.zeros(SIZE + (3,)), "visible", 0, 1, shape_map=np.zeros(SIZE + (3,)))
    zir = zero.replace(modality="infrared", camera=3)
    v, r = forward_shape(Batch([zero], [zir]), bb)
    assert torch.count_nonzero(v.shape) == 0 and torch.count_nonzero(r.shape) == 0


def _equal_stems(bb):
    bb.stem_infrared.load_state_dict(bb.stem_visible.state_dict())


def test_equal_stems_give_equal_shape_rows():
    bb = VisualBackbone(toy_cfg()).eval()
    _equal_stems(bb)
    a = rec("visible", 0, 5)
    b = Batch([a], [a.replace(modality="infrared", camera=3)])
    v, r = forward_shape(b, bb)
    assert torch.equal(v.shape, r.shape)


def test_modality_routing():
    bb = VisualBackbone(toy_cfg()).eval()
    x = torch.rand(2, 3, *SIZE)
    with torch.no_grad():
        assert not torch.allclose(bb.appearance(x, "visible"), bb.appearance(x, "infrared"))
        _equal_stems(bb)
        assert torch.equal(bb.appearance(x, "visible"), bb.appearance(x, "infrared"))


def test_trunk_sharing_between_branches():
    bb = VisualBackbone(toy_cfg()).eval()
    x = torch.rand(2, 3, *SIZE)
    with torch.no_grad():
        a0, s0 = bb.appearance(x, "visible"), bb.shape(x, "visible")
        # first trunk stage is shared by both branches
        bb.shared_trunk[0][0].weight.mul_(1.5)
        a1, s1 = bb.appearance(x, "visible"), bb.shape(x, "visible")
        assert not torch.allclose(a0, a1) and not torch.allclose(s0, s1)
        bb.shape_encoder[0].weight.mul_(1.5)
        a2, s2 = bb.appearance(x, "visible"), bb.shape(x, "visible")
        assert torch.equal(a1, a2) and not torch.allclose(s1, s2)


def test_shape_encoder_starts_as_copy_of_last_stage():
    bb = VisualBackbone(toy_cfg())
    for p, q in zip(bb.shape_encoder.parameters(), bb.shared_trunk[-1].parameters()):
        assert torch.equal(p, q) and p is not q


def test_stems_only_route_skips_trunk():
    bb = VisualBackbone(toy_cfg(shape_route="stems_only")).eval()
    x = torch.rand(1, 3, *SIZE)
    with torch.no_grad():
        s0 = bb.shape(x, "visible")
        bb.shared_trunk[0][0].weight.mul_(2.0)
        assert torch.equal(s0, bb.shape(x, "visible"))


def test_prompt_layout_shape(model):
    seq = assemble_prompt(model.prompts, 3, "shape", model.text_encoder)
    assert seq.labels == PREFIX + ("ctx_s0", "ctx_s1", "ctx_s2", "ctx_s3", "cls_3", "shape")
    assert len(seq) == 4 + 4 + 1 + 1
    assert torch.equal(seq.embeddings[4:8], model.prompts.shape_context)
    assert torch.equal(seq.embeddings[8], model.prompts.class_tokens[3])


def test_prompt_identity_seven_of_eight():
    m = BSaTaModel(toy_cfg(num_identities=8))
    seq = assemble_prompt(m.prompts, 7, "shape", m.text_encoder)
    assert seq.labels[:4] == ("a", "photo", "of", "a") and seq.labels[8] == "cls_7"


def test_prompt_person_suffix(model):
    seq = assemble_prompt(model.prompts, 0, "person", model.text_encoder)
    assert seq.labels[-1] == "person" and seq.labels[4] == "ctx_a0"


def test_single_context_slot():
    m = BSaTaModel(toy_cfg(n_shape_ctx=1))
    seq = assemble_prompt(m.prompts, 1, "shape", m.text_encoder)
    assert seq.labels == PREFIX + ("ctx_s0", "cls_1", "shape")


def test_context_count_validated():
    with pytest.raises(ValueError):
        toy_cfg(n_app_ctx=0)


def test_unknown_identity(model):
    with pytest.raises(UnknownIdentity):
        assemble_prompt(model.prompts, 4, "shape", model.text_encoder)
    with pytest.raises(UnknownIdentity):
        prompt_batch(model.prompts, [0, -1], "person", model.text_encoder)


def test_batched_prompts_match_single(model):
    batched = prompt_batch(model.prompts, [2, 0], "person", model.text_encoder)
    for row, pid in zip(batched, [2, 0]):
        assert torch.equal(row, assemble_prompt(model.prompts, pid, "person", model.text_encoder).embeddings)


def test_encode_text_deterministic_and_distinguishes_identities(model):
    s0 = assemble_prompt(model.prompts, 0, "shape", model.text_encoder)
    s1 = assemble_prompt(model.prompts, 1, "shape", model.text_encoder)
    assert not torch.equal(model.prompts.class_tokens[0], model.prompts.class_tokens[1])
    e0 = encode_text(s0, model.text_encoder)
    assert e0.shape == (16,)
    assert torch.equal(e0, encode_text(s0, model.text_encoder))
    assert not torch.equal(e0, encode_text(s1, model.text_encoder))


def test_text_gradient_matches_central_differences():
    m = BSaTaModel(toy_cfg(embed_dim=8)).double()
    direction = torch.randn(8, generator=torch.Generator().manual_seed(0), dtype=torch.float64)

    def value(ctx: np.ndarray) -> float:
        with torch.no_grad():
            m.prompts.shape_context.copy_(torch.from_numpy(ctx))
            return float(encode_text(assemble_prompt(m.prompts, 2, "shape", m.text_encoder),
                                     m.text_encoder) @ direction)

    x0 = m.prompts.shape_context.detach().numpy().copy()
    out = encode_text(assemble_prompt(m.prompts, 2, "shape", m.text_encoder), m.text_encoder) @ direction
    (g,) = torch.autograd.grad(out, m.prompts.shape_context)
    fd = oracles.central_difference(value, x0, 1e-5)
    assert oracles.max_relative_error(g.numpy(), fd, 1e-6) < 1e-4


def test_loss_gradients_reach_only_learnable_prompt_parts(model):
    ids = torch.arange(4)
    loss = (model.text_encoder(prompt_batch(model.prompts, ids, "shape", model.text_encoder)).sum()
            + model.text_encoder(prompt_batch(model.prompts, ids, "person", model.text_encoder)).pow(2).sum())
    loss.backward()
    p = model.prompts
    for t in (p.shape_context, p.appearance_context, p.class_tokens):
        assert t.grad is not None and torch.count_nonzero(t.grad) > 0
    # prefix and suffix words come from the frozen token table
    assert model.text_encoder.token_embedding.weight.grad is None


def test_prototype_bank(model):
    bank = build_prototype_bank(model.prompts, model.text_encoder, normalize=True)
    assert bank.shape.shape == bank.appearance.shape == (4, 16)
    for m in (bank.shape, bank.appearance):
        assert torch.allclose(m.norm(dim=1), torch.ones(4), atol=1e-6)
    again = model.prototype_bank()
    assert torch.equal(bank.shape, again.shape) and torch.equal(bank.appearance, again.appearance)
    raw = build_prototype_bank(model.prompts, model.text_encoder, normalize=False)
    assert not raw.normalized
    assert torch.allclose(torch.nn.functional.normalize(raw.shape, dim=1), bank.shape, atol=1e-6)


def test_bank_rows_equal_single_prompt_encodings(model):
    bank = build_prototype_bank(model.prompts, model.text_encoder, normalize=False)
    with torch.no_grad():
        row = encode_text(assemble_prompt(model.prompts, 3, "person", model.text_encoder), model.text_encoder)
    assert torch.allclose(bank.appearance[3], row, atol=1e-6)


def test_shared_prompt_init_coincides_texts():
    m = BSaTaModel(toy_cfg(prompt_init="shared"))
    bank = m.prototype_bank()
    assert torch.allclose(bank.shape[0], bank.shape[3])


def test_init_seed_controls_weights():
    a, b, c = (BSaTaModel(toy_cfg(init_seed=s)) for s in (1, 1, 2))
    assert torch.equal(a.backbone.stem_visible[0].weight, b.backbone.stem_visible[0].weight)
    assert not torch.equal(a.backbone.stem_visible[0].weight, c.backbone.stem_visible[0].weight)


def test_initial_features_not_collapsed():
    m = BSaTaModel(toy_cfg()).eval()
    x = torch.rand(8, 3, *SIZE)
    with torch.no_grad():
        f = torch.nn.functional.normalize(m.backbone.appearance(x, "visible"), dim=1)
    off = (f @ f.t())[~torch.eye(8, dtype=torch.bool)]
    assert float(off.mean()) < 0.9
