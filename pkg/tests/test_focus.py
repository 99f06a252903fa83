import math
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from focuscir.backbones import stub_backbones
from focuscir.data import ABLATION_FLAGS, HyperConfig, ShapeError
from focuscir.focus import (
    CrossAttention, DualFocusMapping, FocusProjection, TextualFocus, VisualFocus, average_projection,
    cross_attend, focused_feature, mgfp, run_tfm, run_vfm, split_focused, tfm, vfm_global, vfm_local,
)
from focuscir.preprocess import PreprocessMissing, SegmentationRecord
from focuscir.synthetic import AttributeImage

GOLDEN = Path(__file__).parent / "golden"
DOG = AttributeImage("dog", "red", "striped", "tree", "leaves")


def identity_attention(d):
    unit = CrossAttention(d).double()
    with torch.no_grad():
        for w in (unit.w_q, unit.w_k, unit.w_v):
            w.copy_(torch.eye(d))
    return unit


def test_two_by_two_attention_oracle():
    unit = identity_attention(2)
    eye = torch.eye(2, dtype=torch.float64)
    out = cross_attend(eye, eye, unit)
    e = math.exp(1 / math.sqrt(2))
    expected = torch.tensor([[e, 1], [1, e]], dtype=torch.float64) / (e + 1)
    assert torch.allclose(out, expected, atol=1e-12)
    assert out[0, 0].item() == pytest.approx(0.670, abs=5e-4)
    assert out[0, 1].item() == pytest.approx(0.330, abs=5e-4)


def test_single_key_attention():
    torch.manual_seed(0)
    unit = CrossAttention(4).double()
    v = torch.randn(1, 4, dtype=torch.float64)
    out = unit(torch.randn(6, 4, dtype=torch.float64), v)
    assert torch.allclose(out, (v @ unit.w_v).expand(6, 4))


def test_attention_width_mismatch():
    with pytest.raises(ShapeError):
        CrossAttention(4)(torch.zeros(2, 4), torch.zeros(2, 3))


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(1, 9), m=st.integers(1, 9), scale=st.floats(0.01, 30))
def test_attention_rows_are_distributions(seed, n, m, scale):
    g = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    unit = CrossAttention(6).double()
    w = unit.weights(scale * torch.randn(n, 6, generator=g, dtype=torch.float64),
                     scale * torch.randn(m, 6, generator=g, dtype=torch.float64))
    assert torch.allclose(w.sum(-1), torch.ones(n, dtype=torch.float64), atol=1e-6)
    assert bool((w >= 0).all())


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), k=st.integers(1, 12), p=st.integers(1, 6), keep=st.integers(1, 12))
def test_projection_rows_are_distributions(seed, k, p, keep):
    torch.manual_seed(seed)
    proj = FocusProjection(8, p).double()
    x = torch.randn(k, 8, dtype=torch.float64) * 5
    mask = torch.arange(k) < min(keep, k)
    weighted, w = mgfp(x, proj, p, mask)
    assert w.shape == (p, k) and weighted.shape == (p, 8)
    assert torch.allclose(w.sum(-1), torch.ones(p, dtype=torch.float64), atol=1e-6)
    assert bool((w[:, ~mask] == 0).all())


def test_projection_selection_case():
    proj = FocusProjection(2, 1).double()
    with torch.no_grad():
        proj.conv1.weight.copy_(torch.tensor([[0.0, 1.0]]))  # hidden = tanh(second coordinate)
        proj.conv1.bias.zero_()
        proj.conv2.weight.fill_(1e4)
        proj.conv2.bias.zero_()
    ftilde = torch.tensor([[0.0, 2.0], [2.0, 0.0]], dtype=torch.float64)
    weighted, w = proj(ftilde)
    assert torch.allclose(w, torch.tensor([[1.0, 0.0]], dtype=torch.float64))
    assert torch.equal(weighted, ftilde[:1])


def test_half_half_projection():
    proj = FocusProjection(2, 1).double()
    with torch.no_grad():
        for p in proj.parameters():
            p.zero_()
    weighted, w = proj(torch.tensor([[0.0, 2.0], [2.0, 0.0]], dtype=torch.float64))
    assert torch.allclose(w, torch.tensor([[0.5, 0.5]], dtype=torch.float64))
    assert torch.allclose(weighted, torch.tensor([[1.0, 1.0]], dtype=torch.float64))


def test_average_projection():
    x = torch.tensor([[0.0, 2.0], [2.0, 0.0]])
    assert torch.equal(average_projection(x, 3), torch.ones(3, 2))
    assert torch.equal(average_projection(x[:1], 1), x[:1])
    mask = torch.tensor([True, False])
    assert torch.equal(average_projection(x, 2, mask), x[:1].expand(2, 2))


def test_focused_feature_layout():
    local, global_ = torch.randn(3, 4), torch.randn(3, 4)
    f = focused_feature(local, global_)
    assert f.shape == (6, 4) and torch.equal(f[0], local[0])
    a, b = split_focused(f)
    assert torch.equal(a, local) and torch.equal(b, global_)
    with pytest.raises(ShapeError):
        focused_feature(local, global_[:2])


def test_vfm_local_zero_inputs(cfg):
    params = VisualFocus(cfg).double()
    zeros = torch.zeros(cfg.C, cfg.D_I, dtype=torch.float64)
    out = vfm_local(zeros, zeros, params)
    assert out.shape == (cfg.C, cfg.D)
    assert torch.allclose(out, params.fc.bias.expand(cfg.C, cfg.D))


def test_vfm_global_symmetry_and_norms(cfg):
    bb = stub_backbones(cfg)
    params = VisualFocus(cfg).double()
    f_l = bb.image.penultimate(DOG)
    f_tilde = vfm_local(f_l, f_l, params)
    g = vfm_global(f_l, f_l, f_tilde, bb.image.final, params)
    assert g.shape == (3, cfg.D)
    assert torch.equal(g[0], g[1])
    assert torch.allclose(g.norm(dim=-1), torch.ones(3, dtype=g.dtype))


def test_tfm_degenerate_single_row(cfg):
    params = TextualFocus(cfg).double()
    for unit in (params.seg_query, params.text_query):
        with torch.no_grad():
            for w in (unit.w_q, unit.w_k, unit.w_v):
                w.copy_(torch.eye(cfg.D))
    v = torch.nn.functional.normalize(torch.randn(1, cfg.D, dtype=torch.float64), dim=-1)
    tokens = torch.randn(cfg.S, cfg.D_T, dtype=torch.float64)
    stack, local = tfm(v, v, tokens, params)
    assert stack.shape == (3, cfg.D) and local.shape == (cfg.S, cfg.D)
    assert torch.allclose(stack[2:], params.fuse(torch.cat([v, v], dim=-1)))
    assert torch.equal(stack[0], stack[1])


@pytest.mark.parametrize("P", [1, 2, 4])
def test_stage_shapes(P):
    cfg = HyperConfig.for_profile("stub", P=P)
    bb = stub_backbones(cfg)
    params = DualFocusMapping(cfg).double()
    seg = SegmentationRecord("x", "a red striped dog", DOG.keep_only({"red", "striped", "dog"}), "h")
    assert run_vfm(DOG, seg, bb, params, cfg).data.shape == (2 * P, cfg.D)
    assert run_vfm(DOG, seg, bb, params, cfg, stream="tgt").data.shape == (2 * P, cfg.D)
    assert run_tfm("change color to blue", seg, bb, params, cfg).data.shape == (2 * P, cfg.D)


def test_missing_segmentation_record(cfg):
    bb = stub_backbones(cfg)
    params = DualFocusMapping(cfg).double()
    with pytest.raises(PreprocessMissing, match="preprocess"):
        run_vfm(DOG, None, bb, params, cfg)
    with pytest.raises(PreprocessMissing):
        run_tfm("x", None, bb, params, cfg)


def _seg(image):
    return SegmentationRecord("x", "cap", image, "h")


@pytest.mark.parametrize("flags", [(), *[(f,) for f in ABLATION_FLAGS], ("no_FM", "no_MGFP")])
def test_shapes_under_flags(flags):
    cfg = HyperConfig.for_profile("stub", ablation_flags=frozenset(flags))
    bb = stub_backbones(cfg)
    params = DualFocusMapping(cfg).double()
    seg = _seg(DOG.keep_only({"dog"}))
    for stream in ("ref", "tgt"):
        assert run_vfm(DOG, seg, bb, params, cfg, stream).data.shape == (2 * cfg.P, cfg.D)
    assert run_tfm("make it blue", seg, bb, params, cfg).data.shape == (2 * cfg.P, cfg.D)


def test_no_fm_ignores_segmentation():
    cfg = HyperConfig.for_profile("stub", ablation_flags=frozenset({"no_FM"}))
    bb = stub_backbones(cfg)
    params = DualFocusMapping(cfg).double()
    a, b = _seg(DOG.keep_only({"dog"})), _seg(AttributeImage("cat", "blue"))
    assert torch.equal(run_vfm(DOG, a, bb, params, cfg).data, run_vfm(DOG, b, bb, params, cfg).data)
    assert torch.equal(run_tfm("make it blue", a, bb, params, cfg).data,
                       run_tfm("make it blue", b, bb, params, cfg).data)


@pytest.mark.parametrize("flag", ["no_FM", "no_VFM", "no_MGFP"])
def test_flag_changes_visual_output(flag):
    base = HyperConfig.for_profile("stub", seed=5)
    seg = _seg(DOG.keep_only({"dog", "red"}))
    outs = []
    for cfg in (base, base.replace(ablation_flags=frozenset({flag}))):
        torch.manual_seed(0)
        params = DualFocusMapping(cfg).double()
        outs.append(run_vfm(DOG, seg, stub_backbones(cfg), params, cfg).data)
    assert (outs[0] - outs[1]).norm() > 0


# -- golden fixtures -----------------------------------------------------------


def golden_outputs() -> dict[str, np.ndarray]:
    """Outputs of the stub pipeline on a fixed seed; pinned under tests/golden."""
    from focuscir.model import FocusComposer
    from focuscir.revision import reduce_channels, revision_weights

    cfg = HyperConfig.for_profile("stub", seed=11)
    bb = stub_backbones(cfg)
    model = FocusComposer(cfg)
    seg_image = DOG.keep_only({"dog", "red", "striped"})
    f_l, f_seg = bb.image.penultimate(DOG), bb.image.penultimate(seg_image)
    tokens, mask = bb.text.penultimate("change color to blue and make the pattern plain")
    with torch.no_grad():
        local = vfm_local(f_l, f_seg, model.mapping.visual)
        stack, text_local = tfm(bb.text.final(tokens, mask), bb.image.final(f_seg), tokens, model.mapping.textual)
        fr, _, _ = model.mapping.visual_path(f_l, f_seg, bb.image.final, "ref")
        fm, _, _ = model.mapping.text_path(tokens, mask, bb.text.final(tokens, mask), bb.image.final(f_seg))
        alpha, beta = revision_weights(reduce_channels(fr, model.revision.reduce_ref),
                                       reduce_channels(fm, model.revision.reduce_mod), model.revision)
        composed = model.compose(fr, fm)
    return {"vfm_local": local.numpy(), "tfm_global": stack.numpy(), "tfm_local": text_local.numpy(),
            "revision_alpha": alpha.numpy(), "revision_beta": beta.numpy(), "composed": composed.numpy()}


@pytest.mark.parametrize("name", ["vfm_local", "tfm_global", "tfm_local", "revision_alpha", "revision_beta",
                                  "composed"])
def test_golden(name):
    got = golden_outputs()[name]
    np.testing.assert_allclose(got, np.load(GOLDEN / f"{name}.npy"), rtol=0, atol=1e-12)


if __name__ == "__main__":
    GOLDEN.mkdir(exist_ok=True)
    for key, value in golden_outputs().items():
        np.save(GOLDEN / f"{key}.npy", value)
        print("wrote", key, value.shape)
