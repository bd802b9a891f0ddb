import json
from pathlib import Path

import pytest
import torch

from facecycle.nets import (
    ARCH,
    BackboneWeightsMissing,
    FaceCycle,
    FeaturePyramid,
    ModulationParams,
    architecture_summary,
    load_checkpoint,
    renormalize,
    save_checkpoint,
)
from facecycle.train import stage1_forward, stage2_forward
from facecycle.losses import LossWeights

GOLDEN = Path(__file__).parent / "golden" / "architecture.json"


def random_pyramid(batch=2, seed=0):
    g = torch.Generator().manual_seed(seed)
    c_fine, c_coarse, _ = ARCH["vgg_channels"]
    return FeaturePyramid(
        torch.randn(batch, c_fine, 32, 32, generator=g).relu(),
        torch.randn(batch, c_coarse, 16, 16, generator=g).relu(),
    )


def test_architecture_matches_golden(model):
    assert architecture_summary(model) == json.loads(GOLDEN.read_text())


def test_codes_shape_and_determinism(model, photos):
    e1, e2 = model.encode_expression(photos), model.encode_expression(photos)
    assert e1.shape == (4, 256) and torch.equal(e1, e2)
    i1 = model.encode_identity(photos)
    assert i1.shape == (4, 256) and torch.equal(i1, model.encode_identity(photos))
    assert torch.isfinite(e1).all() and torch.isfinite(i1).all()


def test_flip_changes_expression_code(model, photos):
    code = model.encode_expression(photos)
    flipped = model.encode_expression(photos.flip(-1))
    assert (code - flipped).abs().max() > 1e-4


def test_fresh_flow_is_zero(model, photos):
    fw = model.decode_flow(model.encode_expression(photos))
    assert fw.shape == (4, 2, 64, 64)
    assert float(fw.detach().abs().max()) < 1.0
    assert torch.equal(model.decode_flow(torch.zeros(1, 256)), torch.zeros(1, 2, 64, 64))


def test_feature_pyramid(model, photos):
    pyr = model.extract_features(photos[:1], deep=True)
    assert pyr.fine.shape == (1, 128, 32, 32)
    assert pyr.coarse.shape == (1, 256, 16, 16)
    assert pyr.deep.shape == (1, 512, 8, 8)
    again = model.extract_features(photos[:1], deep=True)
    assert all(torch.equal(a, b) for a, b in zip(pyr.levels(), again.levels()))


def test_constant_image_constant_features(model):
    # 128 px so the deepest level still has cells whose receptive field misses the padding
    pyr = model.extract_features(torch.full((1, 3, 128, 128), 0.4), deep=True)
    for feat, margin in ((pyr.fine, 3), (pyr.coarse, 4), (pyr.deep, 5)):
        inner = feat[..., margin:-margin, margin:-margin]
        spread = (inner - inner[..., :1, :1]).abs().max()
        assert float(spread) <= 1e-5 * max(1.0, float(inner.abs().max()))


def test_backbone_is_frozen(model):
    assert not any(p.requires_grad for p in model.vgg.parameters())
    model.vgg.train()
    assert not model.vgg.training


def test_missing_backbone_weights(tmp_path, monkeypatch):
    monkeypatch.setenv("FACECYCLE_CACHE", str(tmp_path))
    with pytest.raises(BackboneWeightsMissing):
        FaceCycle(backbone_weights="vgg19-dcbb9e9d.pth")


def test_backbone_weights_loaded_from_cache(tmp_path, monkeypatch, model):
    import torchvision

    vgg = torchvision.models.vgg19(weights=None)
    torch.save(vgg.state_dict(), tmp_path / "weights.pth")
    monkeypatch.setenv("FACECYCLE_CACHE", str(tmp_path))
    m = FaceCycle(backbone_weights="weights.pth")
    assert torch.equal(m.vgg.to_fine[0].weight, vgg.features[0].weight)


def test_decoders_bounded(model):
    pyr = random_pyramid()
    out = model.decode_face_from_features(pyr)
    assert out.shape == (2, 3, 64, 64) and out.min() >= 0 and out.max() <= 1
    params = model.modulation_de(torch.randn(2, 256))
    out2 = model.decode_identity_face(pyr, params)
    assert out2.shape == (2, 3, 64, 64) and out2.min() >= 0 and out2.max() <= 1
    assert torch.equal(out2, model.decode_identity_face(pyr, params))


def test_no_nan_over_many_random_passes(model):
    g = torch.Generator().manual_seed(11)
    with torch.no_grad():
        for i in range(100):
            # 10 samples per pass, 1000 in total, with codes of varying scale
            code = torch.randn(10, 256, generator=g) * (1 + i % 5) * 3
            pyr = random_pyramid(10, seed=i)
            outs = [
                model.decode_flow(code),
                model.decode_face_from_features(pyr),
                model.decode_identity_face(pyr, model.modulation_re(code)),
            ]
            for o in outs:
                assert torch.isfinite(o).all()
            assert outs[1].min() >= 0 and outs[1].max() <= 1 and outs[2].min() >= 0 and outs[2].max() <= 1


def test_renormalize_examples():
    x = torch.randn(1, 1, 16, 16, dtype=torch.float64)
    x = (x - x.mean()) / x.std(unbiased=False) * 2 + 5
    out = renormalize(x, ModulationParams(torch.zeros(1, 1, dtype=torch.float64), torch.ones(1, 1, dtype=torch.float64)))
    assert abs(float(out.mean())) < 1e-5 and abs(float(out.std(unbiased=False)) - 1) < 1e-5
    own = ModulationParams(x.mean(dim=(2, 3)), x.std(dim=(2, 3), unbiased=False))
    torch.testing.assert_close(renormalize(x, own), x, atol=1e-5, rtol=0)


def test_renormalize_flat_channel():
    x = torch.full((1, 2, 4, 4), 3.0)
    out = renormalize(x, ModulationParams(torch.tensor([[0.7, -2.0]]), torch.tensor([[1.5, 0.2]])))
    assert torch.isfinite(out).all()
    assert torch.equal(out[0, 0], torch.full((4, 4), 0.7)) and torch.equal(out[0, 1], torch.full((4, 4), -2.0))


def test_renormalize_channel_mismatch():
    with pytest.raises(ValueError):
        renormalize(torch.zeros(1, 3, 4, 4), ModulationParams(torch.zeros(1, 2), torch.ones(1, 2)))


def test_modulation_params(model):
    g = torch.Generator().manual_seed(0)
    codes = torch.randn(2, 256, generator=g) * 10
    for mlp in (model.modulation_de, model.modulation_re):
        p = mlp(codes)
        assert p.mean.shape == (2, 256) and (p.std > 0).all()
        assert (p.mean[0] - p.mean[1]).abs().max() > 1e-4
        assert torch.equal(p.std, mlp(codes).std)
    p = model.modulation_de(-1e4 * torch.ones(1, 256))
    assert (p.std > 0).all()


def test_stage_modules_disjoint(model):
    s1 = {id(p) for p in model.stage_parameters(1)}
    s2 = {id(p) for p in model.stage_parameters(2)}
    vgg = {id(p) for p in model.vgg.parameters()}
    assert not (s1 & s2) and not (s1 & vgg) and not (s2 & vgg)
    assert s1 | s2 | vgg == {id(p) for p in model.parameters()}


def _grad_coverage(params):
    params = list(params)
    total = sum(p.numel() for p in params)
    nonzero = sum(int((p.grad != 0).sum()) for p in params if p.grad is not None)
    return nonzero / total


def test_gradients_reach_every_stage1_parameter(photos):
    torch.manual_seed(0)
    m = FaceCycle(backbone_weights="random").set_stage(1)
    opt = torch.optim.Adam(m.stage_parameters(1), lr=1e-3)
    w = LossWeights()
    # the zero-initialized flow head blocks upstream gradients until its first update
    rep, _ = stage1_forward(m, photos[:2], photos[:2].flip(-1), w)
    opt.zero_grad()
    rep.total.backward()
    opt.step()
    opt.zero_grad()
    rep, _ = stage1_forward(m, photos[:2], photos[:2].flip(-1), w)
    rep.total.backward()
    assert _grad_coverage(m.stage_parameters(1)) > 0.99
    assert all(p.grad is None for p in m.vgg.parameters())


def test_gradients_reach_every_stage2_parameter(photos):
    torch.manual_seed(0)
    m = FaceCycle(backbone_weights="random").set_stage(2)
    rep, _ = stage2_forward(m, photos[:2], photos[2:], LossWeights(alpha_margin=0.0))
    rep.total.backward()
    assert _grad_coverage(m.stage_parameters(2)) > 0.99
    assert all(p.grad is None for p in m.stage_parameters(1))


def test_checkpoint_round_trip(tmp_path, model, photos):
    path = save_checkpoint(tmp_path / "c.pt", model, stage=1, step=7)
    assert not (tmp_path / "c.pt.tmp").exists()
    m2, payload = load_checkpoint(path)
    assert payload["meta"] == {
        "format_version": 1, "d_exp": 256, "d_id": 256, "image_size": 64,
        "backbone_weights": "random", "stage": 1, "step": 7,
    }
    assert m2.trained_stage == 1
    m2.eval()
    assert torch.equal(m2.encode_expression(photos), model.encode_expression(photos))
    assert not any(k.startswith("vgg.") for k in payload["model"])
