import numpy as np
import pytest
import torch

from depthdbd import losses
from depthdbd.exceptions import ConfigurationError, DimensionError
from depthdbd.model import (DBDNet, ModelConfig, build_model, count_parameters, encoder_features,
                            forward, load_checkpoint, parameter_digest, save_checkpoint,
                            spatial_attention)


def tiny(**kw):
    return ModelConfig(**{"backbone_id": "tiny", "input_size": (64, 64), **kw})


@pytest.fixture(scope="module")
def net():
    return build_model(tiny(), seed=0).eval()


def test_full_resolution_shapes():
    m = build_model(tiny(input_size=(320, 320), base_channels=4), seed=0).eval()
    with torch.no_grad():
        out = m(torch.rand(2, 3, 320, 320))
    assert out.final_prediction.shape == (2, 1, 320, 320)
    assert len(out.side_predictions) == 4
    assert all(s.shape == (2, 1, 320, 320) for s in out.side_predictions)


def test_zero_image_outputs_in_unit_range(net):
    with torch.no_grad():
        out = net(torch.zeros(1, 3, 64, 64))
    for t in [out.final_prediction, *out.side_predictions]:
        assert torch.isfinite(t).all() and t.min() >= 0 and t.max() <= 1


def test_extreme_inputs_stay_in_range(net):
    with torch.no_grad():
        out = net(torch.randn(2, 3, 64, 64) * 1e3)
    assert out.final_prediction.min() >= 0 and out.final_prediction.max() <= 1


def test_inference_is_deterministic(net):
    x = torch.rand(2, 3, 64, 64)
    with torch.no_grad():
        a, b = net(x), net(x)
    assert torch.equal(a.final_prediction, b.final_prediction)


def test_same_seed_same_parameters():
    a, b = build_model(tiny(), seed=5), build_model(tiny(), seed=5)
    assert parameter_digest(a) == parameter_digest(b)
    assert parameter_digest(a) != parameter_digest(build_model(tiny(), seed=6))


def test_pdnet_drops_dffm_and_attention():
    full = build_model(tiny(), seed=0)
    pd = build_model(tiny(variant="pdnet"), seed=0)
    assert not any(n.startswith("dffm") for n, _ in pd.named_parameters())
    assert any(n.startswith("dffm") for n, _ in full.named_parameters())
    assert not pd.use_attention and full.use_attention
    assert count_parameters(pd) < count_parameters(full)
    assert {n for n, _ in pd.named_parameters()} < {n for n, _ in full.named_parameters()}


@pytest.mark.parametrize("kw", [
    {"input_size": (60, 64)},
    {"backbone_id": "huge"},
    {"num_decoder_levels": 0},
    {"variant": "unet"},
])
def test_bad_configs(kw):
    with pytest.raises(ConfigurationError):
        build_model(tiny(**kw))


def test_wrong_input_size(net):
    with pytest.raises(DimensionError):
        net(torch.rand(1, 3, 32, 32))


def test_final_feature_is_four_by_four(net):
    enc = encoder_features(net, torch.rand(1, 3, 64, 64))
    assert len(enc.stage_features) == 4
    assert enc.final_feature.shape[-2:] == (4, 4)
    assert enc.final_feature.shape[1] == net.encoder_widths[-1]
    sizes = [f.shape[-1] for f in enc.stage_features]
    assert sizes == [32, 16, 8, 4]


def test_encoder_features_alias_forward(net):
    x = torch.rand(2, 3, 64, 64)
    with torch.no_grad():
        a = encoder_features(net, x).final_feature
        b = forward(net, x).encoder.final_feature
    assert torch.equal(a, b)


def test_medium_backbone_runs():
    m = build_model(tiny(backbone_id="medium"), seed=0).eval()
    with torch.no_grad():
        out = m(torch.rand(1, 3, 64, 64))
    assert out.final_prediction.shape == (1, 1, 64, 64)
    assert out.encoder.final_feature.shape[1] == m.encoder_widths[-1]


# -- spatial attention -------------------------------------------------------

def test_attention_identity_and_null():
    f = torch.randn(1, 4, 8, 8)
    assert torch.equal(spatial_attention(torch.ones(1, 1, 8, 8), f), f)
    assert spatial_attention(torch.zeros(1, 1, 8, 8), f).abs().max() == 0


def test_attention_pixel_loop():
    g = torch.Generator().manual_seed(0)
    f = torch.randn(1, 4, 8, 8, generator=g, dtype=torch.float64)
    p = torch.rand(1, 1, 8, 8, generator=g, dtype=torch.float64)
    out = spatial_attention(p, f)
    for c in range(4):
        for i in range(8):
            for j in range(8):
                assert out[0, c, i, j].item() == f[0, c, i, j].item() * p[0, 0, i, j].item()


def test_attention_resizes_and_checks_batch():
    f = torch.randn(2, 3, 4, 4)
    assert spatial_attention(torch.rand(2, 1, 8, 8), f).shape == f.shape
    with pytest.raises(DimensionError):
        spatial_attention(torch.rand(1, 1, 4, 4), f)
    with pytest.raises(DimensionError):
        spatial_attention(torch.rand(2, 2, 4, 4), f)


# -- properties --------------------------------------------------------------

@pytest.mark.parametrize("variant", ["dffnet", "pdnet"])
def test_every_parameter_receives_gradient(variant):
    m = build_model(tiny(variant=variant), seed=1).train()
    x = torch.rand(2, 3, 64, 64)
    y = (torch.rand(2, 1, 64, 64) > 0.5).float()
    losses.stage1_total(m(x), y, losses.LossWeights()).backward()
    missing = [n for n, p in m.named_parameters() if p.grad is None]
    assert not missing


def test_batch_permutation_equivariance(net):
    x = torch.rand(4, 3, 64, 64)
    perm = torch.tensor([2, 0, 3, 1])
    with torch.no_grad():
        a = net(x).final_prediction[perm]
        b = net(x[perm]).final_prediction
    torch.testing.assert_close(a, b, rtol=1e-5, atol=1e-6)


def test_depth_heads_present_when_requested():
    m = build_model(tiny(depth_heads=True), seed=0).eval()
    with torch.no_grad():
        out = m(torch.rand(1, 3, 64, 64))
    assert out.depth_prediction.shape == (1, 1, 64, 64)
    assert len(out.side_depth_predictions) == 4


# -- checkpoints -------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path, net):
    save_checkpoint(tmp_path / "m.pt", net, note="x")
    back = load_checkpoint(tmp_path / "m.pt", tiny())
    assert isinstance(back, DBDNet)
    assert parameter_digest(back) == parameter_digest(net)
    x = torch.rand(1, 3, 64, 64)
    with torch.no_grad():
        assert torch.equal(back.eval()(x).final_prediction, net(x).final_prediction)


def test_checkpoint_config_mismatch(tmp_path, net):
    save_checkpoint(tmp_path / "m.pt", net)
    with pytest.raises(ConfigurationError):
        load_checkpoint(tmp_path / "m.pt", tiny(variant="pdnet"))


def test_config_dict_round_trip():
    c = tiny(base_channels=4, variant="pdnet")
    assert ModelConfig.from_dict(c.to_dict()) == c
    assert np.prod(c.input_size) == 4096
