import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from depthdbd import losses as L
from depthdbd.distillation import Projector
from depthdbd.exceptions import ConfigurationError, DimensionError
from depthdbd.model import EncoderOutput, ModelOutput

from . import oracles


def t64(a):
    return torch.as_tensor(np.asarray(a), dtype=torch.float64)


def fake_output(final, sides, depth=None, side_depth=None):
    return ModelOutput(t64(final), [t64(s) for s in sides], EncoderOutput([]),
                       None if depth is None else t64(depth),
                       None if side_depth is None else [t64(d) for d in side_depth])


# -- bce ---------------------------------------------------------------------

def test_bce_half_is_ln2():
    p = torch.full((1, 1, 4, 4), 0.5, dtype=torch.float64)
    assert L.bce_loss(p, p).item() == pytest.approx(math.log(2), rel=1e-12)


def test_bce_perfect_prediction_hits_clamp_floor():
    y = t64(np.random.default_rng(0).integers(0, 2, (1, 1, 4, 4)))
    assert L.bce_loss(y.clone(), y).item() <= -math.log(1 - 1e-7) + 1e-12


def test_bce_matches_pixel_loop():
    rng = np.random.default_rng(1)
    p, y = rng.random((1, 1, 4, 4)), rng.random((1, 1, 4, 4))
    assert L.bce_loss(t64(p), t64(y)).item() == pytest.approx(oracles.bce(p, y), rel=1e-12)


def test_bce_shape_mismatch():
    with pytest.raises(DimensionError):
        L.bce_loss(torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 4, 5))


# -- edges and dice ----------------------------------------------------------

def test_all_ones_mask_has_no_edge():
    assert L.extract_edges(torch.ones(1, 1, 8, 8)).sum() == 0


def test_square_edges_match_neighbourhood_scan():
    m = np.zeros((8, 8))
    m[2:6, 2:6] = 1
    got = L.extract_edges(t64(m)[None, None])[0, 0].numpy()
    np.testing.assert_array_equal(got, oracles.hard_edges(m))
    # outer ring of the dilated 6x6 block minus the eroded 2x2 core
    assert got.sum() == 32


def test_checkerboard_is_all_edge():
    m = np.indices((8, 8)).sum(0) % 2
    assert L.extract_edges(t64(m)[None, None]).min() == 1


def test_soft_edges_match_loop():
    p = np.random.default_rng(2).random((6, 7))
    np.testing.assert_allclose(L.soft_edges(t64(p)[None, None])[0, 0].numpy(),
                               oracles.soft_edges(p), rtol=0, atol=1e-15)


def test_dice_identical_edges_near_zero():
    e = L.extract_edges(t64(np.pad(np.ones((4, 4)), 2))[None, None])
    loss = L.dice_edge_loss(e, e).item()
    assert loss == pytest.approx(0.0, abs=1e-12)


def test_dice_disjoint_edges_near_one():
    a = torch.zeros(1, 1, 8, 8, dtype=torch.float64)
    b = a.clone()
    a[..., :2, :] = 1
    b[..., 6:, :] = 1
    # 1 - smooth / (16 + 16 + smooth)
    assert L.dice_edge_loss(a, b).item() == pytest.approx(1 - 1 / 33, rel=1e-12)


def test_dice_both_empty_is_zero():
    z = torch.zeros(2, 1, 5, 5)
    assert L.dice_edge_loss(z, z).item() == 0.0


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_dice_range_on_binary_edges(seed):
    rng = np.random.default_rng(seed)
    a = t64(rng.integers(0, 2, (1, 1, 5, 5)))
    b = t64(rng.integers(0, 2, (1, 1, 5, 5)))
    loss = L.dice_edge_loss(a, b).item()
    assert 0.0 <= loss <= 1.0
    if torch.equal(a, b):
        assert loss == pytest.approx(0.0, abs=1e-12)
    else:
        assert loss > 0


# -- dbd loss ----------------------------------------------------------------

def test_dbd_lambda_zero_is_bce_exactly():
    rng = np.random.default_rng(3)
    p, y = t64(rng.random((2, 1, 8, 8))), t64(rng.integers(0, 2, (2, 1, 8, 8)))
    w = L.LossWeights(lambda_edge=0.0)
    assert L.dbd_loss(p, y, w).item() == L.bce_loss(p, y).item()


def test_dbd_perfect_prediction_near_floor():
    y = torch.zeros(1, 1, 8, 8, dtype=torch.float64)
    y[..., 2:6, 2:6] = 1
    # soft edges of a perfect binary map equal the label edges
    assert L.dbd_loss(y.clone(), y, L.LossWeights()).item() <= -math.log(1 - 1e-7) + 1e-12


def test_dbd_random_matches_composed_oracles():
    rng = np.random.default_rng(4)
    p, y = rng.random((1, 1, 8, 8)), rng.integers(0, 2, (1, 1, 8, 8)).astype(float)
    got = L.dbd_loss(t64(p), t64(y), L.LossWeights(lambda_edge=0.5)).item()
    assert got == pytest.approx(oracles.dbd(p[0, 0], y[0, 0], 0.5), rel=1e-12)


def test_doubling_lambda_doubles_edge_contribution():
    rng = np.random.default_rng(5)
    p, y = t64(rng.random((2, 1, 8, 8))), t64(rng.integers(0, 2, (2, 1, 8, 8)))
    base = L.dbd_loss(p, y, L.LossWeights(lambda_edge=0)).item()
    one = L.dbd_loss(p, y, L.LossWeights(lambda_edge=0.5)).item() - base
    two = L.dbd_loss(p, y, L.LossWeights(lambda_edge=1.0)).item() - base
    assert two == pytest.approx(2 * one, rel=1e-12)


# -- pairwise similarity -----------------------------------------------------

def test_pairwise_identity_and_antipode_and_scale():
    u = t64(np.random.default_rng(6).normal(size=(3, 4, 2, 2)))
    assert L.pairwise_similarity_loss(u, u).item() == pytest.approx(0, abs=1e-14)
    assert L.pairwise_similarity_loss(u, -u).item() == pytest.approx(4, rel=1e-14)
    assert L.pairwise_similarity_loss(u, 7.5 * u).item() == pytest.approx(0, abs=1e-14)


def test_pairwise_zero_norm():
    u = torch.zeros(1, 2, 2, 2)
    v = torch.ones(1, 2, 2, 2)
    with pytest.raises(ValueError):
        L.pairwise_similarity_loss(u, v)
    assert math.isfinite(L.pairwise_similarity_loss(u, v, eps=1e-12).item())


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 100), st.floats(0.01, 100))
def test_pairwise_symmetric_scale_invariant_bounded(seed, a, b):
    rng = np.random.default_rng(seed)
    u, v = t64(rng.normal(size=(2, 3, 2, 2))), t64(rng.normal(size=(2, 3, 2, 2)))
    base = L.pairwise_similarity_loss(u, v).item()
    assert L.pairwise_similarity_loss(v, u).item() == pytest.approx(base, rel=1e-12, abs=1e-14)
    assert L.pairwise_similarity_loss(a * u, b * v).item() == pytest.approx(base, rel=1e-10, abs=1e-14)
    assert 0 <= base <= 4 + 1e-12


# -- feature distillation ----------------------------------------------------

class _Fixed(torch.nn.Module):
    def __init__(self, out):
        super().__init__()
        self.out = out

    def forward(self, x):
        return self.out


def test_feature_loss_zero_when_projections_match_teachers():
    rng = np.random.default_rng(7)
    t1, t2 = t64(rng.normal(size=(1, 6, 2, 2))), t64(rng.normal(size=(1, 8, 2, 2)))
    s = t64(rng.normal(size=(1, 4, 2, 2)))
    assert L.feature_distill_loss(s, t1, t2, _Fixed(t1), _Fixed(t2)).item() == pytest.approx(0, abs=1e-14)


def test_feature_loss_invariant_to_student_scale_with_linear_projectors():
    rng = np.random.default_rng(8)
    s = t64(rng.normal(size=(1, 4, 2, 2)))
    t1, t2 = t64(rng.normal(size=(1, 4, 2, 2))), t64(rng.normal(size=(1, 4, 2, 2)))
    ident = torch.nn.Identity()
    a = L.feature_distill_loss(s, t1, t2, ident, ident).item()
    b = L.feature_distill_loss(10 * s, t1, t2, ident, ident).item()
    assert b == pytest.approx(a, rel=1e-12)


def test_feature_loss_matches_flattened_oracle():
    rng = np.random.default_rng(9)
    s = rng.normal(size=(1, 4, 2, 2))
    t1, t2 = rng.normal(size=(1, 6, 2, 2)), rng.normal(size=(1, 8, 2, 2))
    p1, p2 = Projector(4, 6).double(), Projector(4, 8).double()
    w1 = p1.conv.weight.detach().numpy()[:, :, 0, 0]
    b1 = p1.conv.bias.detach().numpy()
    w2 = p2.conv.weight.detach().numpy()[:, :, 0, 0]
    b2 = p2.conv.bias.detach().numpy()
    expected = (oracles.pairwise(oracles.conv1x1(s, w1, b1), t1)
                + oracles.pairwise(oracles.conv1x1(s, w2, b2), t2))
    got = L.feature_distill_loss(t64(s), t64(t1), t64(t2), p1, p2).item()
    assert got == pytest.approx(expected, rel=1e-10)


def test_feature_loss_channel_mismatch():
    s = torch.randn(1, 4, 2, 2)
    with pytest.raises(DimensionError):
        L.feature_distill_loss(s, torch.randn(1, 6, 2, 2), torch.randn(1, 8, 2, 2),
                               Projector(4, 5), Projector(4, 8))


def test_feature_loss_gradients_skip_teachers():
    s = torch.randn(1, 4, 2, 2, requires_grad=True)
    t1 = torch.randn(1, 6, 2, 2, requires_grad=True)
    t2 = torch.randn(1, 8, 2, 2, requires_grad=True)
    p1, p2 = Projector(4, 6), Projector(4, 8)
    L.feature_distill_loss(s, t1, t2, p1, p2).backward()
    assert s.grad is not None and s.grad.abs().sum() > 0
    assert p1.conv.weight.grad.abs().sum() > 0 and p2.conv.weight.grad.abs().sum() > 0
    assert t1.grad is None and t2.grad is None


# -- stage totals ------------------------------------------------------------

def _random_output(rng, b=1, hw=8):
    final = rng.uniform(0.05, 0.95, (b, 1, hw, hw))
    sides = [rng.uniform(0.05, 0.95, (b, 1, hw, hw)) for _ in range(4)]
    return final, sides


def test_stage1_alpha_zero_is_final_only():
    rng = np.random.default_rng(10)
    final, sides = _random_output(rng)
    y = t64(rng.integers(0, 2, final.shape))
    w = L.LossWeights(alpha_side=[0, 0, 0, 0])
    assert L.stage1_total(fake_output(final, sides), y, w).item() == \
        L.dbd_loss(t64(final), y, w).item()


def test_stage1_replicated_predictions():
    rng = np.random.default_rng(11)
    final, _ = _random_output(rng)
    y = t64(rng.integers(0, 2, final.shape))
    w = L.LossWeights()
    got = L.stage1_total(fake_output(final, [final] * 4), y, w).item()
    assert got == pytest.approx(5 * L.dbd_loss(t64(final), y, w).item(), rel=1e-12)


def test_stage1_matches_five_oracle_terms():
    rng = np.random.default_rng(12)
    final, sides = _random_output(rng)
    y = rng.integers(0, 2, final.shape).astype(float)
    alphas = [1.0, 0.5, 2.0, 1.5]
    got = L.stage1_total(fake_output(final, sides), t64(y),
                         L.LossWeights(alpha_side=alphas)).item()
    expected = oracles.dbd(final[0, 0], y[0, 0], 0.5) + sum(
        a * oracles.dbd(s[0, 0], y[0, 0], 0.5) for a, s in zip(alphas, sides))
    assert got == pytest.approx(expected, rel=1e-12)


def test_stage1_wrong_number_of_side_weights():
    rng = np.random.default_rng(13)
    final, sides = _random_output(rng)
    with pytest.raises(ConfigurationError):
        L.stage1_total(fake_output(final, sides), t64(final), L.LossWeights(alpha_side=[1, 1]))


def test_stage2_reduces_to_stage1():
    rng = np.random.default_rng(14)
    final, sides = _random_output(rng)
    y = t64(rng.integers(0, 2, final.shape))
    out = fake_output(final, sides)
    s1 = L.stage1_total(out, y, L.LossWeights()).item()
    feat = torch.tensor(0.7, dtype=torch.float64)
    assert L.stage2_total(out, y, feat, L.LossWeights(beta_now=0)).item() == s1
    zero = torch.tensor(0.0, dtype=torch.float64)
    assert L.stage2_total(out, y, zero, L.LossWeights(beta_now=3)).item() == s1


def test_stage2_adds_beta_times_feature_loss():
    rng = np.random.default_rng(15)
    final, sides = _random_output(rng)
    y = rng.integers(0, 2, final.shape).astype(float)
    u, v = rng.normal(size=(1, 4, 2, 2)), rng.normal(size=(1, 4, 2, 2))
    feat = L.pairwise_similarity_loss(t64(u), t64(v))
    got = L.stage2_total(fake_output(final, sides), t64(y), feat,
                         L.LossWeights(beta_now=2)).item()
    expected = oracles.dbd(final[0, 0], y[0, 0], 0.5) + sum(
        oracles.dbd(s[0, 0], y[0, 0], 0.5) for s in sides) + 2 * oracles.pairwise(u, v)
    assert got == pytest.approx(expected, rel=1e-12)


# -- beta schedule -----------------------------------------------------------

@pytest.mark.parametrize("epoch,last,expected", [(10, 75, 3.0), (16, 75, 0.04), (75, 75, 2.4)])
def test_beta_schedule_pinned(epoch, last, expected):
    assert L.beta_schedule(epoch, last) == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("epoch,last", [(0, 75), (76, 75), (1, 0)])
def test_beta_schedule_out_of_range(epoch, last):
    with pytest.raises(ValueError):
        L.beta_schedule(epoch, last)


# -- rdffnet -----------------------------------------------------------------

def test_rdffnet_lambda_zero_is_stage1():
    rng = np.random.default_rng(16)
    final, sides = _random_output(rng)
    y = t64(rng.integers(0, 2, final.shape))
    d = rng.random(final.shape)
    out = fake_output(final, sides, d + 1, [d * 2] * 4)
    w = L.LossWeights(rdffnet_lambda=0)
    assert L.rdffnet_total(out, y, t64(d), w).item() == L.stage1_total(out, y, w).item()


def test_rdffnet_depth_terms_vanish_on_exact_heads():
    rng = np.random.default_rng(17)
    final, sides = _random_output(rng)
    y = t64(rng.integers(0, 2, final.shape))
    d = rng.random(final.shape)
    out = fake_output(final, sides, d, [d] * 4)
    for kind in ("normalized", "mse"):
        w = L.LossWeights(depth_loss=kind)
        assert L.rdffnet_total(out, y, t64(d), w).item() == pytest.approx(
            L.stage1_total(out, y, w).item(), rel=1e-12)


def test_rdffnet_matches_oracle():
    rng = np.random.default_rng(18)
    final, sides = _random_output(rng)
    y = rng.integers(0, 2, final.shape).astype(float)
    d = rng.random(final.shape)
    dfin = rng.random(final.shape)
    dsides = [rng.random(final.shape) for _ in range(4)]
    got = L.rdffnet_total(fake_output(final, sides, dfin, dsides), t64(y), t64(d),
                          L.LossWeights()).item()
    expected = (oracles.dbd(final[0, 0], y[0, 0], 0.5)
                + sum(oracles.dbd(s[0, 0], y[0, 0], 0.5) for s in sides)
                + oracles.pairwise(dfin, d) + sum(oracles.pairwise(s, d) for s in dsides))
    assert got == pytest.approx(expected, rel=1e-12)


def test_rdffnet_needs_depth_heads():
    rng = np.random.default_rng(19)
    final, sides = _random_output(rng)
    with pytest.raises(ConfigurationError):
        L.rdffnet_total(fake_output(final, sides), t64(final), t64(final), L.LossWeights())


def test_negative_weights_rejected():
    with pytest.raises(ConfigurationError):
        L.LossWeights(lambda_edge=-1)
