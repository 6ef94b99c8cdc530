import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import erf

from afformer.decoder import DecoderState
from afformer.heads import ActionHead, HeatmapHead, PredictionOutput, action_loss, heatmap_loss, total_loss
from oracles import central_differences, max_relative_error


def state(c, h, w, seed=0, b=1):
    g = torch.Generator().manual_seed(seed)
    return DecoderState(torch.randn(b, h * w, c, generator=g, dtype=torch.float64), 2, (h, w))


def test_ln4_case():
    gt = torch.tensor([[1.0, 0.0], [0.0, 0.0]], dtype=torch.float64)
    loss = heatmap_loss(gt, torch.zeros(2, 2, dtype=torch.float64))
    assert abs(loss.item() - math.log(4)) <= 1e-9


def test_matching_distribution_gives_zero():
    gt = torch.zeros(5, 5, dtype=torch.float64)
    gt[1:3, 2:4] = torch.tensor([[0.1, 0.2], [0.3, 0.4]], dtype=torch.float64)
    logits = torch.where(gt > 0, torch.log(gt.clamp_min(1e-300)), torch.full_like(gt, -1e4))
    assert abs(heatmap_loss(gt, logits).item()) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_heatmap_loss_nonnegative(h, w, seed):
    rng = np.random.default_rng(seed)
    gt = rng.random((h, w)) * (rng.random((h, w)) < 0.6)
    if gt.sum() == 0:
        gt[0, 0] = 1.0
    logits = rng.normal(scale=5, size=(h, w))
    assert heatmap_loss(torch.from_numpy(gt), torch.from_numpy(logits)).item() >= -1e-12


def test_heatmap_loss_shape_mismatch():
    with pytest.raises(ValueError, match="shape mismatch"):
        heatmap_loss(torch.ones(2, 2), torch.ones(2, 3))


def _kl_oracle(gt, logits):
    g = gt / gt.sum()
    p = np.exp(logits - logits.max())
    p /= p.sum()
    return sum(gi * math.log(gi / pi) for gi, pi in zip(g.ravel(), p.ravel()) if gi > 0)


def test_heatmap_loss_matches_direct_sum():
    rng = np.random.default_rng(3)
    gt = rng.random((6, 7)) * (rng.random((6, 7)) < 0.5)
    logits = rng.normal(size=(6, 7))
    got = heatmap_loss(torch.from_numpy(gt), torch.from_numpy(logits)).item()
    assert abs(got - _kl_oracle(gt, logits)) <= 1e-12


@pytest.mark.parametrize("uniform", [True, False])
def test_heatmap_loss_gradient(uniform):
    rng = np.random.default_rng(4)
    gt = rng.random((5, 6)) * (rng.random((5, 6)) < 0.7)
    logits = np.zeros((5, 6)) if uniform else rng.normal(size=(5, 6))
    x = torch.from_numpy(logits.ravel().copy()).requires_grad_(True)
    g = torch.from_numpy(gt)
    heatmap_loss(g, x.reshape(5, 6)).backward()
    num = central_differences(lambda v: heatmap_loss(g, torch.from_numpy(v).reshape(5, 6)).item(),
                              logits.ravel().copy(), 1e-4)
    assert max_relative_error(x.grad.numpy(), num) <= 1e-6


def test_total_loss_gradient():
    rng = np.random.default_rng(5)
    gt = torch.from_numpy(rng.random((2, 4, 4)))
    labels = torch.tensor([1, 3])
    hm = rng.normal(size=(2, 4, 4))
    act = rng.normal(size=(2, 3))
    x0 = np.concatenate([hm.ravel(), act.ravel()])

    def f(v):
        v = torch.as_tensor(v)
        return total_loss(PredictionOutput(v[:32].reshape(2, 4, 4), v[32:].reshape(2, 3)), gt, labels)

    x = torch.from_numpy(x0.copy()).requires_grad_(True)
    f(x).backward()
    num = central_differences(lambda v: f(v).item(), x0.copy(), 1e-4)
    assert max_relative_error(x.grad.numpy(), num) <= 1e-6


def test_total_loss_without_action_is_heatmap_loss():
    gt = torch.rand(2, 4, 4, dtype=torch.float64)
    logits = torch.randn(2, 4, 4, dtype=torch.float64)
    assert torch.equal(total_loss(PredictionOutput(logits), gt), heatmap_loss(gt, logits))


def test_total_loss_composition_and_margin():
    gt = torch.rand(2, 4, 4, dtype=torch.float64)
    logits = torch.randn(2, 4, 4, dtype=torch.float64)
    act = torch.randn(2, 3, dtype=torch.float64)
    labels = torch.tensor([2, 1])
    ce = -np.mean([torch.log_softmax(act[i], 0)[labels[i] - 1].item() for i in range(2)])
    got = total_loss(PredictionOutput(logits, act), gt, labels).item()
    assert abs(got - (heatmap_loss(gt, logits).item() + ce)) <= 1e-12
    confident = torch.tensor([[0.0, 60.0, 0.0], [60.0, 0.0, 0.0]], dtype=torch.float64)
    got = total_loss(PredictionOutput(logits, confident), gt, labels).item()
    assert abs(got - heatmap_loss(gt, logits).item()) <= 1e-12


def test_total_loss_presence_mismatch():
    gt = torch.rand(1, 2, 2)
    with pytest.raises(ValueError):
        total_loss(PredictionOutput(torch.zeros(1, 2, 2)), gt, torch.tensor([1]))
    with pytest.raises(ValueError):
        total_loss(PredictionOutput(torch.zeros(1, 2, 2), torch.zeros(1, 3)), gt)


def test_action_labels_out_of_range():
    with pytest.raises(ValueError, match="1..3"):
        action_loss(torch.zeros(2, 3), torch.tensor([0, 2]))
    with pytest.raises(ValueError):
        action_loss(torch.zeros(2, 3), torch.tensor([4, 2]))


@pytest.mark.parametrize("l_min,hw", [(2, (8, 8)), (1, (3, 5)), (3, (2, 4)), (0, (7, 6))])
def test_heatmap_head_shape(l_min, hw):
    torch.manual_seed(0)
    head = HeatmapHead(16, l_min).double()
    out = head(state(16, *hw, b=2), (hw[0] * 2**l_min, hw[1] * 2**l_min))
    assert out.shape == (2, hw[0] * 2**l_min, hw[1] * 2**l_min)


def test_heatmap_head_full_scale():
    torch.manual_seed(0)
    head = HeatmapHead(256, 2)
    s = DecoderState(torch.zeros(1, 64 * 64, 256), 2, (64, 64))
    with torch.no_grad():
        assert head(s, (256, 256)).shape == (1, 256, 256)
    assert len(head.layers) == 2


def test_heatmap_head_incompatible_target():
    head = HeatmapHead(8, 2).double()
    with pytest.raises(ValueError, match="cannot produce"):
        head(state(8, 4, 4), (15, 16))


def test_action_head_count_and_minimum():
    assert ActionHead(16, 7)(DecoderState(torch.zeros(1, 16, 16), 2, (4, 4))).shape == (1, 7)
    with pytest.raises(ValueError):
        ActionHead(16, 1)


def test_action_head_constant_state_ignores_layout():
    torch.manual_seed(0)
    head = ActionHead(8, 3).double()
    v = torch.randn(8, dtype=torch.float64)
    a = head(DecoderState(v.expand(1, 16, 8).clone(), 2, (4, 4)))
    b = head(DecoderState(v.expand(1, 6, 8).clone(), 2, (2, 3)))
    torch.testing.assert_close(a, b, atol=1e-12, rtol=0)


def test_action_head_pool_mlp_oracle():
    torch.manual_seed(1)
    head = ActionHead(4, 3, pool=1).double()
    s = state(4, 2, 3, seed=2)
    x = s.tokens[0].numpy().mean(axis=0)
    h = x @ head.fc1.weight.detach().numpy().T + head.fc1.bias.detach().numpy()
    h = 0.5 * h * (1 + erf(h / math.sqrt(2)))
    expected = h @ head.fc2.weight.detach().numpy().T + head.fc2.bias.detach().numpy()
    np.testing.assert_allclose(head(s).detach().numpy()[0], expected, atol=1e-6, rtol=0)
