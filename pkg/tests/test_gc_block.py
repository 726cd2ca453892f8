import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from gcdet import ConfigError, GCConfig, GlobalContextBlock, NumericError, gc_param_count
from gcdet.detector import DetectorConfig

from conftest import softmax_np


def randomize_block(block, seed):
    """Give every weight (including the zero-initialized expand conv) a value."""
    g = torch.Generator().manual_seed(seed)
    for p in block.parameters():
        p.data.uniform_(-0.5, 0.5, generator=g)
    return block


def gc_forward_oracle(x, block):
    """Position-by-position recomputation of the block with explicit loops."""
    xd = x.detach().numpy().astype(np.float64)
    n, c, h, w = xd.shape
    cw = block.cfg.bottleneck_width
    attn_w = block.attn.weight.detach().numpy().reshape(c).astype(np.float64)
    attn_b = float(block.attn.bias.detach())
    w1 = block.squeeze.weight.detach().numpy().reshape(cw, c).astype(np.float64)
    b1 = block.squeeze.bias.detach().numpy().astype(np.float64)
    g1 = block.norm.weight.detach().numpy().reshape(cw).astype(np.float64)
    g0 = block.norm.bias.detach().numpy().reshape(cw).astype(np.float64)
    w2 = block.expand.weight.detach().numpy().reshape(c, cw).astype(np.float64)
    b2 = block.expand.bias.detach().numpy().astype(np.float64)

    out = np.empty_like(xd)
    for i in range(n):
        flat = xd[i].reshape(c, h * w)
        logits = np.array(
            [sum(attn_w[k] * flat[k, j] for k in range(c)) + attn_b for j in range(h * w)]
        )
        alpha = softmax_np(logits)
        ctx = np.array([sum(alpha[j] * flat[k, j] for j in range(h * w)) for k in range(c)])
        z = w1 @ ctx + b1
        mu = z.mean()
        var = ((z - mu) ** 2).mean()
        z = g1 * (z - mu) / math.sqrt(var + 1e-5) + g0
        z = np.maximum(z, 0.0)
        y = w2 @ z + b2
        out[i] = xd[i] + y[:, None, None]
    return out


def test_shape_preservation():
    block = GlobalContextBlock(64, ratio=8)
    x = torch.randn(2, 64, 8, 8)
    assert block(x).shape == x.shape


def test_zero_init_identity_is_exact():
    block = GlobalContextBlock(16, ratio=4)
    x = torch.randn(3, 16, 5, 7)
    assert torch.equal(block(x), x)


@pytest.mark.parametrize("channels,ratio,shape", [(4, 8, (1, 4, 2, 2)), (8, 2, (1, 8, 3, 2))])
def test_forward_matches_loop_oracle(channels, ratio, shape):
    block = randomize_block(GlobalContextBlock(channels, ratio=ratio), seed=11).double()
    rng = np.random.default_rng(5)
    x = torch.tensor(rng.normal(size=shape), dtype=torch.float64)
    got = block(x).detach().numpy()
    want = gc_forward_oracle(x, block)
    assert np.allclose(got, want, rtol=1e-6, atol=1e-9)


def test_attention_weights_sum_to_one():
    block = randomize_block(GlobalContextBlock(12, ratio=3), seed=3)
    x = torch.randn(4, 12, 6, 5)
    alpha = block.attention_weights(x)
    assert torch.allclose(alpha.sum(dim=1), torch.ones(4), atol=1e-6)


def test_constant_map_gives_uniform_attention_and_mean_context():
    block = randomize_block(GlobalContextBlock(6, ratio=2), seed=9)
    # spatially constant per channel, different across channels/samples
    base = torch.randn(2, 6, 1, 1)
    x = base.expand(2, 6, 4, 3).contiguous()
    alpha = block.attention_weights(x)
    assert torch.allclose(alpha, torch.full_like(alpha, 1.0 / 12), atol=1e-6)
    ctx = torch.bmm(x.view(2, 6, 12), alpha.unsqueeze(2)).squeeze(2)
    assert torch.allclose(ctx, x.mean(dim=(2, 3)), atol=1e-6)


def test_gradients_match_central_finite_differences():
    block = randomize_block(GlobalContextBlock(4, ratio=2), seed=21).double()
    rng = np.random.default_rng(17)
    x = torch.tensor(rng.normal(size=(1, 4, 3, 3)), dtype=torch.float64, requires_grad=True)
    weight = torch.tensor(rng.normal(size=(1, 4, 3, 3)), dtype=torch.float64)

    loss = (block(x) * weight).sum()
    loss.backward()
    analytic = x.grad.detach().numpy()

    h = 1e-4
    flat = x.detach().clone().view(-1)
    fd = np.zeros(flat.numel())
    with torch.no_grad():
        for i in range(flat.numel()):
            for sign in (+1, -1):
                probe = flat.clone()
                probe[i] += sign * h
                val = (block(probe.view(1, 4, 3, 3)) * weight).sum()
                fd[i] += sign * float(val)
    fd = (fd / (2 * h)).reshape(analytic.shape)
    denom = max(np.abs(fd).max(), 1e-12)
    assert np.abs(analytic - fd).max() / denom < 1e-3


def test_channel_mismatch_raises_config_error():
    block = GlobalContextBlock(8)
    with pytest.raises(ConfigError):
        block(torch.randn(1, 6, 4, 4))


def test_non_finite_input_raises_numeric_error():
    block = GlobalContextBlock(4)
    x = torch.randn(1, 4, 2, 2)
    x[0, 0, 0, 0] = float("nan")
    with pytest.raises(NumericError):
        block(x)


def test_param_count_examples():
    assert gc_param_count(256, 8) == 16993
    assert gc_param_count(8, 8) == 36


@pytest.mark.parametrize("channels,ratio", [(256, 8), (8, 8), (12, 5), (64, 16), (3, 7)])
def test_param_count_matches_instantiated_block(channels, ratio):
    block = GlobalContextBlock(channels, ratio=ratio)
    actual = sum(p.numel() for p in block.parameters())
    assert actual == gc_param_count(channels, ratio)


def test_closed_form_when_divisible():
    for c, r in [(256, 8), (512, 8), (128, 4)]:
        assert gc_param_count(c, r) == 2 * c * c // r + 3 * c // r + 2 * c + 1


def test_large_neck_placement_total_within_reference_band():
    cfg = DetectorConfig(size="L", gc_enabled=True)
    total = sum(gc_param_count(c, 8) for c in cfg.gc_channel_widths())
    assert 0.05e6 <= total <= 0.35e6


@settings(max_examples=60, deadline=None)
@given(c=st.integers(min_value=2, max_value=512), r=st.integers(min_value=1, max_value=64))
def test_param_count_monotonicity(c, r):
    # strictly increasing in channels for fixed ratio
    assert gc_param_count(c + 1, r) > gc_param_count(c, r)
    # non-increasing in ratio for fixed channels (once the ratio is meaningful)
    if c >= r + 1:
        assert gc_param_count(c, r + 1) <= gc_param_count(c, r)


def test_config_validation():
    with pytest.raises(ConfigError):
        GCConfig(channels=0)
    with pytest.raises(ConfigError):
        GCConfig(channels=8, ratio=0)
    with pytest.raises(ConfigError):
        GCConfig(channels=8, fusion="mul")
    assert GCConfig(channels=4, ratio=8).bottleneck_width == 1
