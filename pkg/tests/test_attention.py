"""Attention sub-modules against brute-force scalar oracles."""

from __future__ import annotations

import numpy as np
import pytest
import torch

from siamtrack.attention import (SiameseAttentionBlock, SpatialSelfAttention,
                                 apply_cross_map, channel_attention_map,
                                 channel_self_attention, cross_attention,
                                 flatten_spatial, spatial_attention_map)
from siamtrack.config import AttentionConfig

from conftest import max_abs_diff, softmax_np


def spatial_oracle(q: np.ndarray, k: np.ndarray, v: np.ndarray,
                   x: np.ndarray, scale: float) -> np.ndarray:
    """Position-mixing attention, one scalar at a time. All (C, N) inputs."""
    n = q.shape[1]
    logits = np.empty((n, n), dtype=np.float64)
    for i in range(n):
        for j in range(n):
            logits[i, j] = float(np.dot(q[:, i], k[:, j]))
    attn = softmax_np(logits, axis=0)  # each column sums to one
    out = np.empty_like(x)
    for c in range(x.shape[0]):
        for j in range(n):
            out[c, j] = x[c, j] + scale * float(np.dot(v[c], attn[:, j]))
    return out


def channel_oracle(x: np.ndarray, gram_src: np.ndarray, scale: float,
                   axis: str) -> np.ndarray:
    """Channel-mixing attention from a (C, N) Gram source."""
    c = x.shape[0]
    logits = np.empty((c, c), dtype=np.float64)
    for a in range(c):
        for b in range(c):
            logits[a, b] = float(np.dot(gram_src[a], gram_src[b]))
    attn = softmax_np(logits, axis=1 if axis == "row" else 0)
    out = np.empty_like(x)
    for a in range(c):
        out[a] = x[a] + scale * sum(attn[a, b] * x[b] for b in range(c))
    return out


def test_spatial_attention_matches_oracle_50_seeds():
    for seed in range(50):
        torch.manual_seed(seed)
        c, h, w = 8, 3, 4
        module = SpatialSelfAttention(c)
        x = torch.randn(1, c, h, w)
        scale = torch.tensor(0.7)
        out = module(x, scale)
        q = flatten_spatial(module.query(x))[0].detach().numpy().astype(np.float64)
        k = flatten_spatial(module.key(x))[0].detach().numpy().astype(np.float64)
        v = flatten_spatial(module.value(x))[0].detach().numpy().astype(np.float64)
        flat = flatten_spatial(x)[0].numpy().astype(np.float64)
        want = spatial_oracle(q, k, v, flat, 0.7)
        assert max_abs_diff(flatten_spatial(out)[0], want) < 1e-5


def test_spatial_map_columns_sum_to_one():
    torch.manual_seed(0)
    q = torch.randn(2, 2, 12)
    k = torch.randn(2, 2, 12)
    attn = spatial_attention_map(q, k)
    assert attn.shape == (2, 12, 12)
    assert torch.allclose(attn.sum(dim=1), torch.ones(2, 12), atol=1e-6)


def test_channel_attention_matches_oracle_50_seeds():
    rng = np.random.Generator(np.random.PCG64(99))
    for seed in range(50):
        torch.manual_seed(seed)
        c = int(rng.integers(2, 9))
        n = int(rng.integers(2, 17))
        h = 1
        x = torch.randn(1, c, h, n)
        for axis in ("row", "col"):
            out = channel_self_attention(x, torch.tensor(0.3), axis)
            flat = flatten_spatial(x)[0].numpy().astype(np.float64)
            want = channel_oracle(flat, flat, 0.3, axis)
            assert max_abs_diff(flatten_spatial(out)[0], want) < 1e-5


def test_cross_attention_matches_oracle_50_seeds():
    for seed in range(50):
        torch.manual_seed(seed + 1000)
        c, n = 6, 15
        x = torch.randn(1, c, 3, 5)
        other = torch.randn(1, c, 3, 5)
        out = cross_attention(x, other, torch.tensor(-0.4), "row")
        flat_x = flatten_spatial(x)[0].numpy().astype(np.float64)
        flat_o = flatten_spatial(other)[0].numpy().astype(np.float64)
        want = channel_oracle(flat_x, flat_o, -0.4, "row")
        assert max_abs_diff(flatten_spatial(out)[0], want) < 1e-5
        assert flat_o.shape == (c, n)


def test_cross_map_depends_only_on_source_branch():
    torch.manual_seed(3)
    other = torch.randn(1, 4, 2, 3)
    map_once = channel_attention_map(flatten_spatial(other),
                                     flatten_spatial(other), "row")
    for _ in range(3):
        x = torch.randn(1, 4, 2, 3)
        direct = cross_attention(x, other, torch.tensor(0.5), "row")
        via_map = apply_cross_map(x, map_once, torch.tensor(0.5))
        assert torch.equal(direct, via_map)


def test_residual_identity_at_zero_scale_100_inputs():
    """scale 0 leaves the input bit-identical for every sub-module."""
    torch.manual_seed(11)
    module = SpatialSelfAttention(8)
    zero = torch.tensor(0.0)
    for i in range(100):
        torch.manual_seed(i)
        x = torch.randn(1, 8, 3, 3) * 10 ** ((i % 7) - 3)
        assert torch.equal(module(x, zero), x)
        assert torch.equal(channel_self_attention(x, zero), x)
        other = torch.randn(1, 8, 3, 3)
        assert torch.equal(cross_attention(x, other, zero), x)


def test_channel_permutation_equivariance():
    """Permuting channels permutes the output the same way."""
    torch.manual_seed(4)
    x = torch.randn(1, 6, 4, 4)
    perm = torch.tensor([3, 0, 5, 1, 4, 2])
    out = channel_self_attention(x, torch.tensor(0.9))
    out_perm = channel_self_attention(x[:, perm], torch.tensor(0.9))
    assert max_abs_diff(out_perm, out[:, perm]) < 1e-5


def test_spatial_attention_channel_check():
    with pytest.raises(ValueError, match="divisible by 8"):
        SpatialSelfAttention(12)


def make_block(channels: int = 8, **kwargs) -> SiameseAttentionBlock:
    cfg = AttentionConfig(**kwargs)
    return SiameseAttentionBlock(channels, cfg)


def test_block_zero_init_reduces_to_plain_conv():
    """Fresh block: all scales zero, offsets zero. Each sub-module passes
    its input through, the three copies sum to 3x, and the zero-offset
    deformable conv acts as a plain conv on that sum."""
    torch.manual_seed(5)
    block = make_block()
    t = torch.randn(1, 8, 5, 5)
    s = torch.randn(1, 8, 6, 6)
    out_t, out_s = block(t, s)
    import torch.nn.functional as F
    want_t = F.conv2d(t + t + t, block.deform_t.weight,
                      block.deform_t.bias, padding=1)
    want_s = F.conv2d(s + s + s, block.deform_s.weight,
                      block.deform_s.bias, padding=1)
    assert max_abs_diff(out_t, want_t) < 1e-6
    assert max_abs_diff(out_s, want_s) < 1e-6


def test_block_search_path_matches_cached_cross_map():
    """Per-frame search attention with a cached template map must agree
    with the joint forward's search half."""
    for seed in range(5):
        torch.manual_seed(seed)
        block = make_block()
        with torch.no_grad():
            for p in (block.alpha_t, block.alpha_s, block.beta_t,
                      block.beta_s, block.gamma_t, block.gamma_s):
                p.normal_()
        t = torch.randn(1, 8, 5, 5)
        s = torch.randn(1, 8, 6, 6)
        _, out_s = block(t, s)
        cached = block.template_cross_map(t)
        assert torch.equal(block.forward_search(s, cached), out_s)


def test_block_toggles_drop_sub_modules():
    torch.manual_seed(6)
    x = torch.randn(1, 8, 4, 4)
    t = torch.randn(1, 8, 4, 4)
    no_spatial = make_block(spatial_sa=False)
    assert no_spatial.spatial is None
    no_spatial(t, x)
    only_deform = make_block(spatial_sa=False, channel_sa=False,
                             cross_attn=False)
    out_t, out_s = only_deform(t, x)
    import torch.nn.functional as F
    want = F.conv2d(x, only_deform.deform_s.weight,
                    only_deform.deform_s.bias, padding=1)
    assert max_abs_diff(out_s, want) < 1e-6


def test_block_per_branch_deform_position():
    torch.manual_seed(7)
    block = make_block(deform_position="per_branch")
    assert len(block.deform_t) == 3  # one conv per enabled sub-module
    t = torch.randn(1, 8, 4, 4)
    s = torch.randn(1, 8, 4, 4)
    out_t, out_s = block(t, s)
    assert out_t.shape == t.shape and out_s.shape == s.shape


def test_block_shapes_preserved():
    torch.manual_seed(8)
    block = make_block()
    t = torch.randn(2, 8, 7, 7)
    s = torch.randn(2, 8, 15, 15)
    out_t, out_s = block(t, s)
    assert out_t.shape == (2, 8, 7, 7)
    assert out_s.shape == (2, 8, 15, 15)
