import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from prnet.msa import (
    AttentionHead,
    MsaBlock,
    MsaConfig,
    MsaStack,
    MultiSizeSelfAttention,
    attend,
    msa_block,
    patchify,
    unpatchify,
)


@torch.no_grad()
def brute_force_attend(head, patches):
    """Double loop over patch pairs in float64."""
    q = head.query(patches).double()
    k = head.key(patches).double()
    v = head.value(patches).double()
    n = patches.shape[0]
    out = torch.zeros_like(v)
    for i in range(n):
        logits = [float(sum(q[i, d] * k[m, d] for d in range(q.shape[1]))) / head.divisor for m in range(n)]
        top = max(logits)
        w = [math.exp(l - top) for l in logits]
        total = sum(w)
        for m in range(n):
            out[i] += (w[m] / total) * v[m]
    if head.out is not None:
        out = head.out.double()(out)
    return out


def test_patch_counts():
    x = torch.zeros(4, 16, 16)
    assert patchify(x, 16).shape == (1, 4 * 256)
    assert patchify(x, 2).shape == (64, 16)


def test_patch_order_is_row_major():
    x = torch.arange(16.0).reshape(1, 4, 4)
    p = patchify(x, 2)
    assert p[0].tolist() == [0, 1, 4, 5]
    assert p[1].tolist() == [2, 3, 6, 7]
    assert p[2].tolist() == [8, 9, 12, 13]


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.sampled_from([(8, 1), (8, 2), (8, 4), (8, 8), (4, 2)]), st.integers(0, 1000))
def test_patchify_roundtrip(c, hp, seed):
    h, p = hp
    x = torch.randn(2, c, h, h, generator=torch.Generator().manual_seed(seed))
    assert torch.equal(unpatchify(patchify(x, p), c, h, h), x)


def test_non_dividing_patch_rejected():
    with pytest.raises(ValueError):
        patchify(torch.zeros(2, 6, 6), 4)


def test_single_patch_weight_is_one():
    head = AttentionHead(12)
    patches = torch.randn(1, 12)
    out, w = head(patches, return_weights=True)
    assert w.item() == 1.0
    torch.testing.assert_close(out, head.value(patches))


def test_rows_sum_to_one():
    for scale in ("paper", "sqrt"):
        head = AttentionHead(20, attention_scale=scale)
        _, w = head(torch.randn(3, 9, 20) * 10, return_weights=True)
        assert torch.all(torch.abs(w.sum(-1) - 1) < 1e-6)


@pytest.mark.parametrize("scale", ["paper", "sqrt"])
def test_attend_matches_double_loop(scale):
    torch.manual_seed(0)
    head = AttentionHead(6, attention_scale=scale).double()
    for _ in range(10):
        patches = torch.randn(3, 6, dtype=torch.float64) * 3
        torch.testing.assert_close(attend(head, patches), brute_force_attend(head, patches), atol=1e-10, rtol=0)


def test_capped_head_projects_back():
    head = AttentionHead(40, embed_dim_cap=8).double()
    assert head.embed_dim == 8 and head.out is not None
    patches = torch.randn(4, 40, dtype=torch.float64)
    out = attend(head, patches)
    assert out.shape == (4, 40)
    torch.testing.assert_close(out, brute_force_attend(head, patches), atol=1e-10, rtol=0)


def test_uncapped_head_has_no_projection():
    assert AttentionHead(16, embed_dim_cap=256).out is None


def test_divisor_is_patch_dim_by_default():
    assert AttentionHead(32).divisor == 32.0
    assert AttentionHead(32, attention_scale="sqrt").divisor == pytest.approx(math.sqrt(32))


def test_identical_patches_give_identical_outputs():
    head = AttentionHead(10)
    patches = torch.randn(1, 10).repeat(5, 1)
    out = attend(head, patches)
    assert torch.allclose(out, out[0].expand_as(out), atol=1e-6)


def test_block_shape_preserved_all_desk_scales():
    cfg = MsaConfig()
    for c, h in [(16, 8), (32, 4), (64, 2)]:
        block = MsaBlock(c, h, cfg)
        assert block(torch.randn(2, c, h, h)).shape == (2, c, h, h)


def test_full_scale_patch_sizes():
    assert MsaConfig().patch_sizes(64) == [64, 32, 16, 8]
    assert MsaConfig().patch_sizes(16) == [16, 8, 4, 2]


def test_small_maps_clamp_or_raise():
    assert MsaConfig().patch_sizes(2) == [2, 1, 1, 1]
    with pytest.raises(ValueError):
        MsaConfig(strict_patch_sizes=True).patch_sizes(4)


def test_block_merges_four_heads():
    block = MsaBlock(4, 8, MsaConfig())
    assert len(block.heads) == 4
    assert block.merge.body[0].in_channels == 16
    assert block.merge.body[-1].num_features == 4


def test_stack_depth_gives_distinct_blocks():
    stack = MsaStack(4, 8, MsaConfig(stack_depth=3))
    assert len(stack) == 3
    w = [b.heads[0].query.weight for b in stack]
    assert not torch.equal(w[0], w[1]) and not torch.equal(w[1], w[2])


def test_zero_input_is_finite():
    block = MsaBlock(4, 8, MsaConfig()).eval()
    out = block(torch.zeros(1, 4, 8, 8))
    assert torch.all(torch.isfinite(out))


def test_wrong_input_shape_rejected():
    block = MsaBlock(4, 8, MsaConfig())
    with pytest.raises(ValueError):
        block(torch.zeros(1, 4, 4, 4))


def test_per_scale_stacks_are_independent():
    msa = MultiSizeSelfAttention([4, 8], [8, 4], MsaConfig(stack_depth=1))
    ids = {id(p) for p in msa.stacks[0].parameters()}
    assert not ids & {id(p) for p in msa.stacks[1].parameters()}


def test_msa_block_gradient_matches_finite_differences():
    torch.manual_seed(0)
    block = MsaBlock(4, 8, MsaConfig(stack_depth=1)).double().eval()
    x = torch.randn(1, 4, 8, 8, dtype=torch.float64)
    proj = torch.randn(1, 4, 8, 8, dtype=torch.float64)
    params = [block.heads[0].query.weight, block.heads[2].value.bias, block.merge.body[0].weight, block.merge.skip.bias]

    def objective():
        return (msa_block(block, x) * proj).sum()

    loss = objective()
    grads = torch.autograd.grad(loss, params)
    eps = 1e-6
    rng = np.random.default_rng(0)
    for p, g in zip(params, grads):
        flat = p.data.view(-1)
        for idx in rng.choice(flat.numel(), size=min(5, flat.numel()), replace=False):
            orig = flat[idx].item()
            with torch.no_grad():
                flat[idx] = orig + eps
                up = objective().item()
                flat[idx] = orig - eps
                down = objective().item()
                flat[idx] = orig
            fd = (up - down) / (2 * eps)
            an = g.view(-1)[idx].item()
            assert abs(fd - an) / max(abs(fd), abs(an), 1e-8) < 1e-4
