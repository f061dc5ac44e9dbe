import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import central_difference, loop_filter_global, loop_filter_local
from refseg.prompter import (
    AttnPrompter,
    check_downsample,
    filter_global,
    filter_local,
    fuse,
    global_attention_map,
    make_dense,
)


def sig(x):
    return 1 / (1 + math.exp(-x))


def test_global_map_orthogonal_is_half():
    v = torch.zeros(1, 3, 3, 2)
    v[..., 0] = torch.randn(1, 3, 3)
    t = torch.tensor([[[0.0, 1.0]]])
    assert torch.equal(global_attention_map(v, t), torch.full((1, 3, 3), 0.5))


def test_global_map_hand_case():
    v = torch.tensor([[1.0, -1.0], [2.0, 0.0]], dtype=torch.float64).reshape(1, 2, 2, 1)
    t = torch.tensor([[1.0]], dtype=torch.float64)
    expected = torch.tensor([[sig(1), sig(-1)], [sig(2), 0.5]], dtype=torch.float64)
    assert torch.allclose(global_attention_map(v, t)[0], expected, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_global_map_in_open_interval(seed):
    g = torch.Generator().manual_seed(seed)
    v = torch.randn(1, 3, 3, 4, generator=g, dtype=torch.float64) * 3
    t = torch.randn(1, 4, generator=g, dtype=torch.float64)
    m = global_attention_map(v, t)
    assert torch.all(m > 0) and torch.all(m < 1)


def test_dim_mismatch_raises():
    with pytest.raises(ValueError, match="dim"):
        global_attention_map(torch.zeros(1, 2, 2, 4), torch.zeros(1, 1, 3))
    with pytest.raises(ValueError, match="dim"):
        filter_local(torch.zeros(1, 2, 2, 4), torch.zeros(1, 2, 3))


def test_filter_global_zero_logits_and_saturation():
    v = torch.randn(1, 4, 4, 8)
    t = torch.zeros(1, 1, 8)
    assert torch.equal(filter_global(v, t), 1.5 * v)
    v = torch.ones(1, 2, 2, 2)
    t = torch.full((1, 1, 2), 100.0)
    assert torch.allclose(filter_global(v, t), 2 * v)


@pytest.mark.parametrize("seed", range(5))
def test_filter_global_matches_loop(seed):
    g = torch.Generator().manual_seed(seed)
    v = torch.randn(4, 4, 8, generator=g, dtype=torch.float64)
    t = torch.randn(8, generator=g, dtype=torch.float64)
    got = filter_global(v[None], t[None])[0].numpy()
    assert np.allclose(got, loop_filter_global(v, t), atol=1e-6)


def test_filter_local_single_token_equals_global():
    g = torch.Generator().manual_seed(0)
    v = torch.randn(1, 4, 4, 8, generator=g)
    t = torch.randn(1, 3, 8, generator=g)
    pad = torch.tensor([[False, True, True]])
    assert torch.allclose(filter_local(v, t, pad), filter_global(v, t[:, :1]), atol=1e-6)


def test_filter_local_duplicate_tokens_idempotent():
    g = torch.Generator().manual_seed(1)
    v = torch.randn(1, 4, 4, 8, generator=g)
    t = torch.randn(1, 1, 8, generator=g)
    assert torch.allclose(filter_local(v, t.repeat(1, 2, 1)), filter_local(v, t), atol=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_filter_local_matches_three_map_average(seed):
    g = torch.Generator().manual_seed(seed)
    v = torch.randn(4, 4, 8, generator=g, dtype=torch.float64)
    t = torch.randn(5, 8, generator=g, dtype=torch.float64)
    pad = [False, False, False, True, True]
    got = filter_local(v[None], t[None], torch.tensor([pad]))[0].numpy()
    assert np.allclose(got, loop_filter_local(v, t, pad), atol=1e-6)


def test_filter_local_all_padded_raises():
    with pytest.raises(ValueError, match="padding"):
        filter_local(torch.zeros(1, 2, 2, 2), torch.zeros(1, 2, 2), torch.ones(1, 2, dtype=torch.bool))


def test_fuse_order_and_channels():
    g = torch.Generator().manual_seed(0)
    a, b, v = (torch.randn(1, 24, 24, 64, generator=g) for _ in range(3))
    out = fuse(a, b, v)
    assert out.shape == (1, 24, 24, 192)
    assert torch.equal(out[..., 128:192], v)
    assert torch.equal(out[..., :64], a)
    with pytest.raises(ValueError):
        fuse(a, b, v[..., :32])


@pytest.mark.parametrize("s,m", [(2, 144), (4, 36), (8, 9)])
def test_sparse_prompt_count(s, m):
    p = AttnPrompter(d1=8, d2=16, downsample=s, grid=(24, 24), dense_size=(64, 64)).eval()
    v_attn = torch.randn(1, 24, 24, 24)
    assert p.make_sparse(v_attn).shape == (1, m, 16)
    assert p.num_prompts * s * s == 24 * 24


@pytest.mark.parametrize("s", [5, 3, 1, 16])
def test_bad_downsample(s):
    with pytest.raises(ValueError):
        check_downsample(s, 24, 24)


def test_sparse_flatten_is_row_major():
    p = AttnPrompter(d1=1, d2=8, downsample=2, grid=(4, 4), dense_size=(4, 4)).eval()
    v_attn = torch.randn(1, 4, 4, 3)
    grid = p.conv_ds(p.conv_dc(v_attn.permute(0, 3, 1, 2)))  # 1 x 8 x 2 x 2
    sparse = p.make_sparse(v_attn)
    assert torch.equal(sparse[0, 1], grid[0, :, 0, 1])
    assert torch.equal(sparse[0, 2], grid[0, :, 1, 0])


def test_dense_prompt_shape_constant_and_zero():
    v = torch.randn(1, 24, 24, 8)
    t = torch.randn(1, 1, 8)
    assert make_dense(v, t, (64, 64)).shape == (1, 64, 64)
    const = torch.ones(1, 24, 24, 8)
    out = make_dense(const, torch.full((1, 1, 8), 0.5), (64, 64))
    assert torch.allclose(out, torch.full_like(out, 4.0))
    assert torch.equal(make_dense(v, torch.zeros(1, 1, 8), (64, 64)), torch.zeros(1, 64, 64))


def test_dense_prompt_is_raw_similarity_at_same_size():
    v = torch.randn(1, 4, 4, 8)
    t = torch.randn(1, 1, 8)
    expected = (v * t[:, None]).sum(-1)
    assert torch.allclose(make_dense(v, t, (4, 4)), expected, atol=1e-6)


def test_finite_difference_gradients():
    torch.manual_seed(0)
    p = AttnPrompter(d1=8, d2=8, downsample=2, grid=(4, 4), dense_size=(8, 8)).double().eval()
    g = torch.Generator().manual_seed(3)
    v = torch.randn(1, 4, 4, 8, generator=g, dtype=torch.float64) * 0.5
    t_local = torch.randn(1, 3, 8, generator=g, dtype=torch.float64) * 0.5
    t_global = torch.randn(1, 1, 8, generator=g, dtype=torch.float64) * 0.5

    def f_v(x):
        with torch.no_grad():
            return p(x, t_local, t_global).sparse.sum().item()

    def f_t(x):
        with torch.no_grad():
            return p(v, t_local, x).sparse.sum().item()

    v_req, t_req = v.clone().requires_grad_(), t_global.clone().requires_grad_()
    p(v_req, t_local, t_req).sparse.sum().backward()
    for analytic, numeric in ((v_req.grad, central_difference(f_v, v.clone())),
                              (t_req.grad, central_difference(f_t, t_global.clone()))):
        rel = (analytic - numeric).norm() / numeric.norm()
        assert rel < 1e-3
