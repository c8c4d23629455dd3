"""Grouped-query attention vs a reference multi-head implementation."""

import numpy as np
import pytest

from moevit.attention import GroupedQueryAttention
from moevit.autodiff import Tensor
from moevit.errors import ConfigError
from moevit.gradcheck import grad_check


def reference_mha(x, wq, bq, wk, bk, wv, bv, wo, bo, num_heads):
    """Plain-numpy multi-head attention with per-head K/V (the oracle)."""
    b, n, m = x.shape
    dh = m // num_heads
    q = (x @ wq + bq).reshape(b, n, num_heads, dh).transpose(0, 2, 1, 3)
    k = (x @ wk + bk).reshape(b, n, num_heads, dh).transpose(0, 2, 1, 3)
    v = (x @ wv + bv).reshape(b, n, num_heads, dh).transpose(0, 2, 1, 3)
    scores = q @ k.transpose(0, 1, 3, 2) / np.sqrt(dh)
    scores -= scores.max(axis=-1, keepdims=True)
    attn = np.exp(scores)
    attn /= attn.sum(axis=-1, keepdims=True)
    ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(b, n, m)
    return ctx @ wo + bo


def tile_kv(w_small, b_small, heads_per_group, num_groups, dh):
    """Duplicate each group's K/V projection across its heads, per-head layout."""
    cols = []
    bcols = []
    for g in range(num_groups):
        for _ in range(heads_per_group):
            cols.append(w_small[:, g * dh : (g + 1) * dh])
            bcols.append(b_small[g * dh : (g + 1) * dh])
    return np.concatenate(cols, axis=1), np.concatenate(bcols)


def gqa_as_mha_reference(attn: GroupedQueryAttention, x: np.ndarray) -> np.ndarray:
    h, g, dh = attn.num_heads, attn.num_groups, attn.head_dim
    wk, bk = tile_kv(attn.k_proj.W.data, attn.k_proj.b.data, h // g, g, dh)
    wv, bv = tile_kv(attn.v_proj.W.data, attn.v_proj.b.data, h // g, g, dh)
    return reference_mha(
        x,
        attn.q_proj.W.data, attn.q_proj.b.data,
        wk, bk, wv, bv,
        attn.out_proj.W.data, attn.out_proj.b.data,
        h,
    )


class TestForward:
    def test_groups_equal_heads_matches_reference_mha(self):
        rng = np.random.default_rng(0)
        attn = GroupedQueryAttention(16, 4, 4, rng)
        x = rng.standard_normal((2, 5, 16)).astype(np.float32)
        got = attn(Tensor(x)).data
        want = reference_mha(
            x,
            attn.q_proj.W.data, attn.q_proj.b.data,
            attn.k_proj.W.data, attn.k_proj.b.data,
            attn.v_proj.W.data, attn.v_proj.b.data,
            attn.out_proj.W.data, attn.out_proj.b.data,
            num_heads=4,
        )
        assert np.abs(got - want).max() < 1e-6

    @pytest.mark.parametrize("groups", [1, 2])
    def test_grouped_kv_equals_mha_with_duplicated_kv(self, groups):
        rng = np.random.default_rng(3)
        attn = GroupedQueryAttention(24, 4, groups, rng)
        x = rng.standard_normal((2, 6, 24)).astype(np.float32)
        got = attn(Tensor(x)).data
        want = gqa_as_mha_reference(attn, x)
        assert np.abs(got - want).max() < 1e-6

    def test_invalid_configs_rejected(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ConfigError):
            GroupedQueryAttention(10, 4, 2, rng)  # dim not divisible by heads
        with pytest.raises(ConfigError):
            GroupedQueryAttention(12, 4, 3, rng)  # heads not divisible by groups

    def test_kv_projection_sizes_shrink_with_groups(self):
        rng = np.random.default_rng(0)
        attn = GroupedQueryAttention(24, 6, 2, rng)
        assert attn.k_proj.W.shape == (24, 8)  # 2 groups * head_dim 4
        assert attn.q_proj.W.shape == (24, 24)

    def test_output_shape_and_determinism(self):
        rng = np.random.default_rng(1)
        attn = GroupedQueryAttention(12, 4, 2, rng)
        x = Tensor(rng.standard_normal((3, 7, 12)).astype(np.float32))
        y1, y2 = attn(x).data, attn(x).data
        assert y1.shape == (3, 7, 12)
        assert np.array_equal(y1, y2)


class TestGradients:
    def test_block_matches_finite_differences(self):
        rng = np.random.default_rng(9)
        attn = GroupedQueryAttention(8, 4, 2, rng).astype(np.float64)
        x = Tensor(rng.standard_normal((2, 3, 8)), requires_grad=True)
        params = [x] + attn.parameters()

        def loss(*tensors):
            return (attn(tensors[0]) ** 2).mean()

        err = grad_check(loss, params, check_determinism=True)
        assert err < 1e-4

    def test_key_bias_gradient_is_zero(self):
        # a shared shift of every key moves all scores in a row equally, and
        # softmax ignores per-row shifts — so the K bias cannot affect the output
        rng = np.random.default_rng(10)
        attn = GroupedQueryAttention(8, 4, 2, rng).astype(np.float64)
        x = Tensor(rng.standard_normal((2, 5, 8)))
        (attn(x) ** 2).mean().backward()
        assert np.abs(attn.k_proj.b.grad).max() < 1e-15
        assert np.abs(attn.v_proj.b.grad).max() > 1e-6

    def test_output_invariant_to_key_bias(self):
        rng = np.random.default_rng(11)
        attn = GroupedQueryAttention(8, 4, 2, rng)
        x = Tensor(rng.standard_normal((2, 5, 8)).astype(np.float32))
        y0 = attn(x).data.copy()
        attn.k_proj.b.data = attn.k_proj.b.data + 3.0
        np.testing.assert_allclose(attn(x).data, y0, atol=1e-5)
