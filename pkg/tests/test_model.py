"""Model assembly tests: schedules, patch handling, counts, equivariance."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moevit.autodiff import Tensor
from moevit.errors import ConfigError, ShapeError
from moevit.model import (
    MLiT,
    MLiTConfig,
    count_params_closed_form,
    count_params_graph,
    expert_count_schedule,
    hidden_size_schedule,
    patchify,
    preset,
    unpatchify,
)
from moevit.rng import RngStreams


class TestSchedules:
    def test_xxs_hidden_sizes(self):
        sched = hidden_size_schedule(9, 81, 27)
        assert sched[0] == 81 and sched[-1] == 27
        assert sched[4] == 54
        assert sched == [81, 74, 67, 60, 54, 47, 40, 33, 27]

    def test_constant_range(self):
        assert hidden_size_schedule(5, 72, 72) == [72] * 5

    def test_single_layer_convention(self):
        assert hidden_size_schedule(1, 64, 32) == [64]

    @given(st.integers(2, 24), st.integers(8, 160), st.integers(1, 8))
    @settings(max_examples=80, deadline=None)
    def test_monotone_with_exact_endpoints(self, layers, d_last, extra):
        d_first = d_last + extra
        sched = hidden_size_schedule(layers, d_first, d_last)
        assert sched[0] == d_first and sched[-1] == d_last
        assert all(a >= b for a, b in zip(sched, sched[1:]))

    def test_expert_counts(self):
        assert expert_count_schedule(9) == [3, 3, 3, 4, 4, 4, 5, 5, 5]
        assert expert_count_schedule(15) == [3] * 5 + [4] * 5 + [5] * 5
        assert expert_count_schedule(3) == [3, 4, 5]

    def test_expert_counts_need_divisible_layers(self):
        with pytest.raises(ConfigError):
            expert_count_schedule(10)


class TestPatchify:
    def test_constant_image(self):
        x = np.ones((2, 3, 36, 36), dtype=np.float32)
        p = patchify(x)
        assert p.shape == (2, 145, 27)
        np.testing.assert_allclose(p[:, :144], 1.0)
        np.testing.assert_allclose(p[:, 144], 0.0)  # dummy patch all-zero

    def test_round_trip(self):
        x = np.random.default_rng(0).standard_normal((3, 3, 36, 36)).astype(np.float32)
        p = patchify(x)
        np.testing.assert_array_equal(unpatchify(p), x)

    def test_patch_index_arithmetic(self):
        x = np.zeros((1, 3, 36, 36), dtype=np.float32)
        r, c = 7, 4
        x[0, :, 3 * r : 3 * r + 3, 3 * c : 3 * c + 3] = 5.0
        p = patchify(x)
        idx = r * 12 + c
        np.testing.assert_allclose(p[0, idx], 5.0)
        others = np.delete(p[0, :144], idx, axis=0)
        np.testing.assert_allclose(others, 0.0)

    def test_wrong_shape_rejected(self):
        with pytest.raises(ShapeError):
            patchify(np.zeros((1, 3, 32, 32)))
        with pytest.raises(ShapeError):
            patchify(np.zeros((1, 1, 36, 36)))


class TestConfigs:
    def test_presets_match_published_shapes(self):
        s, xs, xxs = preset("S"), preset("XS"), preset("XXS")
        assert (s.embed_dim, s.num_layers, s.num_heads, s.num_groups) == (144, 15, 8, 4)
        assert (xs.embed_dim, xs.num_layers) == (128, 12)
        assert (xxs.embed_dim, xxs.num_layers, xxs.num_heads, xxs.num_groups) == (108, 9, 6, 3)
        for cfg in (s, xs, xxs):
            assert (cfg.top_k, cfg.stages, cfg.dropout) == (2, 3, 0.1)
            assert (cfg.experts_min, cfg.experts_max) == (3, 5)

    def test_decoder_preset(self):
        d = preset("decoder")
        assert (d.embed_dim, d.num_layers, d.num_heads, d.num_groups) == (108, 4, 6, 3)
        assert d.hidden_sizes() == [72, 72, 72, 72]
        assert d.expert_counts() == [3, 3, 3, 3]

    def test_unknown_preset(self):
        with pytest.raises(ConfigError):
            preset("XL")

    def test_param_counts_against_published_totals(self):
        targets = {"S": 2.36e6, "XS": 1.21e6, "XXS": 0.66e6}
        for size, target in targets.items():
            cfg = preset(size)
            closed = count_params_closed_form(cfg)
            graph = count_params_graph(MLiT(cfg, np.random.default_rng(0)))
            assert closed == graph  # two independent counting routes agree exactly
            assert abs(closed - target) / target < 0.025

    def test_closed_form_tracks_sharing_mode(self):
        for mode in ("V+W2", "V+W", "W+W2"):
            cfg = preset("XXS", sharing_mode=mode)
            model = MLiT(cfg, np.random.default_rng(0))
            assert count_params_closed_form(cfg) == count_params_graph(model)


def tiny_cfg(**kw):
    base = dict(
        embed_dim=24, num_layers=3, hidden_first=24, hidden_last=12,
        num_heads=4, num_groups=2, num_classes=5, dropout=0.1,
    )
    base.update(kw)
    return MLiTConfig(**base)


class TestForward:
    def test_logits_shape(self):
        model = MLiT(tiny_cfg(), RngStreams(0).init)
        x = np.random.default_rng(0).standard_normal((4, 3, 36, 36)).astype(np.float32)
        logits, aux = model(x, train=False)
        assert logits.shape == (4, 5)
        assert np.isfinite(aux.item())

    def test_eval_determinism(self):
        model = MLiT(tiny_cfg(), RngStreams(0).init)
        x = np.random.default_rng(1).standard_normal((2, 3, 36, 36)).astype(np.float32)
        a, _ = model(x, train=False)
        b, _ = model(x, train=False)
        assert np.array_equal(a.data, b.data)

    def test_train_mode_uses_streams_reproducibly(self):
        model = MLiT(tiny_cfg(), RngStreams(0).init)
        x = np.random.default_rng(2).standard_normal((2, 3, 36, 36)).astype(np.float32)
        a, _ = model(x, train=True, rng=RngStreams(7))
        b, _ = model(x, train=True, rng=RngStreams(7))
        c, _ = model(x, train=True, rng=RngStreams(8))
        assert np.array_equal(a.data, b.data)
        assert not np.array_equal(a.data, c.data)

    def test_permuting_patches_and_positions_leaves_logits_unchanged(self):
        model = MLiT(tiny_cfg(), RngStreams(3).init)
        x = np.random.default_rng(4).standard_normal((2, 3, 36, 36)).astype(np.float32)
        base, _ = model(x, train=False)

        perm = np.random.default_rng(5).permutation(144)
        patches = patchify(x)
        shuffled = patches.copy()
        shuffled[:, :144] = patches[:, perm]
        token_idx = np.concatenate([perm, [144]])
        h, _, _ = model.encode(shuffled, token_idx, train=False)
        h2d = h.reshape(2 * 145, model.cfg.embed_dim)
        cls = h2d.gather_rows(np.arange(2) * 145 + 144)
        logits = (cls @ model.head.W).data
        assert np.abs(logits - base.data).max() < 1e-5

    def test_aux_total_sums_layer_losses(self):
        model = MLiT(tiny_cfg(), RngStreams(0).init)
        x = np.random.default_rng(6).standard_normal((2, 3, 36, 36)).astype(np.float32)
        patches = patchify(x)
        _, aux, gate_outs = model.encode(patches, np.arange(145), train=False)
        assert len(gate_outs) == 3
        per_layer = sum(
            layer.moe.gate.aux_loss(go).item() for layer, go in zip(model.layers, gate_outs)
        )
        np.testing.assert_allclose(aux.item(), per_layer, rtol=1e-6)

    def test_bias_policy(self):
        model = MLiT(tiny_cfg(), RngStreams(0).init)
        names = dict(model.named_parameters())
        assert "patch_embed.b" not in names and "head.b" not in names
        assert "layers.0.attn.q_proj.b" in names  # encoder-layer linears keep biases
        assert "layers.0.moe.bank.V.b" in names
        assert "layers.0.moe.gate.W_g" in names and "layers.0.moe.gate.W_noise" in names
