"""Masked-autoencoder tests: mask plans, loss composition, reconstruction."""

import numpy as np
import pytest

from moevit.autodiff import Tensor
from moevit.errors import ConfigError
from moevit.mae import MAEDecoder, MMLiT, mae_forward, random_mask, reconstruct
from moevit.model import MLiT, MLiTConfig, patchify
from moevit.rng import RngStreams


def tiny_pair(seed=0, enc_dim=24, dec_dim=None):
    enc_cfg = MLiTConfig(
        embed_dim=enc_dim, num_layers=3, hidden_first=24, hidden_last=12,
        num_heads=4, num_groups=2, num_classes=5,
    )
    dec_cfg = MLiTConfig(
        embed_dim=dec_dim or enc_dim, num_layers=2, hidden_first=16, hidden_last=16,
        num_heads=4, num_groups=2, experts_min=3, experts_max=3, stages=1,
    )
    streams = RngStreams(seed)
    return MMLiT(MLiT(enc_cfg, streams.init), MAEDecoder(enc_dim, streams.init, dec_cfg))


class TestRandomMask:
    def test_counts_for_standard_ratio(self):
        plan = random_mask(np.random.default_rng(0), batch=5, num_patches=144, ratio=0.75)
        assert plan.visible_idx.shape == (5, 36)
        assert plan.masked_idx.shape == (5, 108)

    def test_disjoint_cover(self):
        plan = random_mask(np.random.default_rng(1), batch=3)
        for v, m in zip(plan.visible_idx, plan.masked_idx):
            assert len(set(v) | set(m)) == 144
            assert len(set(v) & set(m)) == 0

    def test_same_seed_same_plan(self):
        a = random_mask(np.random.default_rng(9), batch=4)
        b = random_mask(np.random.default_rng(9), batch=4)
        assert np.array_equal(a.visible_idx, b.visible_idx)
        assert np.array_equal(a.masked_idx, b.masked_idx)

    def test_masking_frequency_monte_carlo(self):
        # each patch should be masked ~75% of the time over many draws
        plan = random_mask(np.random.default_rng(3), batch=10_000)
        counts = np.zeros(144)
        np.add.at(counts, plan.masked_idx.ravel(), 1)
        freq = counts / 10_000
        assert np.abs(freq - 0.75).max() < 0.02

    def test_invalid_ratio(self):
        with pytest.raises(ConfigError):
            random_mask(np.random.default_rng(0), batch=1, ratio=1.0)


class TestMAEForward:
    def test_encoder_sees_37_tokens_and_masks_108(self):
        model = tiny_pair()
        seen = {}
        original = model.encoder.encode

        def spy(patches, token_idx, train, rng=None):
            seen["tokens"] = patches.shape[1]
            return original(patches, token_idx, train, rng)

        model.encoder.encode = spy
        x = np.random.default_rng(0).standard_normal((2, 3, 36, 36)).astype(np.float32)
        plan = random_mask(np.random.default_rng(1), batch=2)
        mae_forward(model, x, train=False, rng=RngStreams(0), plan=plan)
        assert seen["tokens"] == 37
        assert plan.masked_idx.shape[1] == 108

    def test_total_composition(self):
        model = tiny_pair()
        x = np.random.default_rng(2).standard_normal((2, 3, 36, 36)).astype(np.float32)
        plan = random_mask(np.random.default_rng(3), batch=2)
        out = mae_forward(model, x, train=False, rng=RngStreams(0), plan=plan, alpha=0.1, beta=0.5)
        np.testing.assert_allclose(
            out.total.item(),
            out.mse_masked.item() + 0.1 * out.mse_unmasked.item() + 0.5 * out.aux.item(),
            rtol=1e-6,
        )

    def test_zero_images_with_zeroed_head_leave_only_aux(self):
        model = tiny_pair()
        model.decoder.out_head.W.data[:] = 0.0
        x = np.zeros((2, 3, 36, 36), dtype=np.float32)
        out = mae_forward(model, x, train=False, rng=RngStreams(1))
        assert out.mse_masked.item() == 0.0
        assert out.mse_unmasked.item() == 0.0
        np.testing.assert_allclose(out.total.item(), 0.5 * out.aux.item(), rtol=1e-6)

    def test_alpha_zero_ignores_visible_reconstruction(self):
        model = tiny_pair()
        x = np.random.default_rng(4).standard_normal((1, 3, 36, 36)).astype(np.float32)
        plan = random_mask(np.random.default_rng(5), batch=1)
        a = mae_forward(model, x, train=False, rng=RngStreams(0), plan=plan, alpha=0.0)
        # perturbing the model cannot be done post-hoc, but the identity holds:
        np.testing.assert_allclose(
            a.total.item(), a.mse_masked.item() + 0.5 * a.aux.item(), rtol=1e-6
        )
        assert a.mse_unmasked.item() > 0  # computed, just not charged

    def test_loss_invariant_to_masked_index_order(self):
        model = tiny_pair()
        x = np.random.default_rng(6).standard_normal((2, 3, 36, 36)).astype(np.float32)
        plan = random_mask(np.random.default_rng(7), batch=2)
        shuffled = random_mask(np.random.default_rng(7), batch=2)
        perm = np.random.default_rng(8).permutation(108)
        shuffled.masked_idx = shuffled.masked_idx[:, perm]
        a = mae_forward(model, x, train=False, rng=RngStreams(0), plan=plan)
        b = mae_forward(model, x, train=False, rng=RngStreams(0), plan=shuffled)
        np.testing.assert_allclose(a.total.item(), b.total.item(), rtol=1e-6)

    def test_decoder_aux_flag(self):
        model = tiny_pair()
        x = np.random.default_rng(9).standard_normal((1, 3, 36, 36)).astype(np.float32)
        plan = random_mask(np.random.default_rng(10), batch=1)
        both = mae_forward(model, x, train=False, rng=RngStreams(0), plan=plan, decoder_aux=True)
        enc_only = mae_forward(model, x, train=False, rng=RngStreams(0), plan=plan, decoder_aux=False)
        assert both.aux.item() > enc_only.aux.item() > 0

    def test_projected_positions_when_encoder_dim_differs(self):
        model = tiny_pair(enc_dim=24, dec_dim=16)
        x = np.random.default_rng(11).standard_normal((1, 3, 36, 36)).astype(np.float32)
        out = mae_forward(model, x, train=False, rng=RngStreams(2))
        assert np.isfinite(out.total.item())

    def test_train_mode_deterministic_under_streams(self):
        model = tiny_pair()
        x = np.random.default_rng(12).standard_normal((2, 3, 36, 36)).astype(np.float32)
        a = mae_forward(model, x, train=True, rng=RngStreams(5))
        b = mae_forward(model, x, train=True, rng=RngStreams(5))
        assert a.total.item() == b.total.item()


class TestReconstruct:
    def test_copy_visible_preserves_input_pixels(self):
        model = tiny_pair()
        x = np.random.default_rng(0).standard_normal((2, 3, 36, 36)).astype(np.float32)
        plan = random_mask(np.random.default_rng(1), batch=2)
        rec = reconstruct(model, x, RngStreams(0), copy_visible=True, plan=plan)
        assert rec.shape == (2, 3, 36, 36)
        patches_in = patchify(x)[:, :144]
        patches_out = patchify(rec)[:, :144]
        rows = np.arange(2)[:, None]
        np.testing.assert_allclose(
            patches_out[rows, plan.visible_idx], patches_in[rows, plan.visible_idx], atol=1e-6
        )

    def test_predicted_visible_mode_differs(self):
        model = tiny_pair()
        x = np.random.default_rng(2).standard_normal((1, 3, 36, 36)).astype(np.float32)
        plan = random_mask(np.random.default_rng(3), batch=1)
        copied = reconstruct(model, x, RngStreams(0), copy_visible=True, plan=plan)
        predicted = reconstruct(model, x, RngStreams(0), copy_visible=False, plan=plan)
        assert not np.allclose(copied, predicted)
