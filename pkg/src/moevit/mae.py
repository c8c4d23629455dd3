"""Masked-autoencoder pre-training: random patch masking, MoE decoder, losses.

Pre-training hides 75% of the 144 image patches. The encoder sees only the 36
visible patches plus the dummy classification patch (37 tokens). A light MoE
decoder receives a linear re-projection of the encoder outputs, with a shared
learnable mask token standing in at masked positions and the encoder's
positional embeddings re-added (the decoder has no positional table of its
own), and regresses all 27 pixel values of every patch. The objective is
mse(masked) + alpha * mse(unmasked) + beta * (routing aux losses), with the
dummy patch excluded from both MSE terms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, no_grad, scatter_rows
from .errors import ConfigError, ShapeError
from .model import MLiT, MLiTConfig, MoEEncoderLayer, patchify, preset, unpatchify
from .module import LayerNorm, Linear, Module
from .rng import RngStreams


@dataclass
class MaskPlan:
    """Per-sample split of the image-patch indices (dummy patch always visible)."""

    visible_idx: np.ndarray  # (b, n_visible)
    masked_idx: np.ndarray  # (b, n_masked)


def random_mask(rng: np.random.Generator, batch: int, num_patches: int = 144, ratio: float = 0.75) -> MaskPlan:
    """Uniform random permutation per sample; first n·(1−ratio) indices are visible."""
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"mask ratio must be in (0, 1), got {ratio}")
    n_visible = int(round(num_patches * (1.0 - ratio)))
    perms = np.stack([rng.permutation(num_patches) for _ in range(batch)])
    return MaskPlan(visible_idx=perms[:, :n_visible], masked_idx=perms[:, n_visible:])


@dataclass
class LossBreakdown:
    mse_masked: Tensor
    mse_unmasked: Tensor
    aux: Tensor  # summed routing losses (encoder + decoder unless disabled)
    total: Tensor


class MAEDecoder(Module):
    """Fixed-shape MoE decoder shared by every encoder size."""

    def __init__(self, enc_dim: int, rng: np.random.Generator, cfg: MLiTConfig | None = None):
        cfg = cfg if cfg is not None else preset("decoder")
        self.cfg = cfg
        m = cfg.embed_dim
        self.token_proj = Linear(enc_dim, m, bias=False, rng=rng)
        self.mask_token = Tensor(rng.normal(0.0, 0.02, m).astype(np.float32), requires_grad=True)
        hidden = cfg.hidden_sizes()
        experts = cfg.expert_counts()
        self.layers = [
            MoEEncoderLayer(
                m,
                hidden[i],
                experts[i],
                cfg.top_k,
                cfg.num_heads,
                cfg.num_groups,
                rng,
                sharing_mode=cfg.sharing_mode,
                dropout_p=cfg.dropout,
                w_importance=cfg.w_importance,
                w_load=cfg.w_load,
                squared_cv=cfg.squared_cv,
            )
            for i in range(cfg.num_layers)
        ]
        self.final_norm = LayerNorm(m)
        self.out_head = Linear(m, cfg.patch_dim, bias=False, rng=rng)


class MMLiT(Module):
    """Encoder + decoder pair for masked pre-training."""

    def __init__(self, encoder: MLiT, decoder: MAEDecoder):
        self.encoder = encoder
        self.decoder = decoder


def _flat_rows(idx: np.ndarray, seq_len: int) -> np.ndarray:
    b = idx.shape[0]
    return (np.arange(b)[:, None] * seq_len + idx).ravel()


def _run_mae(model: MMLiT, images, plan: MaskPlan, train: bool, rng: RngStreams | None):
    """Shared encode→decode pass; returns per-patch predictions and aux losses."""
    enc, dec = model.encoder, model.decoder
    patches = patchify(images, enc.cfg.patch_size)  # (b, n+1, 27)
    b, seq_len, patch_dim = patches.shape
    dummy = seq_len - 1

    enc_idx = np.concatenate([plan.visible_idx, np.full((b, 1), dummy)], axis=1)
    if enc_idx.shape[1] != plan.visible_idx.shape[1] + 1:
        raise ShapeError("encoder token set must be visible patches + dummy")
    enc_tokens = patches[np.arange(b)[:, None], enc_idx]
    h_enc, aux_enc, _ = enc.encode(enc_tokens, enc_idx, train, rng)

    m_dec = dec.cfg.embed_dim
    z = (h_enc @ dec.token_proj.W).reshape(b * enc_idx.shape[1], m_dec)
    kept = scatter_rows(z, _flat_rows(enc_idx, seq_len), b * seq_len)
    mask_rows = _flat_rows(plan.masked_idx, seq_len)
    indicator = np.zeros((b * seq_len, 1), dtype=np.float32)
    indicator[mask_rows] = 1.0
    x = kept + Tensor(indicator) * dec.mask_token
    # Re-add the encoder's positional rows; project them when dims differ.
    pos = enc.pos if enc.cfg.embed_dim == m_dec else enc.pos @ dec.token_proj.W
    x = x.reshape(b, seq_len, m_dec) + pos

    aux_dec = None
    for layer in dec.layers:
        x, aux, _ = layer(x, train, rng)
        aux_dec = aux if aux_dec is None else aux_dec + aux
    preds = dec.final_norm(x) @ dec.out_head.W  # (b, seq_len, patch_dim)
    return preds, patches, aux_enc, aux_dec


def mae_forward(
    model: MMLiT,
    images,
    train: bool,
    rng: RngStreams,
    alpha: float = 0.1,
    beta: float = 0.5,
    decoder_aux: bool = True,
    plan: MaskPlan | None = None,
    mask_ratio: float = 0.75,
) -> LossBreakdown:
    arr = images.data if isinstance(images, Tensor) else np.asarray(images)
    b = arr.shape[0]
    if plan is None:
        plan = random_mask(rng.masking, b, model.encoder.cfg.num_patches, mask_ratio)
    preds, patches, aux_enc, aux_dec = _run_mae(model, images, plan, train, rng)
    _, seq_len, patch_dim = patches.shape

    preds2d = preds.reshape(b * seq_len, patch_dim)
    targets2d = patches.reshape(b * seq_len, patch_dim).astype(np.float32)

    def mse_over(idx):
        rows = _flat_rows(idx, seq_len)
        diff = preds2d.gather_rows(rows) - Tensor(targets2d[rows])
        return (diff * diff).mean()

    mse_masked = mse_over(plan.masked_idx)
    mse_unmasked = mse_over(plan.visible_idx)
    aux = aux_enc + aux_dec if decoder_aux else aux_enc
    total = mse_masked + alpha * mse_unmasked + beta * aux
    return LossBreakdown(mse_masked=mse_masked, mse_unmasked=mse_unmasked, aux=aux, total=total)


def reconstruct(
    model: MMLiT,
    images,
    rng: RngStreams,
    copy_visible: bool = True,
    plan: MaskPlan | None = None,
    mask_ratio: float = 0.75,
) -> np.ndarray:
    """Decode a masked batch back to (b, 3, s, s) pixels (eval mode)."""
    enc_cfg = model.encoder.cfg
    with no_grad():
        patches = patchify(images, enc_cfg.patch_size)
        b, seq_len, _ = patches.shape
        if plan is None:
            plan = random_mask(rng.masking, b, seq_len - 1, mask_ratio)
        preds, _, _, _ = _run_mae(model, images, plan, train=False, rng=rng)
    out = preds.data[:, : seq_len - 1].copy()
    if copy_visible:
        rows = np.arange(b)[:, None]
        out[rows, plan.visible_idx] = patches[rows, plan.visible_idx]
    return unpatchify(out, enc_cfg.patch_size)
