"""Full encoder assembly: patch embedding, depth-wise-scaled MoE stack, head.

The depth-wise scaling rule shrinks expert hidden size linearly with depth
(floor-interpolated between a first- and last-layer value) while the expert
count steps up in equal-length stages. A 36×36 image becomes 144 3×3 patches
plus one all-zero dummy patch appended at index 144; the dummy token's final
embedding feeds the classification head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError
from .moe import MoEEncoderLayer, SHARING_MODES
from .module import LayerNorm, Linear, Module
from .rng import RngStreams


def hidden_size_schedule(num_layers: int, d_first: int, d_last: int) -> list[int]:
    """Expert hidden sizes per layer: floor-linear from d_first down to d_last."""
    if num_layers < 1 or d_first < d_last:
        raise ConfigError(f"bad schedule args: layers={num_layers}, {d_first}->{d_last}")
    if num_layers == 1:
        return [d_first]
    span = d_first - d_last
    return [((num_layers - 1 - i) * span) // (num_layers - 1) + d_last for i in range(num_layers)]


def expert_count_schedule(num_layers: int, stages: int = 3, e_min: int = 3, e_max: int = 5) -> list[int]:
    """Expert counts per layer: e_min..e_max in equal-length stages."""
    if num_layers % stages != 0:
        raise ConfigError(f"layers ({num_layers}) must divide evenly into {stages} stages")
    if e_min + stages - 1 != e_max:
        raise ConfigError(f"stage count {stages} inconsistent with expert range {e_min}..{e_max}")
    per = num_layers // stages
    return [e_min + i // per for i in range(num_layers)]


@dataclass
class MLiTConfig:
    embed_dim: int
    num_layers: int
    hidden_first: int
    hidden_last: int
    num_heads: int
    num_groups: int
    experts_min: int = 3
    experts_max: int = 5
    top_k: int = 2
    stages: int = 3
    dropout: float = 0.1
    image_size: int = 36
    patch_size: int = 3
    num_classes: int = 100
    sharing_mode: str = "V+W2"
    w_importance: float = 1e-2
    w_load: float = 1e-2
    squared_cv: bool = False

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ConfigError("image size must be a multiple of patch size")
        if self.sharing_mode not in SHARING_MODES:
            raise ConfigError(f"unknown sharing_mode {self.sharing_mode!r}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def seq_len(self) -> int:
        return self.num_patches + 1  # + dummy classification patch

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch_size * self.patch_size

    def hidden_sizes(self) -> list[int]:
        return hidden_size_schedule(self.num_layers, self.hidden_first, self.hidden_last)

    def expert_counts(self) -> list[int]:
        return expert_count_schedule(self.num_layers, self.stages, self.experts_min, self.experts_max)


_PRESETS = {
    "S": dict(embed_dim=144, num_layers=15, hidden_first=144, hidden_last=72, num_heads=8, num_groups=4),
    "XS": dict(embed_dim=128, num_layers=12, hidden_first=96, hidden_last=32, num_heads=8, num_groups=4),
    "XXS": dict(embed_dim=108, num_layers=9, hidden_first=81, hidden_last=27, num_heads=6, num_groups=3),
}

# Shared decoder shape used by every masked-autoencoder variant.
DECODER_PRESET = dict(
    embed_dim=108,
    num_layers=4,
    hidden_first=72,
    hidden_last=72,
    num_heads=6,
    num_groups=3,
    experts_min=3,
    experts_max=3,
    stages=1,
)


def preset(name: str, **overrides) -> MLiTConfig:
    key = name.upper() if name.upper() in _PRESETS else name.lower()
    if key in _PRESETS:
        return MLiTConfig(**{**_PRESETS[key], **overrides})
    if key == "decoder":
        return MLiTConfig(**{**DECODER_PRESET, **overrides})
    raise ConfigError(f"unknown model size {name!r} (expected S, XS, XXS, or decoder)")


# -- patch handling -----------------------------------------------------------

def patchify(images, patch_size: int = 3) -> np.ndarray:
    """(b, 3, s, s) images -> (b, p²+1, 3·patch²) raster-order patches + zero dummy."""
    arr = images.data if isinstance(images, Tensor) else np.asarray(images)
    if arr.ndim != 4 or arr.shape[1] != 3 or arr.shape[2] != arr.shape[3] or arr.shape[2] % patch_size:
        raise ShapeError(f"patchify expects (b, 3, s, s) with s divisible by {patch_size}, got {arr.shape}")
    b, _, s, _ = arr.shape
    g = s // patch_size
    patches = (
        arr.reshape(b, 3, g, patch_size, g, patch_size)
        .transpose(0, 2, 4, 1, 3, 5)
        .reshape(b, g * g, 3 * patch_size * patch_size)
    )
    dummy = np.zeros((b, 1, patches.shape[-1]), dtype=patches.dtype)
    return np.concatenate([patches, dummy], axis=1)


def unpatchify(patches: np.ndarray, patch_size: int = 3) -> np.ndarray:
    """Inverse of patchify on the image patches (dummy row, if present, is ignored)."""
    arr = np.asarray(patches)
    b, n, _ = arr.shape
    g = math.isqrt(n)
    if g * g != n:
        g = math.isqrt(n - 1)
        if g * g != n - 1:
            raise ShapeError(f"patch count {n} is not a square grid (+ optional dummy)")
    arr = arr[:, : g * g]
    return (
        arr.reshape(b, g, g, 3, patch_size, patch_size)
        .transpose(0, 3, 1, 4, 2, 5)
        .reshape(b, 3, g * patch_size, g * patch_size)
    )


# -- model --------------------------------------------------------------------

class MLiT(Module):
    def __init__(self, cfg: MLiTConfig, rng: np.random.Generator):
        self.cfg = cfg
        m = cfg.embed_dim
        self.patch_embed = Linear(cfg.patch_dim, m, bias=False, rng=rng)
        self.pos = Tensor((rng.normal(0.0, 0.02, (cfg.seq_len, m))).astype(np.float32), requires_grad=True)
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
        self.head = Linear(m, cfg.num_classes, bias=False, rng=rng)

    def embed(self, patches: np.ndarray, token_idx: np.ndarray) -> Tensor:
        """Patch rows -> embeddings + positional rows for the given token indices."""
        x = Tensor(patches.astype(np.float32, copy=False)) @ self.patch_embed.W
        return x + self.pos.gather_rows(token_idx)

    def encode(self, patches: np.ndarray, token_idx: np.ndarray, train: bool, rng: RngStreams | None = None):
        """Run the encoder stack; returns (final-normed hidden states, Σ aux, gate outs)."""
        x = self.embed(patches, token_idx)
        aux_total = None
        gate_outs = []
        for layer in self.layers:
            x, aux, gate_out = layer(x, train, rng)
            aux_total = aux if aux_total is None else aux_total + aux
            gate_outs.append(gate_out)
        return self.final_norm(x), aux_total, gate_outs

    def __call__(self, images, train: bool = False, rng: RngStreams | None = None):
        """Classification forward: (logits, total aux loss)."""
        patches = patchify(images, self.cfg.patch_size)
        b, n, _ = patches.shape
        token_idx = np.arange(n)
        h, aux, _ = self.encode(patches, token_idx, train, rng)
        h2d = h.reshape(b * n, self.cfg.embed_dim)
        cls = h2d.gather_rows(np.arange(b) * n + (n - 1))  # dummy token, appended last
        return cls @ self.head.W, aux


# -- parameter counting -------------------------------------------------------

def count_layer_params(m: int, hidden: int, experts: int, num_groups: int, head_dim: int, sharing_mode: str) -> int:
    """Closed-form parameter count of one encoder layer."""
    kv = num_groups * head_dim
    attn = 2 * (m * m + m) + 2 * (m * kv + kv)
    norms = 4 * m
    gate = 2 * m * experts
    in_proj = m * hidden + hidden  # W or V role
    out_proj = hidden * m + m  # W2 role
    per_expert = {"V+W2": in_proj, "V+W": out_proj, "W+W2": in_proj}[sharing_mode]
    shared = {"V+W2": in_proj + out_proj, "V+W": 2 * in_proj, "W+W2": in_proj + out_proj}[sharing_mode]
    return attn + norms + gate + experts * per_expert + shared


def count_params_closed_form(cfg: MLiTConfig, include_head: bool = False) -> int:
    """Whole-model count derived from per-layer formulas (no model instantiation)."""
    m = cfg.embed_dim
    head_dim = m // cfg.num_heads
    total = cfg.patch_dim * m  # patch embedding, no bias
    total += cfg.seq_len * m  # positional table
    hidden = cfg.hidden_sizes()
    experts = cfg.expert_counts()
    for h, t in zip(hidden, experts):
        total += count_layer_params(m, h, t, cfg.num_groups, head_dim, cfg.sharing_mode)
    total += 2 * m  # final norm
    if include_head:
        total += m * cfg.num_classes
    return total


def count_params_graph(model: Module, include_head: bool = False, skip: tuple = ()) -> int:
    """Independent count: walk the parameter graph and sum tensor sizes."""
    total = 0
    for name, p in model.named_parameters():
        if not include_head and name.startswith("head"):
            continue
        if any(name.startswith(s) for s in skip):
            continue
        total += p.size
    return total
