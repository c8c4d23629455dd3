"""Bidirectional grouped-query self-attention.

Queries keep one projection per head; keys and values are projected once per
group and broadcast across the heads inside the group, cutting the K/V
parameter count by heads/groups. With groups == heads this reduces to standard
multi-head attention. No causal mask and no attention dropout — the encoder is
bidirectional and regularization lives elsewhere.
"""

from __future__ import annotations

import math

import numpy as np

from .autodiff import Tensor, softmax_rows
from .errors import ConfigError
from .module import Linear, Module


class GroupedQueryAttention(Module):
    def __init__(self, dim: int, num_heads: int, num_groups: int, rng: np.random.Generator):
        if dim % num_heads != 0:
            raise ConfigError(f"dim {dim} not divisible by num_heads {num_heads}")
        if num_heads % num_groups != 0:
            raise ConfigError(f"num_heads {num_heads} not divisible by num_groups {num_groups}")
        self.dim = dim
        self.num_heads = num_heads
        self.num_groups = num_groups
        self.head_dim = dim // num_heads
        kv_dim = num_groups * self.head_dim
        self.q_proj = Linear(dim, dim, rng=rng)
        self.k_proj = Linear(dim, kv_dim, rng=rng)
        self.v_proj = Linear(dim, kv_dim, rng=rng)
        self.out_proj = Linear(dim, dim, rng=rng)

    def __call__(self, x: Tensor) -> Tensor:
        b, n, m = x.shape
        h, g, dh = self.num_heads, self.num_groups, self.head_dim
        # q: (b, g, h/g, n, dh); k, v: (b, g, 1, n, dh) broadcast over heads-per-group
        q = self.q_proj(x).reshape(b, n, h, dh).transpose((0, 2, 1, 3)).reshape(b, g, h // g, n, dh)
        k = self.k_proj(x).reshape(b, n, g, dh).transpose((0, 2, 1, 3)).reshape(b, g, 1, n, dh)
        v = self.v_proj(x).reshape(b, n, g, dh).transpose((0, 2, 1, 3)).reshape(b, g, 1, n, dh)
        scores = (q @ k.transpose_last2()) * (1.0 / math.sqrt(dh))
        attn = softmax_rows(scores)
        ctx = attn @ v  # (b, g, h/g, n, dh)
        ctx = ctx.reshape(b, h, n, dh).transpose((0, 2, 1, 3)).reshape(b, n, m)
        return self.out_proj(ctx)
