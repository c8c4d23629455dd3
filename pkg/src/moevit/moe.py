"""Mixture-of-experts feed-forward with weight-shared SwiGLU experts.

Each expert computes (silu(x·W + b) ⊙ (x·V + b_V))·W2 + b_2 with dropout on
the output. Within a layer, two of the three projections are shared across all
experts and one is private per expert; `sharing_mode` names the shared pair
("V+W2" by default, also "V+W" and "W+W2"). Sharing keeps per-layer parameter
cost near a single FFN while retaining per-expert specialization through the
private projection.

Routing uses the noisy top-k gate; dispatch gathers each expert's token rows,
runs the expert on just those rows, and scatter-adds the gate-weighted outputs
back. `forward_dense` computes the same quantity by evaluating every expert on
every token — the slow reference used in tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .attention import GroupedQueryAttention
from .autodiff import Tensor
from .errors import ConfigError
from .gating import GateOutput, NoisyTopKGate
from .module import LayerNorm, Linear, Module
from .rng import RngStreams

SHARING_MODES = ("V+W2", "V+W", "W+W2")


@dataclass
class DispatchPlan:
    """Per-expert row indices and combine weights extracted from a gate matrix."""

    expert_rows: list  # expert -> int array of flattened token rows
    expert_cols: list  # expert -> same-length array of the expert's column index


def build_dispatch_plan(g_data: np.ndarray) -> DispatchPlan:
    rows, cols = [], []
    for e in range(g_data.shape[1]):
        r = np.nonzero(g_data[:, e] > 0)[0]
        rows.append(r)
        cols.append(np.full((r.size, 1), e, dtype=np.int64))
    return DispatchPlan(expert_rows=rows, expert_cols=cols)


class SwiGLUExpertBank(Module):
    def __init__(
        self,
        dim: int,
        hidden: int,
        num_experts: int,
        rng: np.random.Generator,
        sharing_mode: str = "V+W2",
        dropout_p: float = 0.1,
    ):
        if sharing_mode not in SHARING_MODES:
            raise ConfigError(f"sharing_mode must be one of {SHARING_MODES}, got {sharing_mode!r}")
        self.num_experts = num_experts
        self.sharing_mode = sharing_mode
        self.dropout_p = dropout_p
        shared = set(sharing_mode.split("+"))

        def build(role, in_dim, out_dim):
            if role in shared:
                return Linear(in_dim, out_dim, rng=rng)
            return [Linear(in_dim, out_dim, rng=rng) for _ in range(num_experts)]

        self.W = build("W", dim, hidden)
        self.V = build("V", dim, hidden)
        self.W2 = build("W2", hidden, dim)

    def _role(self, proj, expert_index: int) -> Linear:
        return proj if isinstance(proj, Linear) else proj[expert_index]

    def expert_forward(
        self, xe: Tensor, expert_index: int, train: bool = False, rng: np.random.Generator | None = None
    ) -> Tensor:
        if expert_index >= self.num_experts:
            raise ConfigError(f"expert index {expert_index} out of range (t={self.num_experts})")
        w = self._role(self.W, expert_index)
        v = self._role(self.V, expert_index)
        w2 = self._role(self.W2, expert_index)
        y = w2(ad.silu(w(xe)) * v(xe))
        return ad.dropout(y, self.dropout_p, rng, train)


class MoEFeedForward(Module):
    """Gate + expert bank + sparse dispatch over a flattened token batch."""

    def __init__(
        self,
        dim: int,
        hidden: int,
        num_experts: int,
        k: int,
        rng: np.random.Generator,
        sharing_mode: str = "V+W2",
        dropout_p: float = 0.1,
        w_importance: float = 1e-2,
        w_load: float = 1e-2,
        squared_cv: bool = False,
    ):
        self.gate = NoisyTopKGate(
            dim, num_experts, k, rng, w_importance=w_importance, w_load=w_load, squared_cv=squared_cv
        )
        self.bank = SwiGLUExpertBank(
            dim, hidden, num_experts, rng, sharing_mode=sharing_mode, dropout_p=dropout_p
        )

    def combine(self, x2d: Tensor, g: Tensor, train: bool = False, rng: RngStreams | None = None) -> Tensor:
        """Σ_e gate-weighted expert output, computed sparsely from any gate matrix."""
        num_rows = x2d.shape[0]
        plan = build_dispatch_plan(g.data)
        out = None
        drop_rng = rng.dropout if (train and rng is not None) else None
        for e in range(self.bank.num_experts):
            rows = plan.expert_rows[e]
            if rows.size == 0:
                continue
            xe = x2d.gather_rows(rows)
            weights = ad.take_along_last(g.gather_rows(rows), plan.expert_cols[e])
            ye = self.bank.expert_forward(xe, e, train, drop_rng) * weights
            scattered = ad.scatter_rows(ye, rows, num_rows)
            out = scattered if out is None else out + scattered
        if out is None:  # every gate row was all-zero
            out = x2d * 0.0
        return out

    def forward_dense(self, x2d: Tensor, g: Tensor, train: bool = False, rng: RngStreams | None = None) -> Tensor:
        """Reference combine: run every expert on every token, weight, and sum."""
        num_rows = x2d.shape[0]
        drop_rng = rng.dropout if (train and rng is not None) else None
        out = None
        for e in range(self.bank.num_experts):
            col = np.full((num_rows, 1), e, dtype=np.int64)
            weights = ad.take_along_last(g, col)
            ye = self.bank.expert_forward(x2d, e, train, drop_rng) * weights
            out = ye if out is None else out + ye
        return out

    def __call__(self, x2d: Tensor, train: bool, rng: RngStreams | None = None):
        gate_rng = rng.gate_noise if (train and rng is not None) else None
        gate_out = self.gate(x2d, train, gate_rng)
        y = self.combine(x2d, gate_out.G, train, rng)
        return y, self.gate.aux_loss(gate_out), gate_out


class MoEEncoderLayer(Module):
    """Pre-norm transformer layer: x + GQA(LN1 x), then x + MoE(LN2 x)."""

    def __init__(
        self,
        dim: int,
        hidden: int,
        num_experts: int,
        k: int,
        num_heads: int,
        num_groups: int,
        rng: np.random.Generator,
        sharing_mode: str = "V+W2",
        dropout_p: float = 0.1,
        w_importance: float = 1e-2,
        w_load: float = 1e-2,
        squared_cv: bool = False,
    ):
        self.norm1 = LayerNorm(dim)
        self.attn = GroupedQueryAttention(dim, num_heads, num_groups, rng)
        self.norm2 = LayerNorm(dim)
        self.moe = MoEFeedForward(
            dim,
            hidden,
            num_experts,
            k,
            rng,
            sharing_mode=sharing_mode,
            dropout_p=dropout_p,
            w_importance=w_importance,
            w_load=w_load,
            squared_cv=squared_cv,
        )

    def __call__(self, x: Tensor, train: bool, rng: RngStreams | None = None):
        b, n, m = x.shape
        x = x + self.attn(self.norm1(x))
        h2d = self.norm2(x).reshape(b * n, m)
        y2d, aux, gate_out = self.moe(h2d, train, rng)
        x = x + y2d.reshape(b, n, m)
        return x, aux, gate_out
