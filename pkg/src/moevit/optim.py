"""AdamW with decoupled weight decay, warmup+cosine schedule, layer-wise LR decay.

The learning rate is computed per-step: a linear ramp from 0 to the peak over
the warmup span, then a half-cosine from peak back to 0. The peak follows the
linear scaling rule peak = base_lr * batch_size / 256. For fine-tuning, each
parameter group can carry a multiplier so deeper (earlier) layers learn at
geometrically smaller rates.

Weight decay is skipped for the standard no-decay set: any parameter with
ndim <= 1 (biases, norm scales, the mask token) and the positional table.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError, ShapeError


@dataclass
class Schedule:
    base_lr: float
    batch_size: int
    total_epochs: int
    warmup_epochs: int
    steps_per_epoch: int

    def __post_init__(self):
        if self.warmup_epochs >= self.total_epochs:
            raise ConfigError("warmup_epochs must be < total_epochs")

    @property
    def peak_lr(self) -> float:
        return self.base_lr * self.batch_size / 256.0

    @property
    def total_steps(self) -> int:
        return self.total_epochs * self.steps_per_epoch

    @property
    def warmup_steps(self) -> int:
        return self.warmup_epochs * self.steps_per_epoch

    def lr_at(self, step: int) -> float:
        if step < self.warmup_steps:
            return self.peak_lr * step / self.warmup_steps
        span = self.total_steps - self.warmup_steps
        progress = min((step - self.warmup_steps) / span, 1.0) if span > 0 else 1.0
        return self.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def default_warmup_epochs(total_epochs: int) -> int:
    """Warmup defaults to 5% of the total epochs (at least 1)."""
    return max(1, round(0.05 * total_epochs))


def no_decay_param(name: str, p: Tensor) -> bool:
    return p.data.ndim <= 1 or name == "pos" or name.endswith(".pos")


def layer_multiplier(name: str, num_layers: int, decay: float) -> float:
    """Layer-wise LR multiplier: head/final norm 1, layer i decay^(L−i), embeddings decay^(L+1)."""
    parts = name.split(".")
    if parts[0] in ("head", "final_norm"):
        return 1.0
    if parts[0] == "layers":
        return decay ** (num_layers - int(parts[1]))
    return decay ** (num_layers + 1)


def layerwise_lrs(num_layers: int, decay: float) -> dict:
    """Multiplier table for one encoder: component prefix -> multiplier."""
    table = {"head": 1.0, "final_norm": 1.0, "patch_embed": decay ** (num_layers + 1), "pos": decay ** (num_layers + 1)}
    for i in range(num_layers):
        table[f"layers.{i}"] = decay ** (num_layers - i)
    return table


class AdamW:
    """Decoupled-decay Adam over named parameters with optional LR multipliers."""

    def __init__(
        self,
        named_params,
        weight_decay: float = 0.05,
        betas: tuple = (0.9, 0.999),
        eps: float = 1e-8,
        lr_multipliers: dict | None = None,
    ):
        self.params = list(named_params)
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}
        self.multipliers = dict(lr_multipliers) if lr_multipliers else {}

    def _multiplier(self, name: str) -> float:
        if not self.multipliers:
            return 1.0
        best = ""
        for prefix in self.multipliers:
            if (name == prefix or name.startswith(prefix + ".")) and len(prefix) > len(best):
                best = prefix
        return self.multipliers[best] if best else 1.0

    def step(self, lr: float) -> None:
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for name, p in self.params:
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.data.shape} for '{name}'")
            lr_eff = lr * self._multiplier(name)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay > 0.0 and not no_decay_param(name, p):
                p.data *= 1.0 - lr_eff * self.weight_decay
            p.data -= (lr_eff * update).astype(p.data.dtype, copy=False)

    # -- checkpoint plumbing --------------------------------------------------

    def state_arrays(self) -> dict:
        out = {}
        for name in self.m:
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict) -> None:
        from .errors import CheckpointError

        for name in self.m:
            for prefix, store in (("adam.m.", self.m), ("adam.v.", self.v)):
                key = prefix + name
                if key not in arrays:
                    raise CheckpointError(f"optimizer state missing tensor '{key}'")
                arr = arrays[key]
                if arr.shape != store[name].shape:
                    raise CheckpointError(
                        f"shape mismatch for '{key}': checkpoint {arr.shape} vs model {store[name].shape}"
                    )
                store[name] = arr.astype(store[name].dtype, copy=True)
