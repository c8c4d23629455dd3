"""Parameter-holding building blocks: Module base, Linear, LayerNorm.

Modules are plain containers — forwards take explicit `train`/`rng` arguments
instead of a global training-mode flag, so evaluation never depends on hidden
state. `named_parameters` walks attributes in definition order (dicts preserve
insertion order), recursing into child modules and lists of modules.
"""

from __future__ import annotations

import math

import numpy as np

from .autodiff import Tensor, layer_norm


class Module:
    """Base container. Subclasses assign Tensors / Modules / lists as attributes."""

    def named_parameters(self):
        """Yield (dotted_name, tensor) for all parameters in definition order."""
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield name, value
            elif isinstance(value, Module):
                for sub, p in value.named_parameters():
                    yield f"{name}.{sub}", p
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        for sub, p in item.named_parameters():
                            yield f"{name}.{i}.{sub}", p

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for _, p in self.named_parameters())

    def state_arrays(self):
        """Name → ndarray view of every parameter (for checkpointing)."""
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_arrays(self, arrays: dict) -> None:
        from .errors import CheckpointError

        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(arrays))
        unexpected = sorted(set(arrays) - set(own))
        if missing or unexpected:
            raise CheckpointError(
                f"parameter set mismatch: missing={missing[:5]} unexpected={unexpected[:5]}"
            )
        for name, p in own.items():
            arr = arrays[name]
            if arr.shape != p.data.shape:
                raise CheckpointError(
                    f"shape mismatch for '{name}': checkpoint {arr.shape} vs model {p.data.shape}"
                )
            p.data = arr.astype(p.data.dtype, copy=True)

    def astype(self, dtype) -> "Module":
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
        return self


class Linear(Module):
    """y = x @ W + b with W stored (in, out). Init U(-1/sqrt(in), 1/sqrt(in))."""

    def __init__(self, in_dim: int, out_dim: int, bias: bool = True, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng()
        bound = 1.0 / math.sqrt(in_dim)
        self.W = Tensor(rng.uniform(-bound, bound, (in_dim, out_dim)).astype(np.float32), requires_grad=True)
        self.b = Tensor(rng.uniform(-bound, bound, out_dim).astype(np.float32), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.W
        if self.b is not None:
            y = y + self.b
        return y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(dim, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(dim, dtype=np.float32), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)
