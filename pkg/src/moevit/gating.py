"""Noisy top-k gating: sparse expert routing with load-balancing losses.

A token's routing logits come from two learned linear maps of its embedding:
clean logits x·W_g and a per-expert noise scale softplus(x·W_noise). During
training, Gaussian noise scaled by the latter perturbs the clean logits before
top-k selection, which both regularizes routing and makes the "load" of an
expert a smooth function of the parameters: the probability that a token lands
in an expert's top-k under re-sampled noise has a closed form in the normal
CDF. Two coefficient-of-variation penalties — one on per-expert gate mass
(importance), one on per-expert load probability — push routing toward balance.

Gate matrices carry no biases.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError
from .module import Module


def top_k_indices(h: np.ndarray, k: int) -> np.ndarray:
    """Column indices of the k largest entries per row, ties to the lower column."""
    return np.argsort(-h, axis=-1, kind="stable")[..., :k]


def softmax_k(h: Tensor, k: int) -> Tensor:
    """Row-wise softmax over the k largest entries, zeros at all other columns."""
    t = h.shape[-1]
    if not 1 <= k < t:
        raise ConfigError(f"softmax_k needs 1 <= k < {t}, got k={k}")
    idx = top_k_indices(h.data, k)
    kept = ad.take_along_last(h, idx)
    return ad.scatter_along_last(ad.softmax_rows(kept), idx, t)


def psi_thresholds(h: Tensor, k: int) -> Tensor:
    """Per-entry exclusion thresholds used by the load probability.

    With l_k / l_{k+1} the kth and (k+1)th largest values of a row, an entry
    currently inside the top-k (h >= l_k) must stay above l_{k+1} to remain
    there under re-noising; an entry outside must beat l_k to get in.
    """
    t = h.shape[-1]
    if not 1 <= k < t:
        raise ConfigError(f"psi_thresholds needs 1 <= k < {t}, got k={k}")
    order = np.argsort(-h.data, axis=-1, kind="stable")
    l_k = ad.take_along_last(h, order[..., k - 1 : k])
    l_k1 = ad.take_along_last(h, order[..., k : k + 1])
    in_topk = Tensor((h.data >= l_k.data).astype(h.data.dtype))
    return l_k1 * in_topk + l_k * (1.0 - in_topk)


def load_probability(clean: Tensor, noise_scale: Tensor, psi: Tensor) -> Tensor:
    """P[token stays routed to expert under fresh noise] = Φ((clean − ψ)/scale)."""
    return ad.normal_cdf((clean - psi) / ad.clamp_min(noise_scale, 1e-6))


def cv(v: Tensor) -> Tensor:
    """Coefficient of variation: population std over (mean + 1e-10)."""
    d = v - v.mean()
    var = (d * d).mean()
    # 1e-20 keeps sqrt differentiable when all entries are equal
    return ad.sqrt(var + 1e-20) / (v.mean() + 1e-10)


@dataclass
class GateOutput:
    """Routing products for one flattened (rows, experts) batch."""

    clean_logits: Tensor
    H: Tensor
    noise_scale: Tensor
    G: Tensor  # sparse combine weights, k nonzeros per row
    P: Tensor  # load probabilities, entries in [0, 1]


class NoisyTopKGate(Module):
    def __init__(
        self,
        dim: int,
        num_experts: int,
        k: int,
        rng: np.random.Generator,
        w_importance: float = 1e-2,
        w_load: float = 1e-2,
        squared_cv: bool = False,
    ):
        if not 1 <= k < num_experts:
            raise ConfigError(f"need 1 <= k < num_experts, got k={k}, t={num_experts}")
        self.num_experts = num_experts
        self.k = k
        self.w_importance = w_importance
        self.w_load = w_load
        self.squared_cv = squared_cv
        bound = 1.0 / np.sqrt(dim)
        self.W_g = Tensor(rng.uniform(-bound, bound, (dim, num_experts)).astype(np.float32), requires_grad=True)
        self.W_noise = Tensor(rng.uniform(-bound, bound, (dim, num_experts)).astype(np.float32), requires_grad=True)

    def __call__(self, x2d: Tensor, train: bool, rng: Optional[np.random.Generator] = None) -> GateOutput:
        clean = x2d @ self.W_g
        noise_scale = ad.softplus(x2d @ self.W_noise)
        if train:
            if rng is None:
                raise ConfigError("training-mode gating needs an RNG for routing noise")
            eps = Tensor(rng.standard_normal(clean.shape).astype(clean.data.dtype))
            h = clean + eps * noise_scale
        else:
            h = clean
        g = softmax_k(h, self.k)
        p = load_probability(clean, noise_scale, psi_thresholds(h, self.k))
        return GateOutput(clean_logits=clean, H=h, noise_scale=noise_scale, G=g, P=p)

    def aux_loss(self, out: GateOutput) -> Tensor:
        """w_importance·CV(per-expert gate mass) + w_load·CV(per-expert load)."""
        importance = out.G.sum(axis=0)
        load = out.P.sum(axis=0)
        c_imp = cv(importance)
        c_load = cv(load)
        if self.squared_cv:
            c_imp = c_imp * c_imp
            c_load = c_load * c_load
        return self.w_importance * c_imp + self.w_load * c_load
