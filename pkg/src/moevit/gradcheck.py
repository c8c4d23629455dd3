"""Finite-difference gradient verification for the autodiff engine.

`grad_check` compares analytic gradients against central differences in
float64. The relative error for one coordinate is
|analytic - numeric| / max(|analytic|, |numeric|, 1e-8), so exact zeros on
both sides compare clean and tiny denominators don't explode the ratio.

Functions under test must be deterministic; pass `check_determinism=True` to
assert two forward evaluations agree bitwise before differentiating.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, zero_grads


def grad_check(
    fn,
    tensors: list[Tensor],
    eps: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    check_determinism: bool = False,
) -> float:
    """Return the max relative error between analytic and central-difference grads.

    `fn(*tensors)` must produce a scalar Tensor. All `tensors` should be float64
    with requires_grad=True. If `max_coords` is set, that many coordinates per
    tensor are sampled (without replacement) instead of sweeping every entry.
    """
    for t in tensors:
        if t.data.dtype != np.float64:
            raise ValueError("grad_check requires float64 tensors")

    if check_determinism:
        a = fn(*tensors).data.copy()
        b = fn(*tensors).data.copy()
        if not np.array_equal(a, b):
            raise AssertionError("function under grad_check is not deterministic")

    zero_grads(tensors)
    loss = fn(*tensors)
    loss.backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    rng = rng if rng is not None else np.random.default_rng(0)
    worst = 0.0
    for t, ana in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        n = flat.size
        coords = np.arange(n) if max_coords is None or n <= max_coords else rng.choice(n, size=max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = fn(*tensors).item()
            flat[i] = orig - eps
            f_minus = fn(*tensors).item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = ana.reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
