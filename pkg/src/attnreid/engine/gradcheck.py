"""Central finite-difference gradient verification."""

from __future__ import annotations

from typing import Callable, Sequence, Union

import numpy as np

from .tensor import Tensor, no_grad, precision


def numerical_grad(f: Callable[..., Tensor], inputs: Sequence[np.ndarray], which: int, eps: float) -> np.ndarray:
    base = [np.array(a, dtype=np.float64) for a in inputs]
    target = base[which]
    grad = np.zeros_like(target)
    flat = target.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        with no_grad():
            up = float(f(*[Tensor(a, dtype=np.float64) for a in base]).data.sum())
        flat[i] = orig - eps
        with no_grad():
            down = float(f(*[Tensor(a, dtype=np.float64) for a in base]).data.sum())
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * eps)
    return grad


def grad_check(
    f: Callable[..., Tensor],
    x: Union[Tensor, np.ndarray, Sequence],
    eps: float = 1e-4,
) -> float:
    """Largest per-coordinate relative error between backward() and central differences.

    ``f`` maps one or more tensors to a scalar tensor. ``x`` is a single
    tensor/array or a sequence of them; every one is checked. Evaluation runs
    in float64. Relative error uses ``max(|analytic|, |numeric|, 1e-8)`` as
    the denominator.
    """
    if isinstance(x, (Tensor, np.ndarray)):
        xs = [x]
    else:
        xs = list(x)
    arrays = [np.array(a.data if isinstance(a, Tensor) else a, dtype=np.float64) for a in xs]

    with precision("float64"):
        leaves = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
        out = f(*leaves)
        if out.size != 1:
            raise ValueError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
        out.backward()
        worst = 0.0
        for i, leaf in enumerate(leaves):
            analytic = leaf.grad if leaf.grad is not None else np.zeros_like(arrays[i])
            numeric = numerical_grad(f, arrays, i, eps)
            denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
            err = float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0
            worst = max(worst, err)
    return worst
