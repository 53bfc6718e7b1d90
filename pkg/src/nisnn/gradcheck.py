"""Central finite-difference oracle for autodiff checks."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numeric_grad(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], h: float = 1e-3) -> list[np.ndarray]:
    """d fn / d arrays[k] by central differences, evaluated in float64."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    grads = []
    for k, arr in enumerate(arrays):
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = fn(*[Tensor(a, dtype=np.float64) for a in arrays]).item()
            flat[i] = orig - h
            down = fn(*[Tensor(a, dtype=np.float64) for a in arrays]).item()
            flat[i] = orig
            g.reshape(-1)[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def analytic_grad(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray]) -> list[np.ndarray]:
    tensors = [Tensor(np.array(a, dtype=np.float64), requires_grad=True, dtype=np.float64) for a in arrays]
    fn(*tensors).backward()
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Largest elementwise |a - n| / max(|a|, |n|), skipping entries where both are below floor."""
    a, n = np.asarray(analytic, np.float64), np.asarray(numeric, np.float64)
    denom = np.maximum(np.abs(a), np.abs(n))
    mask = denom > floor
    if not mask.any():
        return 0.0
    return float(np.max(np.abs(a - n)[mask] / denom[mask]))


def check_gradients(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], h: float = 1e-3) -> float:
    """Max relative error over all inputs between autodiff and finite differences."""
    ana = analytic_grad(fn, arrays)
    num = numeric_grad(fn, arrays, h)
    return max(max_relative_error(a, n) for a, n in zip(ana, num))


def check_module_gradients(module, x: np.ndarray, seed: int = 0, h: float = 1e-3) -> dict[str, float]:
    """FD check of a module w.r.t. its input and every parameter, in float64.

    The loss is a fixed random projection of the output so that every output
    element contributes.  Returns the max relative error per tensor name.
    """
    module.to(np.float64)
    x = np.array(x, dtype=np.float64)
    probe = np.random.default_rng(seed).standard_normal(module(Tensor(x, dtype=np.float64)).shape)

    def loss(inp: Tensor) -> Tensor:
        return (module(inp) * Tensor(probe, dtype=np.float64)).sum()

    module.zero_grad()
    xt = Tensor(x, requires_grad=True, dtype=np.float64)
    loss(xt).backward()
    errors = {"input": max_relative_error(xt.grad, numeric_grad(loss, [x], h)[0])}
    for name, p in module.named_parameters():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss(Tensor(x, dtype=np.float64)).item()
            flat[i] = orig - h
            down = loss(Tensor(x, dtype=np.float64)).item()
            flat[i] = orig
            numeric.reshape(-1)[i] = (up - down) / (2 * h)
        errors[name] = max_relative_error(analytic, numeric)
    return errors
