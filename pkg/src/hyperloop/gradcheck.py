"""Central finite-difference oracle for checking analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


def relative_error(analytic, numeric, floor: float = 1e-8) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def numeric_grad(
    loss_fn: Callable[[], Tensor],
    param: Tensor,
    h: float = 1e-5,
    indices: Sequence[tuple[int, ...]] | None = None,
) -> tuple[list[tuple[int, ...]], np.ndarray]:
    """``d loss / d param`` at ``indices`` (default: every entry) by central differences.

    ``param.data`` is perturbed in place and restored.
    """
    if indices is None:
        indices = list(np.ndindex(*param.shape)) if param.ndim else [()]
    flat = param.data
    out = np.empty(len(indices))
    with no_grad():
        for k, idx in enumerate(indices):
            orig = flat[idx]
            flat[idx] = orig + h
            fp = float(loss_fn().data)
            flat[idx] = orig - h
            fm = float(loss_fn().data)
            flat[idx] = orig
            out[k] = (fp - fm) / (2 * h)
    return list(indices), out


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor] | Sequence[Tensor],
    h: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
    floor: float = 1e-8,
) -> dict[str, float]:
    """Max relative error between backprop and finite differences, per parameter.

    With ``max_entries`` each tensor is checked on that many randomly chosen
    entries plus one random-direction directional derivative that covers the
    whole tensor.
    """
    if not isinstance(params, dict):
        params = {str(i): p for i, p in enumerate(params)}
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for k, p in params.items()}
    rng = np.random.default_rng(seed)
    report = {}
    for name, p in params.items():
        all_idx = list(np.ndindex(*p.shape)) if p.ndim else [()]
        if max_entries is not None and len(all_idx) > max_entries:
            picks = rng.choice(len(all_idx), size=max_entries, replace=False)
            idx = [all_idx[i] for i in sorted(picks)]
        else:
            idx = all_idx
        idx, num = numeric_grad(loss_fn, p, h, idx)
        ana = np.array([analytic[name][i] for i in idx])
        err = float(relative_error(ana, num, floor).max()) if idx else 0.0
        if max_entries is not None:
            err = max(err, _directional_error(loss_fn, p, analytic[name], h, rng, floor))
        report[name] = err
    return report


def _directional_error(loss_fn, p, grad, h, rng, floor) -> float:
    direction = rng.standard_normal(p.shape)
    direction /= np.linalg.norm(direction) or 1.0
    base = p.data.copy()
    with no_grad():
        p.data[...] = base + h * direction
        fp = float(loss_fn().data)
        p.data[...] = base - h * direction
        fm = float(loss_fn().data)
        p.data[...] = base
    numeric = (fp - fm) / (2 * h)
    return float(relative_error(np.sum(grad * direction), numeric, floor))
