"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numerical_gradient(fn: Callable[[], float], tensor: Tensor, step: float,
                       indices: np.ndarray | None = None) -> np.ndarray:
    """Central differences of a scalar function w.r.t. elements of ``tensor``.

    Only the flat positions in ``indices`` are probed when given; the rest of
    the returned array stays zero.
    """
    if not tensor.data.flags.c_contiguous or not tensor.data.flags.writeable:
        tensor.data = np.array(tensor.data, order="C")
    flat = tensor.data.reshape(-1)
    grad = np.zeros(flat.shape, dtype=np.float64)
    for i in (range(flat.size) if indices is None else indices):
        orig = flat[i]
        flat[i] = orig + step
        hi = fn()
        flat[i] = orig - step
        lo = fn()
        flat[i] = orig
        grad[i] = (hi - lo) / (2 * step)
    return grad.reshape(tensor.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max absolute deviation, scaled by the largest gradient magnitude."""
    scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-6)
    return float(np.abs(analytic - numeric).max() / scale)


def gradcheck(forward: Callable[[], Tensor], tensors: Sequence[Tensor], step: float = 1e-3,
              seed: int = 7919, max_elements: int | None = None) -> float:
    """Compare backprop against central differences; return the relative error.

    The output is projected onto a fixed random direction so every output
    element contributes to the scalar under test. With ``max_elements`` set,
    larger tensors are probed at that many randomly chosen positions.
    """
    out = forward()
    rng = np.random.default_rng(seed)
    proj = rng.standard_normal(out.shape).astype(out.dtype)

    def scalar() -> float:
        return float(np.sum(forward().data.astype(np.float64) * proj))

    for t in tensors:
        t.grad = None
    loss = (out * Tensor(proj, dtype=out.dtype)).sum()
    loss.backward()
    pairs = []
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros(t.shape)
        analytic = analytic.astype(np.float64)
        if max_elements is not None and t.size > max_elements:
            idx = np.sort(rng.choice(t.size, size=max_elements, replace=False))
            numeric = numerical_gradient(scalar, t, step, idx).reshape(-1)[idx]
            analytic = analytic.reshape(-1)[idx]
        else:
            numeric = numerical_gradient(scalar, t, step)
        pairs.append((analytic.reshape(-1), numeric.reshape(-1)))
    # one scale for the whole check: a tensor whose true gradient is exactly zero
    # (a softmax-invariant bias, say) would otherwise divide roundoff by roundoff
    return relative_error(np.concatenate([a for a, _ in pairs]), np.concatenate([n for _, n in pairs]))
