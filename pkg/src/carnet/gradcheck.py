"""Central finite-difference checks against reverse-mode gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad

_TINY = 1e-12


def _eval(fn, inputs) -> float:
    with no_grad():
        return float(np.asarray(fn(*inputs).data))


def analytic(fn: Callable[..., Tensor], inputs: Sequence[Tensor]) -> list[np.ndarray]:
    for t in inputs:
        t.grad = None
    backward(fn(*inputs))
    return [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]


def numeric(fn: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-5) -> list[np.ndarray]:
    """Elementwise central differences with every input perturbed in place."""
    out = []
    for t in inputs:
        t.data = np.ascontiguousarray(t.data)   # flat views below must alias the data
        g = np.zeros_like(t.data)
        flat, gflat = t.data.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = _eval(fn, inputs)
            flat[i] = orig - h
            down = _eval(fn, inputs)
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
        out.append(g)
    return out


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """``||a - b|| / max(||a||, ||b||)`` (0 when both vanish)."""
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale < _TINY else float(np.linalg.norm(a - b) / scale)


def check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-5) -> float:
    """Largest per-input relative error between reverse-mode and finite-difference gradients."""
    ga = analytic(fn, inputs)
    gn = numeric(fn, inputs, h)
    return max(relative_error(a, n) for a, n in zip(ga, gn))


def check_directional(fn: Callable[..., Tensor], inputs: Sequence[Tensor], rng: np.random.Generator,
                      n_dirs: int = 3, h: float = 1e-5) -> float:
    """Compare ``grad . v`` with a central difference along random unit directions ``v``
    spanning all inputs at once; cheap for models with many parameters."""
    ga = analytic(fn, inputs)
    worst = 0.0
    for _ in range(n_dirs):
        dirs = [rng.standard_normal(t.shape) for t in inputs]
        norm = np.sqrt(sum(float(np.sum(d * d)) for d in dirs))
        dirs = [d / norm for d in dirs]
        originals = [t.data.copy() for t in inputs]
        for t, d, o in zip(inputs, dirs, originals):
            t.data = o + h * d
        up = _eval(fn, inputs)
        for t, d, o in zip(inputs, dirs, originals):
            t.data = o - h * d
        down = _eval(fn, inputs)
        for t, o in zip(inputs, originals):
            t.data = o
        fd = (up - down) / (2 * h)
        an = sum(float(np.sum(g * d)) for g, d in zip(ga, dirs))
        scale = max(abs(fd), abs(an))
        worst = max(worst, 0.0 if scale < _TINY else abs(fd - an) / scale)
    return worst
