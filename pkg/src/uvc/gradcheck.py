"""Central-difference gradient checks for graphs built with ``diffcore``."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor


def numeric_gradient(fn: Callable[[Sequence[np.ndarray]], float], arrays: Sequence[np.ndarray], index: int,
                     eps: float = 1e-6) -> np.ndarray:
    """d fn / d arrays[index] by central differences (``fn`` sees perturbed copies)."""
    base = [np.array(a, dtype=np.float64, copy=True) for a in arrays]
    target = base[index]
    grad = np.zeros_like(target)
    it = np.nditer(target, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = target[i]
        target[i] = old + eps
        hi = fn(base)
        target[i] = old - eps
        lo = fn(base)
        target[i] = old
        grad[i] = (hi - lo) / (2 * eps)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """||a - b|| / max(||a||, ||b||, floor)."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def check_gradients(build: Callable[[Sequence[Tensor]], Tensor], arrays: Sequence[np.ndarray],
                    eps: float = 1e-6, seed: int = 0) -> list[float]:
    """Compare reverse-mode gradients of ``build`` against finite differences.

    Non-scalar outputs are contracted with a fixed random projection so every
    output entry contributes.  Returns one relative error per input.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    leaves = [Tensor(a.copy()) for a in arrays]
    out = build(leaves)
    proj = np.random.default_rng(seed).standard_normal(out.shape)
    dc.backward(out, proj)

    def scalar(vals):
        with dc.no_grad():
            return float(np.sum(build([Tensor(v) for v in vals]).values * proj))

    errors = []
    for i, leaf in enumerate(leaves):
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(arrays[i])
        errors.append(relative_error(analytic, numeric_gradient(scalar, arrays, i, eps)))
    return errors
