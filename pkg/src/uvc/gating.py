"""Per-block skip gates sampled with the Gumbel-Softmax relaxation.

Gate variables are stored as logits: component 0 is "skip", component 1 is
"keep".  A sample ``G = softmax((logits + g) / tau)`` with i.i.d. Gumbel noise
``g`` is differentiable in the logits.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

DEFAULT_INIT = (0.0, 3.0)


class GateParameterError(ValueError):
    pass


@dataclass
class GateVars:
    logits: np.ndarray  # (L, 2)

    @classmethod
    def init(cls, num_blocks: int, init=DEFAULT_INIT) -> "GateVars":
        return cls(np.tile(np.asarray(init, dtype=float), (num_blocks, 1)))

    def copy(self) -> "GateVars":
        return GateVars(self.logits.copy())

    def keep_prob(self) -> np.ndarray:
        return keep_probability(self.logits)

    def skip_mask(self) -> np.ndarray:
        return np.array([hard_decision(pair) for pair in self.logits])

    def hard(self) -> np.ndarray:
        """One-hot (L, 2) gates realising the hard decisions."""
        skip = self.skip_mask()
        return np.stack([skip, ~skip], axis=1).astype(float)


def gumbel_noise(rng: np.random.Generator, shape) -> np.ndarray:
    u = rng.random(shape)
    u = np.clip(u, np.finfo(float).tiny, 1.0 - np.finfo(float).eps)
    return -np.log(-np.log(u))


def gumbel_sample(logits, tau: float, noise: np.ndarray) -> Tensor:
    """Soft categorical sample over the last axis of ``logits``."""
    if not tau > 0:
        raise GateParameterError(f"temperature must be positive, got {tau}")
    if not isinstance(logits, Tensor):
        logits = Tensor(np.asarray(logits, dtype=float))
    return dc.softmax_rows(dc.scale(dc.add(logits, np.asarray(noise, dtype=logits.dtype)), 1.0 / tau))


def keep_probability(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=float)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return (e / e.sum(axis=-1, keepdims=True))[..., 1]


def keep_probability_tensor(logits: Tensor) -> Tensor:
    return dc.softmax_rows(logits)[..., 1]


def hard_decision(pair) -> bool:
    """True when the block should be skipped (ties keep it)."""
    return bool(1.0 - keep_probability(np.asarray(pair)) > 0.5)


def temperature(progress: float, start: float = 5.0, end: float = 0.5) -> float:
    """Geometric anneal from ``start`` (progress 0) to ``end`` (progress 1)."""
    progress = min(max(progress, 0.0), 1.0)
    return float(start * (end / start) ** progress)
