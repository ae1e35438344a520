"""Group norms, the least-s sparsity penalty and its closed-form proximal map.

The penalty on a matrix ``W`` with column groups ``g`` is the sum of squared
group norms of the ``ceil(s)`` groups with the smallest norms.  It is zero iff
at least ``ceil(s)`` groups are entirely zero.  Ties between equal norms go to
the lowest group index.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .vit import ViTConfig, ViTWeights


@dataclass(frozen=True)
class GroupSpec:
    """Ordered partition of a matrix's columns."""

    groups: tuple[np.ndarray, ...]

    @classmethod
    def heads(cls, num_heads: int, head_dim: int) -> "GroupSpec":
        return cls(tuple(np.arange(h * head_dim, (h + 1) * head_dim) for h in range(num_heads)))

    @classmethod
    def singletons(cls, n: int) -> "GroupSpec":
        return cls(tuple(np.array([i]) for i in range(n)))

    def __len__(self) -> int:
        return len(self.groups)

    def validate(self, num_columns: int) -> None:
        cat = np.concatenate(self.groups) if self.groups else np.array([], int)
        if sorted(cat.tolist()) != list(range(num_columns)):
            raise ValueError("groups must be disjoint and cover every column")


def column_sqnorms(W: np.ndarray) -> np.ndarray:
    return np.einsum("ij,ij->j", W, W)


def group_sqnorms(W: np.ndarray, groups: GroupSpec) -> np.ndarray:
    col = column_sqnorms(W)
    return np.array([col[g].sum() for g in groups.groups])


def smallest(sqnorms: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` smallest entries (stable: lowest index wins ties)."""
    return np.argsort(sqnorms, kind="stable")[:k]


def _count(s: float, n: int) -> int:
    k = int(math.ceil(s))
    if k < 0:
        k = 0
    if k > n:
        raise ValueError(f"ceil(s) = {k} exceeds the number of groups ({n})")
    return k


def least_s_sqnorm(W: np.ndarray, groups: GroupSpec, s: float) -> float:
    norms = group_sqnorms(W, groups)
    k = _count(s, len(norms))
    return float(np.sort(norms, kind="stable")[:k].sum())


def marginal_sqnorm(sqnorms: np.ndarray, s: float) -> float:
    """Norm of the group ranked ``min(G, ceil(s) + 1)`` -- the next one to go."""
    G = len(sqnorms)
    if G == 0:
        return 0.0
    k = min(G, _count(s, G) + 1)
    return float(np.sort(sqnorms, kind="stable")[k - 1])


def grad_sparsity_wrt_s(W: np.ndarray, groups: GroupSpec, s: float) -> float:
    """Proxy derivative of ``least_s_sqnorm`` with respect to ``s``."""
    return marginal_sqnorm(group_sqnorms(W, groups), s)


def least_sqnorm_op(sqnorms: np.ndarray, s: Tensor) -> Tensor:
    """Differentiable least-ceil(s) penalty over a batch of norm vectors.

    ``sqnorms`` has shape (..., G) and ``s`` shape (...).  The forward value is
    exact; the adjoint w.r.t. ``s`` is the marginal-group proxy (ceil handled
    straight-through).
    """
    sqnorms = np.asarray(sqnorms, dtype=s.dtype)
    G = sqnorms.shape[-1]
    ordered = np.sort(sqnorms, axis=-1, kind="stable")
    csum = np.concatenate([np.zeros(ordered.shape[:-1] + (1,), ordered.dtype), np.cumsum(ordered, axis=-1)], -1)
    k = np.ceil(s.values).astype(int)
    if np.any(k > G):
        raise ValueError(f"ceil(s) exceeds the number of groups ({G})")
    k = np.clip(k, 0, G)
    value = np.take_along_axis(csum, k[..., None], -1)[..., 0]
    nxt = np.minimum(G, k + 1) - 1
    marginal = np.take_along_axis(ordered, nxt[..., None], -1)[..., 0]

    def adjoint(g):
        s.accumulate(g * marginal)

    return dc.custom_op(value, (s,), adjoint, "least_sqnorm")


# ----------------------------------------------------------- compression vars

@dataclass
class PrimalVars:
    """Soft pruning amounts: heads and hidden units per block, dims per head."""

    s_heads: np.ndarray   # (L,) in [0, H]
    s_hidden: np.ndarray  # (L,) in [0, hidden]
    r: np.ndarray         # (L, H) in [0, d_h]

    @classmethod
    def zeros(cls, config: ViTConfig) -> "PrimalVars":
        L, H = config.num_blocks, config.num_heads
        return cls(np.zeros(L), np.zeros(L), np.zeros((L, H)))

    def clamp(self, config: ViTConfig) -> None:
        np.clip(self.s_heads, 0.0, config.num_heads, out=self.s_heads)
        np.clip(self.s_hidden, 0.0, config.hidden, out=self.s_hidden)
        np.clip(self.r, 0.0, config.head_dim, out=self.r)

    def copy(self) -> "PrimalVars":
        return PrimalVars(self.s_heads.copy(), self.s_hidden.copy(), self.r.copy())


@dataclass
class DualVars:
    y_heads: np.ndarray   # (L,)
    y_hidden: np.ndarray  # (L,)
    p: np.ndarray         # (L, H)
    z: float = 0.0

    @classmethod
    def zeros(cls, config: ViTConfig) -> "DualVars":
        L, H = config.num_blocks, config.num_heads
        return cls(np.zeros(L), np.zeros(L), np.zeros((L, H)), 0.0)

    def copy(self) -> "DualVars":
        return DualVars(self.y_heads.copy(), self.y_hidden.copy(), self.p.copy(), float(self.z))

    def is_nonnegative(self) -> bool:
        return bool(self.z >= 0 and np.all(self.y_heads >= 0) and np.all(self.y_hidden >= 0) and np.all(self.p >= 0))


# ------------------------------------------------------------ per-block norms

def block_norms(weights: ViTWeights) -> dict[str, np.ndarray]:
    """Squared norms feeding every penalty term, stacked over blocks.

    ``heads`` (L, H): head groups of ``w1``; ``dims`` (L, H, d_h): columns of
    ``w1`` inside each head; ``hidden`` (L, hidden): columns of ``w3``.
    """
    cfg = weights.config
    H, dh = cfg.num_heads, cfg.head_dim
    cols = np.stack([column_sqnorms(b.w1) for b in weights.blocks]).reshape(-1, H, dh)
    return {
        "dims": cols,
        "heads": cols.sum(axis=-1),
        "hidden": np.stack([column_sqnorms(b.w3) for b in weights.blocks]),
    }


def sparsity_loss(weights: ViTWeights, primal: PrimalVars, dual: DualVars) -> float:
    cfg = weights.config
    heads = GroupSpec.heads(cfg.num_heads, cfg.head_dim)
    hidden = GroupSpec.singletons(cfg.hidden)
    within = GroupSpec.singletons(cfg.head_dim)
    total = 0.0
    for l, b in enumerate(weights.blocks):
        total += dual.y_heads[l] * least_s_sqnorm(b.w1, heads, primal.s_heads[l])
        total += dual.y_hidden[l] * least_s_sqnorm(b.w3, hidden, primal.s_hidden[l])
        for i in range(cfg.num_heads):
            sub = b.w1[:, heads.groups[i]]
            total += dual.p[l, i] * least_s_sqnorm(sub, within, primal.r[l, i])
    return float(total)


# ------------------------------------------------------------------- prox

def prox_singletons(w_bar: np.ndarray, s: float, y: float, eta: float) -> np.ndarray:
    """Shrink the ceil(s) smallest columns by 1 / (1 + 2 eta y)."""
    out = np.array(w_bar, copy=True)
    k = _count(s, w_bar.shape[1])
    if k and y > 0:
        idx = smallest(column_sqnorms(w_bar), k)
        out[:, idx] *= 1.0 / (1.0 + 2.0 * eta * y)
    return out


def column_scales_two_level(col_sqnorms: np.ndarray, s: float, y: float, r: np.ndarray, p: np.ndarray,
                            eta: float) -> np.ndarray:
    """Per-column scale factors of the exact prox for the head + head-dim penalty.

    ``col_sqnorms`` is (H, d_h).  Within head ``i`` the ceil(r_i) smallest
    columns carry weight ``p_i``; the ceil(s) heads selected below carry weight
    ``y`` on every column.  A column with total weight ``a`` is scaled by
    ``1 / (1 + 2 eta a)``, which costs ``eta a / (1 + 2 eta a)`` per unit squared
    norm.  Heads are picked by the extra cost they incur when selected; with
    ``p = 0`` that is the plain group-norm ranking.
    """
    H, dh = col_sqnorms.shape

    def cost(a):
        return eta * a / (1.0 + 2.0 * eta * a)

    within = np.zeros((H, dh), bool)
    for i in range(H):
        within[i, smallest(col_sqnorms[i], _count(r[i], dh))] = True
    weight = np.where(within, p[:, None], 0.0)
    base = (cost(weight) * col_sqnorms).sum(axis=1)
    selected = (cost(weight + y) * col_sqnorms).sum(axis=1)
    k = _count(s, H)
    if k:
        weight[smallest(selected - base, k)] += y
    return 1.0 / (1.0 + 2.0 * eta * weight)


def prox_two_level(w_bar: np.ndarray, num_heads: int, s: float, y: float, r: np.ndarray, p: np.ndarray,
                   eta: float) -> np.ndarray:
    dh = w_bar.shape[1] // num_heads
    scales = column_scales_two_level(column_sqnorms(w_bar).reshape(num_heads, dh), s, y, r, p, eta)
    return (w_bar * scales.reshape(1, -1)).astype(w_bar.dtype)


def prox_weights(w_bar: ViTWeights, primal: PrimalVars, dual: DualVars, eta1: float) -> ViTWeights:
    """Proximal map of ``eta1 * sparsity_loss`` at ``w_bar``.

    Only ``w1`` and ``w3`` of each block change; everything else is copied.
    """
    if eta1 <= 0:
        raise ValueError("eta1 must be positive")
    out = w_bar.copy()
    H = w_bar.config.num_heads
    for l, b in enumerate(out.blocks):
        b.w1 = prox_two_level(b.w1, H, primal.s_heads[l], dual.y_heads[l], primal.r[l], dual.p[l], eta1)
        b.w3 = prox_singletons(b.w3, primal.s_hidden[l], dual.y_hidden[l], eta1)
    return out
