"""Expected inference FLOPs as a differentiable function of (s, r, gates).

One multiply-accumulate counts as one FLOP.  Layernorm, softmax and GELU are
not counted.  For a block with ``kh`` kept heads, ``A`` kept value dims in
total and ``m`` kept hidden units (N tokens, width D, head dim d_h)::

    qkv  = N * D * (2 * kh * d_h + A)      Q and K keep full heads, V keeps A dims
    attn = N^2 * kh * d_h + N^2 * A        scores + weighted sum
    proj = N * A * D
    mlp1 = N * D * m
    mlp2 = N * m * D

With soft variables ``kh = H - s_heads``, ``A = (kh / H) * sum_i (d_h - r_i)``
and ``m = hidden - s_hidden``.  A block's expected cost is its keep
probability times the sum above.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .gating import keep_probability
from .plan import CompressionPlan
from .sparsity import PrimalVars
from .vit import ViTConfig, ViTWeights

TERMS = ("qkv", "attn", "proj", "mlp1", "mlp2")


@dataclass
class FlopsBreakdown:
    qkv: np.ndarray
    attn: np.ndarray
    proj: np.ndarray
    mlp1: np.ndarray
    mlp2: np.ndarray
    gate_prob: np.ndarray
    stem: float
    head: float

    @property
    def block_dense(self) -> np.ndarray:
        return self.qkv + self.attn + self.proj + self.mlp1 + self.mlp2

    @property
    def block_expected(self) -> np.ndarray:
        return self.gate_prob * self.block_dense

    @property
    def total(self) -> float:
        return float(self.stem + self.head + self.block_expected.sum())

    def rows(self) -> list[dict]:
        return [
            {"block": l, **{t: float(getattr(self, t)[l]) for t in TERMS},
             "gate_prob": float(self.gate_prob[l]), "expected_total": float(self.block_expected[l])}
            for l in range(len(self.gate_prob))
        ]


def stem_flops(config: ViTConfig) -> float:
    return float(config.num_patches * config.patch_dim * config.embed_dim + config.num_tokens * config.embed_dim)


def head_flops(config: ViTConfig) -> float:
    return float(config.embed_dim * config.num_classes)


def _terms(config: ViTConfig, kept_heads, kept_vdims, kept_hidden) -> dict:
    """Block FLOPs terms; works on floats, numpy arrays or Tensors."""
    N, D, dh = config.num_tokens, config.embed_dim, config.head_dim
    qk = kept_heads * float(dh)
    return {
        "qkv": (qk * 2.0 + kept_vdims) * float(N * D),
        "attn": (qk + kept_vdims) * float(N * N),
        "proj": kept_vdims * float(N * D),
        "mlp1": kept_hidden * float(N * D),
        "mlp2": kept_hidden * float(N * D),
    }


def flops_block(config: ViTConfig, s_heads: float, r: np.ndarray, s_hidden: float, keep_prob: float) -> dict:
    """Expected FLOPs of one block, split by term (each already gate-weighted)."""
    H, dh = config.num_heads, config.head_dim
    kh = H - s_heads
    A = kh / H * float(np.sum(dh - np.asarray(r, dtype=float)))
    terms = _terms(config, kh, A, config.hidden - s_hidden)
    return {k: keep_prob * v for k, v in terms.items()}


def breakdown(config: ViTConfig, primal: PrimalVars, keep_prob: np.ndarray) -> FlopsBreakdown:
    H, dh = config.num_heads, config.head_dim
    kh = H - primal.s_heads
    A = kh / H * (dh - primal.r).sum(axis=1)
    terms = _terms(config, kh, A, config.hidden - primal.s_hidden)
    return FlopsBreakdown(**terms, gate_prob=np.asarray(keep_prob, dtype=float),
                          stem=stem_flops(config), head=head_flops(config))


def flops_total(config: ViTConfig, primal: PrimalVars, gate_logits: np.ndarray | None = None,
                keep_prob: np.ndarray | None = None) -> float:
    if keep_prob is None:
        keep_prob = np.ones(config.num_blocks) if gate_logits is None else keep_probability(gate_logits)
    return breakdown(config, primal, keep_prob).total


def dense_flops(config: ViTConfig) -> float:
    return flops_total(config, PrimalVars.zeros(config))


def flops_total_tensor(config: ViTConfig, s_heads, s_hidden, r, keep_prob) -> Tensor:
    """Differentiable total.  Any argument may be a Tensor or a constant array."""
    H, dh = config.num_heads, config.head_dim

    def lift(x):
        return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=float))

    s_heads, s_hidden, r, keep_prob = map(lift, (s_heads, s_hidden, r, keep_prob))
    kh = float(H) - s_heads
    A = dc.mul(kh, dc.sum_axis(float(dh) - r, axis=1)) * (1.0 / H)
    terms = _terms(config, kh, A, float(config.hidden) - s_hidden)
    block = terms["qkv"] + terms["attn"] + terms["proj"] + terms["mlp1"] + terms["mlp2"]
    return dc.sum_all(dc.mul(block, keep_prob)) + (stem_flops(config) + head_flops(config))


def resource_loss(config: ViTConfig, primal: PrimalVars, keep_prob: np.ndarray, z: float, budget: float) -> float:
    if z < 0:
        raise ValueError("z must be nonnegative")
    return float(z * (flops_total(config, primal, keep_prob=keep_prob) - budget))


def plan_breakdown(config: ViTConfig, plan: CompressionPlan) -> FlopsBreakdown:
    """Per-term FLOPs of the model a hard plan describes (same formula, integer counts)."""
    H, dh, L = config.num_heads, config.head_dim, config.num_blocks
    counts = np.zeros((3, L))
    for l, bp in enumerate(plan.blocks):
        kept = [h for h in range(H) if h not in bp.dropped_heads]
        vdims = [dh - len(set(bp.dropped_dims.get(h, ()))) for h in kept]
        vdims = [v for v in vdims if v > 0]
        counts[:, l] = len(vdims), sum(vdims), config.hidden - len(bp.dropped_hidden)
    terms = _terms(config, counts[0], counts[1], counts[2])
    keep = np.array([0.0 if bp.skip else 1.0 for bp in plan.blocks])
    return FlopsBreakdown(**terms, gate_prob=keep, stem=stem_flops(config), head=head_flops(config))


def plan_flops(config: ViTConfig, plan: CompressionPlan) -> float:
    return plan_breakdown(config, plan).total


def count_model_flops(weights: ViTWeights) -> float:
    """Direct recount from parameter shapes (independent of the soft formula)."""
    cfg = weights.config
    N, D = cfg.num_tokens, cfg.embed_dim
    total = weights.patch_w.shape[0] * weights.patch_w.shape[1] * cfg.num_patches + N * D
    total += weights.head_w.size
    for b in weights.blocks:
        total += N * (b.wq.size + b.wk.size + b.wv.size)   # each row costs D per token
        total += N * N * (b.wq.shape[0] + b.wv.shape[0])
        total += N * b.w1.size + N * b.w2.size + N * b.w3.size
    return float(total)
