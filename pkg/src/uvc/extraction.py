"""Turn a finished soft state into a hard plan, shrink the model, finetune it."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .harness import evaluate, minibatches, supervised_loss
from .optimizer import HyperParams, OptimState
from .plan import BlockPlan, CompressionPlan, InvalidPlanError
from .resources import count_model_flops, dense_flops, plan_flops
from .sparsity import block_norms, smallest
from .vit import ViTWeights, forward, masked_copy

log = logging.getLogger(__name__)

__all__ = ["BlockPlan", "CompressionPlan", "InvalidPlanError", "build_plan", "extract", "finetune", "FinetuneParams"]


def _ceil_count(x: float, limit: int) -> int:
    return min(limit, max(0, int(math.ceil(x))))


def build_plan(state: OptimState, hp: HyperParams | None = None) -> CompressionPlan:
    """Integerise (s, r) by ceiling, gates by hard decision, pick smallest-norm groups."""
    cfg = state.config
    H, dh = cfg.num_heads, cfg.head_dim
    norms = block_norms(state.weights)
    use_gates = hp is None or hp.gating
    skips = state.gates.skip_mask() if use_gates else np.zeros(cfg.num_blocks, bool)
    blocks = []
    for l in range(cfg.num_blocks):
        heads = norms["heads"][l]
        dropped_heads = smallest(heads, _ceil_count(state.primal.s_heads[l], H)).tolist()
        dropped_dims = {}
        for h in range(H):
            if h in dropped_heads:
                continue
            k = _ceil_count(state.primal.r[l, h], dh)
            if k:
                dropped_dims[h] = tuple(sorted(smallest(norms["dims"][l, h], k).tolist()))
        alive = [h for h in range(H) if h not in dropped_heads and len(dropped_dims.get(h, ())) < dh]
        if not skips[l] and not alive:
            keep = int(np.argmax(heads))
            log.warning("block %d: plan would drop every head; keeping head %d (largest norm)", l, keep)
            dropped_heads = [h for h in dropped_heads if h != keep]
            dropped_dims.pop(keep, None)
        dropped_hidden = smallest(norms["hidden"][l], _ceil_count(state.primal.s_hidden[l], cfg.hidden))
        blocks.append(BlockPlan(
            skip=bool(skips[l]),
            dropped_heads=tuple(sorted(dropped_heads)),
            dropped_dims=dropped_dims,
            dropped_hidden=tuple(sorted(dropped_hidden.tolist())),
        ))
    plan = CompressionPlan(blocks, dense_flops=dense_flops(cfg))
    plan.flops = plan_flops(cfg, plan)
    if hp is not None:
        plan.budget = hp.budget * plan.dense_flops
    return plan


def extract(weights: ViTWeights, plan: CompressionPlan) -> ViTWeights:
    """Physically remove the planned groups and check the FLOPs bookkeeping."""
    small = masked_copy(weights, plan)
    counted = count_model_flops(small)
    expected = plan_flops(weights.config, plan)
    if not math.isclose(counted, expected, rel_tol=1e-12):
        raise InvalidPlanError(f"extracted model has {counted} FLOPs, plan says {expected}")
    return small


@dataclass
class FinetuneParams:
    epochs: int = 10
    lr: float = 0.0001  # a tenth of the compression-phase weight rate
    momentum: float = 0.9
    batch_size: int = 64
    distill_weight: float = 1.0
    seed: int = 0


def finetune(weights: ViTWeights, train: tuple[np.ndarray, np.ndarray], val: tuple[np.ndarray, np.ndarray],
             hp: FinetuneParams, teacher_logits: np.ndarray | None = None) -> tuple[ViTWeights, list[dict]]:
    """Momentum SGD on task (+ distillation) loss; returns the best-validation weights.

    The starting weights count as a candidate, so validation accuracy never drops.
    """
    rng = np.random.default_rng(hp.seed)
    x_tr, y_tr = train
    x_va, y_va = val
    weights = weights.copy()
    best = weights.copy()
    best_acc = evaluate(weights, x_va, y_va)["top1"]
    history = [{"epoch": -1, "val_top1": best_acc}]
    momentum: dict[str, np.ndarray] = {}
    for epoch in range(hp.epochs):
        losses = []
        for idx in minibatches(len(y_tr), hp.batch_size, rng):
            arrays = weights.named_arrays()
            params = {k: Tensor(v) for k, v in arrays.items()}
            logits = forward(x_tr[idx], weights, params=params)
            t = teacher_logits[idx] if teacher_logits is not None else None
            loss, _, _ = supervised_loss(logits, y_tr[idx], t, hp.distill_weight)
            dc.backward(loss)
            for k, w in arrays.items():
                g = params[k].grad
                if g is None:
                    continue
                buf = momentum.get(k)
                buf = g.copy() if buf is None else hp.momentum * buf + g
                momentum[k] = buf
                w -= hp.lr * buf
            losses.append(loss.item())
        acc = evaluate(weights, x_va, y_va)["top1"]
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "val_top1": acc})
        log.info("finetune epoch %d loss %.4f val top1 %.4f", epoch, np.mean(losses), acc)
        if acc > best_acc:
            best_acc, best = acc, weights.copy()
    return best, history
