"""Joint structured pruning, block skipping and distillation for a small ViT, in numpy."""
from .extraction import FinetuneParams, build_plan, extract, finetune
from .optimizer import HyperParams, OptimState, primal_dual_step, run_compression
from .plan import BlockPlan, CompressionPlan
from .resources import dense_flops, flops_total, plan_flops
from .vit import DEIT_BASE, DEIT_SMALL, DEIT_TINY, ViTConfig, ViTWeights, forward, init_weights

__version__ = "0.1.0"

__all__ = [
    "BlockPlan", "CompressionPlan", "DEIT_BASE", "DEIT_SMALL", "DEIT_TINY", "FinetuneParams", "HyperParams",
    "OptimState", "ViTConfig", "ViTWeights", "build_plan", "dense_flops", "extract", "finetune", "flops_total",
    "forward", "init_weights", "plan_flops", "primal_dual_step", "run_compression",
]
