"""Toy Vision Transformer with maskable pruning targets and per-block skip gates.

Linear weights are stored (out, in), so "columns" of a matrix are its input
dimensions.  Per block:

* ``wq``, ``wk``, ``wv``  -- attention projections, output rows grouped by head
* ``w1``                  -- attention output projection; its input columns are
                             grouped by head (the head-level pruning target)
* ``w2``, ``w3``          -- MLP; ``w3`` columns are the hidden units

A block may be structurally reduced: fewer heads, heads with narrower value
dims (``v_dims``), fewer hidden units.  Q/K always keep the full head dim.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .plan import BlockPlan, CompressionPlan, InvalidPlanError


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 32
    patch_size: int = 8
    in_chans: int = 3
    embed_dim: int = 64
    num_blocks: int = 4
    num_heads: int = 4
    mlp_ratio: float = 4.0
    num_classes: int = 10
    ln_eps: float = 1e-6

    def __post_init__(self):
        for name in ("image_size", "patch_size", "in_chans", "embed_dim", "num_blocks", "num_heads", "num_classes"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.mlp_ratio <= 0:
            raise ConfigError("mlp_ratio must be positive")
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if int(round(self.mlp_ratio * self.embed_dim)) <= 0:
            raise ConfigError("mlp hidden size must be positive")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def hidden(self) -> int:
        return int(round(self.mlp_ratio * self.embed_dim))

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def num_tokens(self) -> int:
        return self.num_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.in_chans * self.patch_size ** 2

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ViTConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


DEIT_TINY = ViTConfig(image_size=224, patch_size=16, embed_dim=192, num_blocks=12, num_heads=3, num_classes=1000)
DEIT_SMALL = ViTConfig(image_size=224, patch_size=16, embed_dim=384, num_blocks=12, num_heads=6, num_classes=1000)
DEIT_BASE = ViTConfig(image_size=224, patch_size=16, embed_dim=768, num_blocks=12, num_heads=12, num_classes=1000)

BLOCK_ARRAYS = ("ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "w1", "b1",
                "ln2_g", "ln2_b", "w2", "b2", "w3", "b3")
TOP_ARRAYS = ("patch_w", "patch_b", "cls_token", "pos_embed", "norm_g", "norm_b", "head_w", "head_b")


@dataclass
class BlockWeights:
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    wq: np.ndarray
    bq: np.ndarray
    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray
    v_dims: tuple[int, ...]
    layer: int  # index of this block in the uncompressed model

    @property
    def num_heads(self) -> int:
        return len(self.v_dims)

    @property
    def hidden(self) -> int:
        return self.w2.shape[0]


@dataclass
class ViTWeights:
    config: ViTConfig
    patch_w: np.ndarray
    patch_b: np.ndarray
    cls_token: np.ndarray
    pos_embed: np.ndarray
    norm_g: np.ndarray
    norm_b: np.ndarray
    head_w: np.ndarray
    head_b: np.ndarray
    blocks: list[BlockWeights] = field(default_factory=list)

    @property
    def dtype(self):
        return self.patch_w.dtype

    def is_full(self) -> bool:
        cfg = self.config
        return len(self.blocks) == cfg.num_blocks and all(
            b.v_dims == (cfg.head_dim,) * cfg.num_heads and b.hidden == cfg.hidden for b in self.blocks)

    def structure(self) -> list[dict]:
        return [{"layer": b.layer, "v_dims": list(b.v_dims)} for b in self.blocks]

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {name: getattr(self, name) for name in TOP_ARRAYS}
        for i, b in enumerate(self.blocks):
            for name in BLOCK_ARRAYS:
                out[f"blocks.{i}.{name}"] = getattr(b, name)
        return out

    @classmethod
    def from_named(cls, config: ViTConfig, arrays: dict[str, np.ndarray], structure: list[dict]) -> "ViTWeights":
        top = {name: arrays[name] for name in TOP_ARRAYS}
        blocks = []
        for i, info in enumerate(structure):
            kw = {name: arrays[f"blocks.{i}.{name}"] for name in BLOCK_ARRAYS}
            blocks.append(BlockWeights(**kw, v_dims=tuple(int(v) for v in info["v_dims"]), layer=int(info["layer"])))
        return cls(config, **top, blocks=blocks)

    def map(self, fn) -> "ViTWeights":
        """New bundle with ``fn`` applied to every array."""
        return ViTWeights.from_named(self.config, {k: fn(v) for k, v in self.named_arrays().items()},
                                     self.structure())

    def copy(self) -> "ViTWeights":
        return self.map(np.array)

    def astype(self, dtype) -> "ViTWeights":
        return self.map(lambda a: a.astype(dtype))

    def num_params(self) -> int:
        return sum(a.size for a in self.named_arrays().values())


def init_weights(config: ViTConfig, rng: np.random.Generator, dtype=np.float64, std: float = 0.02) -> ViTWeights:
    D, hid = config.embed_dim, config.hidden

    def normal(*shape):
        return (rng.standard_normal(shape) * std).astype(dtype)

    def zeros(*shape):
        return np.zeros(shape, dtype=dtype)

    def ones(*shape):
        return np.ones(shape, dtype=dtype)

    blocks = []
    for layer in range(config.num_blocks):
        blocks.append(BlockWeights(
            ln1_g=ones(D), ln1_b=zeros(D),
            wq=normal(D, D), bq=zeros(D), wk=normal(D, D), bk=zeros(D), wv=normal(D, D), bv=zeros(D),
            w1=normal(D, D), b1=zeros(D),
            ln2_g=ones(D), ln2_b=zeros(D),
            w2=normal(hid, D), b2=zeros(hid), w3=normal(D, hid), b3=zeros(D),
            v_dims=(config.head_dim,) * config.num_heads, layer=layer,
        ))
    return ViTWeights(
        config,
        patch_w=normal(D, config.patch_dim), patch_b=zeros(D),
        cls_token=normal(1, 1, D), pos_embed=normal(1, config.num_tokens, D),
        norm_g=ones(D), norm_b=zeros(D),
        head_w=normal(config.num_classes, D), head_b=zeros(config.num_classes),
        blocks=blocks,
    )


@dataclass
class BlockMask:
    head_keep: np.ndarray      # (H,) bool
    headdim_keep: np.ndarray   # (H, d_h) bool
    mlp_hidden_keep: np.ndarray  # (hidden,) bool

    @classmethod
    def full(cls, config: ViTConfig) -> "BlockMask":
        return cls(np.ones(config.num_heads, bool), np.ones((config.num_heads, config.head_dim), bool),
                   np.ones(config.hidden, bool))

    @classmethod
    def from_plan(cls, config: ViTConfig, bp: BlockPlan) -> "BlockMask":
        m = cls.full(config)
        m.head_keep[list(bp.dropped_heads)] = False
        m.headdim_keep[list(bp.dropped_heads)] = False
        for h, dims in bp.dropped_dims.items():
            m.headdim_keep[h, list(dims)] = False
        m.mlp_hidden_keep[list(bp.dropped_hidden)] = False
        return m

    def validate(self, config: ViTConfig) -> None:
        H, dh = config.num_heads, config.head_dim
        if (self.head_keep.shape != (H,) or self.headdim_keep.shape != (H, dh)
                or self.mlp_hidden_keep.shape != (config.hidden,)):
            raise ConfigError("mask shape inconsistent with model config")
        if np.any(self.headdim_keep[~self.head_keep]):
            raise ConfigError("dropped head has kept head dims")


def plan_masks(config: ViTConfig, plan: CompressionPlan) -> tuple[np.ndarray, list[BlockMask]]:
    """Hard gates (L, 2) and block masks realising ``plan`` on the full model."""
    gates = np.array([[1.0, 0.0] if b.skip else [0.0, 1.0] for b in plan.blocks])
    return gates, [BlockMask.from_plan(config, b) for b in plan.blocks]


# --------------------------------------------------------------------- forward

def _params(weights: ViTWeights, params: dict[str, Tensor] | None) -> dict[str, Tensor]:
    if params is not None:
        return params
    return {k: Tensor(v) for k, v in weights.named_arrays().items()}


def patchify(images: np.ndarray, config: ViTConfig) -> np.ndarray:
    """(B, C, H, W) -> (B, num_patches, C*P*P)."""
    images = np.asarray(images)
    if images.ndim != 4 or images.shape[1:] != (config.in_chans, config.image_size, config.image_size):
        raise ConfigError(
            f"expected images of shape (B, {config.in_chans}, {config.image_size}, {config.image_size}), "
            f"got {images.shape}")
    B, C = images.shape[:2]
    P = config.patch_size
    g = config.image_size // P
    x = images.reshape(B, C, g, P, g, P).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(B, g * g, C * P * P)


def _attention(h: Tensor, p: dict[str, Tensor], pre: str, block: BlockWeights, config: ViTConfig,
               mask: BlockMask | None) -> Tensor:
    B, N, _ = h.shape
    nh, dh = block.num_heads, config.head_dim
    q = dc.linear(h, p[pre + "wq"], p[pre + "bq"])
    k = dc.linear(h, p[pre + "wk"], p[pre + "bk"])
    v = dc.linear(h, p[pre + "wv"], p[pre + "bv"])
    q = dc.transpose(dc.reshape(q, (B, N, nh, dh)), (0, 2, 1, 3))
    k = dc.transpose(dc.reshape(k, (B, N, nh, dh)), (0, 2, 3, 1))
    attn = dc.softmax_rows(dc.scale(dc.matmul(q, k), 1.0 / math.sqrt(dh)))  # (B, nh, N, N)
    if all(w == dh for w in block.v_dims):
        v = dc.transpose(dc.reshape(v, (B, N, nh, dh)), (0, 2, 1, 3))
        o = dc.matmul(attn, v)  # (B, nh, N, dh)
        if mask is not None:
            keep = (mask.headdim_keep & mask.head_keep[:, None]).astype(h.dtype)
            o = dc.mul(o, keep[None, :, None, :])
        o = dc.reshape(dc.transpose(o, (0, 2, 1, 3)), (B, N, nh * dh))
    else:
        if mask is not None:
            raise ConfigError("masks apply only to uncompressed blocks")
        outs, lo = [], 0
        for i, w in enumerate(block.v_dims):
            vi = dc.getitem(v, (slice(None), slice(None), slice(lo, lo + w)))
            outs.append(dc.matmul(attn[:, i], vi))
            lo += w
        o = dc.concat(outs, axis=-1)
    return dc.linear(o, p[pre + "w1"], p[pre + "b1"])


def block_body(x: Tensor, p: dict[str, Tensor], index: int, block: BlockWeights, config: ViTConfig,
               mask: BlockMask | None = None) -> Tensor:
    """The ungated transformer block f_l (pre-norm, internal residuals kept)."""
    pre = f"blocks.{index}."
    eps = config.ln_eps
    h = dc.layernorm(x, p[pre + "ln1_g"], p[pre + "ln1_b"], eps)
    x1 = dc.add(x, _attention(h, p, pre, block, config, mask))
    h2 = dc.layernorm(x1, p[pre + "ln2_g"], p[pre + "ln2_b"], eps)
    a = dc.gelu(dc.linear(h2, p[pre + "w2"], p[pre + "b2"]))
    if mask is not None:
        a = dc.mul(a, mask.mlp_hidden_keep.astype(x.dtype))
    return dc.add(x1, dc.linear(a, p[pre + "w3"], p[pre + "b3"]))


def forward_block(x: Tensor, p: dict[str, Tensor], index: int, block: BlockWeights, config: ViTConfig,
                  gate, mask: BlockMask | None = None) -> Tensor:
    """Gated block: ``G0 * x + G1 * f(x)``.

    ``gate`` is a length-2 array (constant) or a Tensor of shape (2,).
    """
    if mask is not None:
        mask.validate(config)
    if isinstance(gate, Tensor):
        g0 = dc.reshape(gate[0], (1, 1, 1))
        g1 = dc.reshape(gate[1], (1, 1, 1))
        return dc.add(dc.mul(x, g0), dc.mul(block_body(x, p, index, block, config, mask), g1))
    g = np.asarray(gate, dtype=float)
    if g.shape != (2,) or np.any(g < 0) or not np.isclose(g.sum(), 1.0):
        raise ConfigError(f"gate sample must be a nonnegative pair summing to 1, got {g}")
    if g[1] == 0.0:
        return x
    f = block_body(x, p, index, block, config, mask)
    if g[0] == 0.0:
        return f if g[1] == 1.0 else dc.scale(f, float(g[1]))
    return dc.add(dc.scale(x, float(g[0])), dc.scale(f, float(g[1])))


def forward(images: np.ndarray, weights: ViTWeights, gates=None, masks: list[BlockMask | None] | None = None,
            params: dict[str, Tensor] | None = None) -> Tensor:
    """Logits for a batch of images.

    ``gates`` is None (every block kept), an (L, 2) array, or a Tensor (L, 2) of
    gate samples.  ``params`` supplies leaf tensors when gradients are wanted.
    """
    config = weights.config
    p = _params(weights, params)
    patches = patchify(images, config).astype(weights.dtype, copy=False)
    B = patches.shape[0]
    x = dc.linear(Tensor(patches), p["patch_w"], p["patch_b"])
    cls = dc.broadcast_to(p["cls_token"], (B, 1, config.embed_dim))
    x = dc.add(dc.concat([cls, x], axis=1), p["pos_embed"])
    n = len(weights.blocks)
    if masks is not None and len(masks) != n:
        raise ConfigError(f"expected {n} masks, got {len(masks)}")
    for i, block in enumerate(weights.blocks):
        mask = masks[i] if masks is not None else None
        if gates is None:
            gate = (0.0, 1.0)
        elif isinstance(gates, Tensor):
            gate = gates[i]
        else:
            gate = np.asarray(gates)[i]
        x = forward_block(x, p, i, block, config, gate, mask)
    x = dc.layernorm(x, p["norm_g"], p["norm_b"], config.ln_eps)
    return dc.linear(x[:, 0], p["head_w"], p["head_b"])


def predict(images: np.ndarray, weights: ViTWeights, gates=None, masks=None, batch_size: int = 256) -> np.ndarray:
    """Logits without building a graph, evaluated in chunks."""
    outs = []
    with dc.no_grad():
        for lo in range(0, len(images), batch_size):
            outs.append(forward(images[lo:lo + batch_size], weights, gates, masks).values)
    if not outs:
        return np.zeros((0, weights.config.num_classes), dtype=weights.dtype)
    return np.concatenate(outs)


# ------------------------------------------------------------------ extraction

def masked_copy(weights: ViTWeights, plan: CompressionPlan) -> ViTWeights:
    """Physically remove what ``plan`` drops from an uncompressed model."""
    cfg = weights.config
    if not weights.is_full():
        raise InvalidPlanError("masked_copy needs an uncompressed model")
    if len(plan.blocks) != cfg.num_blocks:
        raise InvalidPlanError(f"plan has {len(plan.blocks)} blocks, model has {cfg.num_blocks}")
    H, dh, hid = cfg.num_heads, cfg.head_dim, cfg.hidden
    blocks = []
    for b, bp in zip(weights.blocks, plan.blocks):
        if bp.skip:
            continue
        _check_indices(bp, H, dh, hid)
        qk_idx, v_idx, v_dims = [], [], []
        for h in range(H):
            if h in bp.dropped_heads:
                continue
            dims = [d for d in range(dh) if d not in set(bp.dropped_dims.get(h, ()))]
            if not dims:
                continue  # every value dim gone: the head is dead
            qk_idx.extend(range(h * dh, (h + 1) * dh))
            v_idx.extend(h * dh + d for d in dims)
            v_dims.append(len(dims))
        if not v_dims:
            raise InvalidPlanError(f"plan empties every head of kept block {b.layer}")
        keep_hidden = [i for i in range(hid) if i not in set(bp.dropped_hidden)]
        blocks.append(replace(
            b,
            wq=b.wq[qk_idx].copy(), bq=b.bq[qk_idx].copy(),
            wk=b.wk[qk_idx].copy(), bk=b.bk[qk_idx].copy(),
            wv=b.wv[v_idx].copy(), bv=b.bv[v_idx].copy(),
            w1=b.w1[:, v_idx].copy(), b1=b.b1.copy(),
            w2=b.w2[keep_hidden].copy(), b2=b.b2[keep_hidden].copy(),
            w3=b.w3[:, keep_hidden].copy(), b3=b.b3.copy(),
            ln1_g=b.ln1_g.copy(), ln1_b=b.ln1_b.copy(), ln2_g=b.ln2_g.copy(), ln2_b=b.ln2_b.copy(),
            v_dims=tuple(v_dims),
        ))
    out = weights.copy()
    out.blocks = blocks
    return out


def _check_indices(bp: BlockPlan, H: int, dh: int, hid: int) -> None:
    if any(not 0 <= h < H for h in bp.dropped_heads):
        raise InvalidPlanError(f"head index out of range in {bp.dropped_heads}")
    for h, dims in bp.dropped_dims.items():
        if not 0 <= h < H or any(not 0 <= d < dh for d in dims):
            raise InvalidPlanError(f"head-dim index out of range for head {h}: {dims}")
    if any(not 0 <= i < hid for i in bp.dropped_hidden):
        raise InvalidPlanError("hidden index out of range")
