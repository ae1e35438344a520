"""Desk-scale data, dense baseline training and evaluation."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .vit import ViTConfig, ViTWeights, forward, init_weights, predict

log = logging.getLogger(__name__)


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (n, C, H, W) in [0, 1]
    labels: np.ndarray  # (n,) int
    train_idx: np.ndarray
    val_idx: np.ndarray
    num_classes: int

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        idx = {"train": self.train_idx, "val": self.val_idx}[name]
        return self.images[idx], self.labels[idx]

    def __len__(self) -> int:
        return len(self.labels)


def _split(labels: np.ndarray, num_classes: int, rng: np.random.Generator, train_frac: float = 0.8):
    train, val = [], []
    for c in range(num_classes):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        cut = int(round(train_frac * len(idx)))
        train.append(idx[:cut])
        val.append(idx[cut:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(val))


def _pattern(kind: int, u: np.ndarray, v: np.ndarray, period: float) -> np.ndarray:
    """Binary mask of one of ten shapes in centred coordinates (u, v) ~ [-1, 1]."""
    if kind == 0:
        return (np.abs(u) < 0.55) & (np.abs(v) < 0.55)
    if kind == 1:
        return u ** 2 + v ** 2 < 0.45
    if kind == 2:
        rr = u ** 2 + v ** 2
        return (rr < 0.7) & (rr > 0.3)
    if kind == 3:
        return np.sin(v * period) > 0
    if kind == 4:
        return np.sin(u * period) > 0
    if kind == 5:
        return np.sin((u + v) * period * 0.7) > 0
    if kind == 6:
        return ((np.abs(u) < 0.2) | (np.abs(v) < 0.2)) & (np.abs(u) < 0.8) & (np.abs(v) < 0.8)
    if kind == 7:
        return (np.sin(u * period * 0.6) * np.sin(v * period * 0.6)) > 0
    if kind == 8:
        return (v > -0.6) & (v < 0.6) & (np.abs(u) < (0.6 - v) * 0.6)
    return ((np.abs(u - v) < 0.22) | (np.abs(u + v) < 0.22)) & (np.abs(u) < 0.8)


def synth_dataset(num_classes: int = 10, per_class: int = 200, image_size: int = 32, seed: int = 0,
                  noise: float = 0.08) -> Dataset:
    """Class-conditional coloured geometric patterns with jitter and noise."""
    if num_classes <= 0 or per_class <= 0 or image_size <= 0:
        raise DataError("dataset parameters must be positive")
    rng = np.random.default_rng(seed)
    hues = np.arange(num_classes) / num_classes
    palette = np.stack([0.5 + 0.45 * np.cos(2 * np.pi * (hues + k / 3)) for k in range(3)], axis=1)
    grid = (np.arange(image_size) + 0.5) / image_size * 2 - 1
    V, U = np.meshgrid(grid, grid, indexing="ij")
    n = num_classes * per_class
    images = np.empty((n, 3, image_size, image_size))
    labels = np.repeat(np.arange(num_classes), per_class)
    for i, c in enumerate(labels):
        scale = rng.uniform(0.8, 1.25)
        du, dv = rng.uniform(-0.25, 0.25, size=2)
        mask = _pattern(int(c) % 10, (U - du) * scale, (V - dv) * scale, period=rng.uniform(7.0, 10.0))
        bg = rng.uniform(0.0, 0.35)
        fg = np.clip(palette[c] + rng.uniform(-0.12, 0.12, size=3), 0, 1)
        img = np.where(mask[None], fg[:, None, None], bg)
        images[i] = np.clip(img + rng.normal(0, noise, img.shape), 0, 1)
    train_idx, val_idx = _split(labels, num_classes, rng)
    return Dataset(images, labels, train_idx, val_idx, num_classes)


IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".webp", ".ppm"}


def load_image_folder(path: str | Path, image_size: int, seed: int = 0) -> Dataset:
    """Directory-per-class layout: ``path/<class_name>/<image files>``.

    Classes are ordered by directory name.  Unreadable files are skipped with a
    warning; a class left without images is an error.
    """
    from PIL import Image, UnidentifiedImageError

    root = Path(path)
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir()) if root.is_dir() else []
    if not class_dirs:
        raise DataError(f"{root}: no class directories found")
    images, labels = [], []
    for c, d in enumerate(class_dirs):
        count = 0
        for f in sorted(d.iterdir()):
            if not f.is_file():
                continue
            try:
                with Image.open(f) as im:
                    im = im.convert("RGB").resize((image_size, image_size), Image.BILINEAR)
                    arr = np.asarray(im, dtype=np.float64) / 255.0
            except (UnidentifiedImageError, OSError) as exc:
                log.warning("skipping unreadable file %s (%s)", f, exc)
                continue
            images.append(arr.transpose(2, 0, 1))
            labels.append(c)
            count += 1
        if count == 0:
            raise DataError(f"class directory {d} contains no readable images")
    labels = np.asarray(labels)
    train_idx, val_idx = _split(labels, len(class_dirs), np.random.default_rng(seed))
    return Dataset(np.stack(images), labels, train_idx, val_idx, len(class_dirs))


# --------------------------------------------------------------- training bits

def minibatches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def supervised_loss(logits: Tensor, labels: np.ndarray, teacher_logits: np.ndarray | None = None,
                    distill_weight: float = 0.0) -> tuple[Tensor, float, float]:
    """Cross-entropy plus optional l2 distillation; returns (loss, task, distill)."""
    from .optimizer import distill_loss, task_loss

    task = task_loss(logits, labels)
    if teacher_logits is None or distill_weight == 0.0:
        return task, task.item(), 0.0
    dist = distill_loss(logits, teacher_logits)
    return dc.add(task, dc.scale(dist, distill_weight)), task.item(), dist.item()


class Adam:
    def __init__(self, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.lr, self.betas, self.eps, self.wd = lr, betas, eps, weight_decay
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, arrays: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.t += 1
        for k, w in arrays.items():
            g = grads[k]
            m = self.m.setdefault(k, np.zeros_like(w))
            v = self.v.setdefault(k, np.zeros_like(w))
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            if self.wd and w.ndim > 1:
                w -= lr * self.wd * w
            w -= lr * mhat / (np.sqrt(vhat) + self.eps)


def evaluate(weights: ViTWeights, images: np.ndarray, labels: np.ndarray, gates=None, masks=None,
             batch_size: int = 256) -> dict[str, float]:
    """Top-1 accuracy and mean cross-entropy with hard gates/masks."""
    logits = predict(images, weights, gates, masks, batch_size).astype(np.float64)
    if len(labels) == 0:
        return {"top1": 0.0, "loss": 0.0}
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return {
        "top1": float((logits.argmax(axis=1) == labels).mean()),
        "loss": float(-logp[np.arange(len(labels)), labels].mean()),
    }


@dataclass
class DenseParams:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 0.05
    warmup_epochs: int = 2
    seed: int = 0


def train_dense(config: ViTConfig, data: Dataset, hp: DenseParams, dtype=np.float32
                ) -> tuple[ViTWeights, list[dict]]:
    """Supervised training of the uncompressed model; returns the best-val weights."""
    rng = np.random.default_rng(hp.seed)
    weights = init_weights(config, rng, dtype=dtype)
    x_tr, y_tr = data.split("train")
    x_va, y_va = data.split("val")
    opt = Adam(hp.lr, weight_decay=hp.weight_decay)
    steps_per_epoch = -(-len(y_tr) // hp.batch_size)
    total = max(1, hp.epochs * steps_per_epoch)
    warm = hp.warmup_epochs * steps_per_epoch
    best, best_acc, history, step = weights.copy(), -1.0, [], 0
    for epoch in range(hp.epochs):
        losses = []
        for idx in minibatches(len(y_tr), hp.batch_size, rng):
            if step < warm:
                lr = hp.lr * (step + 1) / warm
            else:
                lr = hp.lr * 0.5 * (1 + np.cos(np.pi * (step - warm) / max(1, total - warm)))
            arrays = weights.named_arrays()
            params = {k: Tensor(v) for k, v in arrays.items()}
            logits = forward(x_tr[idx], weights, params=params)
            loss, _, _ = supervised_loss(logits, y_tr[idx])
            dc.backward(loss)
            opt.step(arrays, {k: params[k].grad for k in arrays}, lr=lr)
            losses.append(loss.item())
            step += 1
        metrics = evaluate(weights, x_va, y_va)
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)), **{f"val_{k}": v for k, v in metrics.items()}})
        log.info("dense epoch %d loss %.4f val top1 %.4f", epoch, np.mean(losses), metrics["top1"])
        if metrics["top1"] > best_acc:
            best_acc, best = metrics["top1"], weights.copy()
    return best, history
