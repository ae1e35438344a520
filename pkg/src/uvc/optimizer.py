"""Primal-dual training of weights, pruning amounts and skip gates.

Per step, in order:

1. proximal SGD on the weights (momentum SGD on task + distillation loss, then
   the prox of the sparsity penalty);
2. descent on ``s`` (heads, hidden units) -- sparsity proxy + budget term;
3. descent on ``r`` (dims per head), using the new ``s``;
4. descent on the gate logits (task loss through the Gumbel sample + budget);
5. projected ascent on ``z``;
6. ascent on ``y`` by the current least-ceil(s) squared norms;
7. ascent on ``p`` by the current least-ceil(r) squared norms.

FLOPs enter the optimisation normalised by the dense model's FLOPs, so ``z``
and the budget are unit-free; traces report both forms.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .gating import GateVars, gumbel_noise, gumbel_sample, keep_probability, keep_probability_tensor, temperature
from .harness import minibatches
from .resources import dense_flops, flops_total, flops_total_tensor
from .sparsity import DualVars, PrimalVars, block_norms, least_sqnorm_op, prox_weights, sparsity_loss
from .vit import ViTWeights, forward, predict

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    def __init__(self, message: str, diagnostics: dict | None = None, trace: list | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
        self.trace = trace or []


def task_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    return dc.cross_entropy(logits, labels)


def distill_loss(student: Tensor, teacher: np.ndarray) -> Tensor:
    """Mean over the batch of the squared l2 distance between logit vectors."""
    teacher = np.asarray(teacher, dtype=student.dtype)
    if student.shape != teacher.shape:
        raise dc.ShapeError(f"distill_loss: student {student.shape} vs teacher {teacher.shape}")
    return dc.scale(dc.sum_sq(dc.sub(student, teacher)), 1.0 / student.shape[0])


@dataclass
class HyperParams:
    lr_weights: float = 0.001       # proximal SGD step on W
    momentum: float = 0.9
    lr_heads: float = 2.0           # s, head counts
    lr_hidden: float = 400.0        # s, MLP hidden units
    lr_dims: float = 200.0          # r, dims within each head
    lr_gates: float = 2.0           # gate logits
    lr_y: float = 0.003             # y ascent
    lr_p: float = 0.003             # p ascent
    lr_z: float = 0.2               # z ascent, scaled by the milestone factors
    z_milestones: tuple[float, ...] = (1.0, 5.0, 9.0, 13.0, 17.0)
    distill_weight: float = 1.0
    budget: float = 0.5             # fraction of dense FLOPs
    epochs: int = 40
    batch_size: int = 64
    tau_start: float = 5.0
    tau_end: float = 0.5
    gate_init: tuple[float, float] = (0.0, 3.0)
    gate_freeze: float = 0.25       # final fraction of steps run with hard gates
    settle: float = 0.15            # final fraction with s, r, gates frozen; only W and y, p move
    settle_growth: float = 1.15     # per-step factor on y, p while settling (penalty continuation)
    prune: bool = True
    gating: bool = True
    seed: int = 0

    def validate(self) -> None:
        rates = ("lr_weights", "lr_heads", "lr_hidden", "lr_dims", "lr_gates", "lr_y", "lr_p", "lr_z")
        for name in rates:
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.distill_weight < 0:
            raise ValueError("distill_weight must be nonnegative")
        if not 0 < self.budget <= 1:
            raise ValueError("budget must be a fraction in (0, 1]")
        if self.epochs < 0 or self.batch_size <= 0:
            raise ValueError("epochs must be >= 0 and batch_size > 0")
        if not 0 <= self.gate_freeze <= 1:
            raise ValueError("gate_freeze must lie in [0, 1]")
        if not 0 <= self.settle <= 1 or self.settle_growth < 1:
            raise ValueError("settle must lie in [0, 1] and settle_growth be >= 1")
        if not (self.tau_start > 0 and self.tau_end > 0):
            raise ValueError("temperatures must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["z_milestones"] = list(self.z_milestones)
        d["gate_init"] = list(self.gate_init)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "HyperParams":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown hyperparameters: {sorted(unknown)}")
        d = dict(d)
        for key in ("z_milestones", "gate_init"):
            if key in d:
                d[key] = tuple(float(v) for v in d[key])
        return cls(**d)


@dataclass
class OptimState:
    weights: ViTWeights
    primal: PrimalVars
    dual: DualVars
    gates: GateVars
    teacher: ViTWeights
    momentum: dict[str, np.ndarray] = field(default_factory=dict)
    iteration: int = 0
    total_iterations: int = 1

    @classmethod
    def initial(cls, weights: ViTWeights, hp: HyperParams) -> "OptimState":
        cfg = weights.config
        return cls(
            weights=weights.copy(),
            primal=PrimalVars.zeros(cfg),
            dual=DualVars.zeros(cfg),
            gates=GateVars.init(cfg.num_blocks, hp.gate_init),
            teacher=weights.copy(),
        )

    @property
    def config(self):
        return self.weights.config

    def progress(self) -> float:
        return self.iteration / max(1, self.total_iterations)

    def gates_frozen(self, hp: HyperParams) -> bool:
        return self.progress() >= 1.0 - max(hp.gate_freeze, hp.settle)

    def settling(self, hp: HyperParams) -> bool:
        return hp.settle > 0 and self.progress() >= 1.0 - hp.settle

    def keep_prob(self, hp: HyperParams) -> np.ndarray:
        if not hp.gating:
            return np.ones(self.config.num_blocks)
        if self.gates_frozen(hp):
            return (~self.gates.skip_mask()).astype(float)
        return self.gates.keep_prob()

    def expected_flops(self, hp: HyperParams) -> float:
        return flops_total(self.config, self.primal, keep_prob=self.keep_prob(hp))


def tau_at(state: OptimState, hp: HyperParams) -> float:
    return temperature(state.progress(), hp.tau_start, hp.tau_end)


def z_rate_at(state: OptimState, hp: HyperParams) -> float:
    stages = len(hp.z_milestones)
    k = min(stages - 1, int(state.progress() * stages))
    return hp.lr_z * hp.z_milestones[k]


def _sparsity_tensor(norms: dict, dual: DualVars, s_heads, s_hidden, r) -> Tensor:
    """Sparsity penalty as a graph over (s, r), weights held fixed."""
    def lift(x):
        return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=float))

    s_heads, s_hidden, r = lift(s_heads), lift(s_hidden), lift(r)
    terms = [
        dc.sum_all(dc.mul(least_sqnorm_op(norms["heads"], s_heads), dual.y_heads)),
        dc.sum_all(dc.mul(least_sqnorm_op(norms["hidden"], s_hidden), dual.y_hidden)),
        dc.sum_all(dc.mul(least_sqnorm_op(norms["dims"], r), dual.p)),
    ]
    return terms[0] + terms[1] + terms[2]


def total_objective(state: OptimState, images: np.ndarray, labels: np.ndarray, teacher_logits: np.ndarray,
                    hp: HyperParams, noise: np.ndarray, tau: float) -> dict[str, float]:
    """Value of the mini-max objective with one gate sample (no updates)."""
    cfg = state.config
    with dc.no_grad():
        gates = _gate_sample(state, hp, noise, tau, None)
        logits = forward(images, state.weights, gates)
        task = task_loss(logits, labels).item()
        dist = distill_loss(logits, teacher_logits).item() if hp.distill_weight else 0.0
    dense = dense_flops(cfg)
    flops = flops_total(cfg, state.primal, keep_prob=state.keep_prob(hp))
    resource = state.dual.z * (flops / dense - hp.budget)
    sparse = sparsity_loss(state.weights, state.primal, state.dual)
    return {"task": task, "distill": dist, "resource": resource, "sparsity": sparse,
            "total": task + hp.distill_weight * dist + resource + sparse}


def _gate_sample(state: OptimState, hp: HyperParams, noise: np.ndarray, tau: float, logits_leaf: Tensor | None):
    if not hp.gating:
        return None
    if state.gates_frozen(hp):
        return state.gates.hard()
    if logits_leaf is None:
        return gumbel_sample(state.gates.logits, tau, noise).values
    return gumbel_sample(logits_leaf, tau, noise)


def _diagnostics(state: OptimState) -> dict:
    w = state.weights.named_arrays()
    return {
        "max_abs_weight": float(max(np.abs(a).max() for a in w.values())),
        "s_heads": state.primal.s_heads.tolist(),
        "s_hidden": state.primal.s_hidden.tolist(),
        "r_max": float(state.primal.r.max()),
        "y_heads": state.dual.y_heads.tolist(),
        "y_hidden": state.dual.y_hidden.tolist(),
        "p_max": float(state.dual.p.max()),
        "z": float(state.dual.z),
        "gate_logits": state.gates.logits.tolist(),
        "iteration": state.iteration,
    }


def primal_dual_step(state: OptimState, images: np.ndarray, labels: np.ndarray, teacher_logits: np.ndarray,
                     hp: HyperParams, rng: np.random.Generator) -> dict:
    """One iteration; mutates ``state`` and returns a trace record."""
    cfg = state.config
    dense = dense_flops(cfg)
    budget = hp.budget
    tau = tau_at(state, hp)
    noise = gumbel_noise(rng, (cfg.num_blocks, 2))
    frozen = state.gates_frozen(hp)
    settling = state.settling(hp)
    learn_gates = hp.gating and not frozen

    # forward/backward of L(W, gt) = task + lambda * distill
    arrays = state.weights.named_arrays()
    params = {k: Tensor(v) for k, v in arrays.items()}
    logits_leaf = Tensor(state.gates.logits.astype(state.weights.dtype)) if learn_gates else None
    gates = _gate_sample(state, hp, noise, tau, logits_leaf)
    logits = forward(images, state.weights, gates, params=params)
    task = task_loss(logits, labels)
    loss = task
    dist_val = 0.0
    if hp.distill_weight:
        dist = distill_loss(logits, teacher_logits)
        dist_val = dist.item()
        loss = dc.add(task, dc.scale(dist, hp.distill_weight))
    loss_val = loss.item()
    if not math.isfinite(loss_val) or loss_val > 1e6:
        raise DivergenceError(f"non-finite or exploding loss {loss_val} at iteration {state.iteration}",
                              _diagnostics(state))
    dc.backward(loss)
    gate_grad_task = logits_leaf.grad.astype(float) if learn_gates and logits_leaf.grad is not None else 0.0

    # (1) proximal SGD on W
    bar = {}
    for k, w in arrays.items():
        g = params[k].grad
        if g is None:
            g = np.zeros_like(w)
        buf = state.momentum.get(k)
        buf = g.copy() if buf is None else hp.momentum * buf + g
        state.momentum[k] = buf
        bar[k] = w - hp.lr_weights * buf
    w_bar = ViTWeights.from_named(cfg, bar, state.weights.structure())
    if hp.prune and hp.lr_weights > 0:
        state.weights = prox_weights(w_bar, state.primal, state.dual, hp.lr_weights)
    else:
        state.weights = w_bar
    norms = block_norms(state.weights)

    primal, dual = state.primal, state.dual
    keep_t = state.keep_prob(hp)
    if hp.prune and not settling:
        # (2) s: sparsity proxy at W^{t+1} plus z * dR/ds at (s^t, r^t, gt^t)
        s_h, s_m = Tensor(primal.s_heads.copy()), Tensor(primal.s_hidden.copy())
        obj = _sparsity_tensor(norms, dual, s_h, s_m, primal.r) + \
            flops_total_tensor(cfg, s_h, s_m, primal.r, keep_t) * (dual.z / dense)
        dc.backward(obj)
        primal.s_heads = primal.s_heads - hp.lr_heads * s_h.grad
        primal.s_hidden = primal.s_hidden - hp.lr_hidden * s_m.grad
        primal.clamp(cfg)
        # (3) r, with s^{t+1}
        r = Tensor(primal.r.copy())
        obj = _sparsity_tensor(norms, dual, primal.s_heads, primal.s_hidden, r) + \
            flops_total_tensor(cfg, primal.s_heads, primal.s_hidden, r, keep_t) * (dual.z / dense)
        dc.backward(obj)
        primal.r = primal.r - hp.lr_dims * r.grad
        primal.clamp(cfg)

    # (4) gate logits
    if learn_gates:
        gl = Tensor(state.gates.logits.copy())
        res = flops_total_tensor(cfg, primal.s_heads, primal.s_hidden, primal.r, keep_probability_tensor(gl))
        dc.backward(dc.scale(res, dual.z / dense))
        state.gates.logits = state.gates.logits - hp.lr_gates * (gate_grad_task + gl.grad)

    # (5) z ascent on the normalised budget violation
    flops_new = flops_total(cfg, primal, keep_prob=state.keep_prob(hp))
    violation = flops_new / dense - budget
    dual.z = max(0.0, dual.z + z_rate_at(state, hp) * violation)

    # (6), (7) y and p ascent with W^{t+1}, s^{t+1}, r^{t+1}
    if hp.prune:
        with dc.no_grad():
            least_h = least_sqnorm_op(norms["heads"], Tensor(primal.s_heads)).values
            least_m = least_sqnorm_op(norms["hidden"], Tensor(primal.s_hidden)).values
            least_d = least_sqnorm_op(norms["dims"], Tensor(primal.r)).values
        dual.y_heads = dual.y_heads + hp.lr_y * least_h
        dual.y_hidden = dual.y_hidden + hp.lr_y * least_m
        dual.p = dual.p + hp.lr_p * least_d
        if settling:
            # structure is fixed: push the multipliers of still-nonzero dropped groups towards infinity
            dual.y_heads = np.where(least_h > 0, np.maximum(dual.y_heads, 1.0) * hp.settle_growth, dual.y_heads)
            dual.y_hidden = np.where(least_m > 0, np.maximum(dual.y_hidden, 1.0) * hp.settle_growth, dual.y_hidden)
            dual.p = np.where(least_d > 0, np.maximum(dual.p, 1.0) * hp.settle_growth, dual.p)

    state.iteration += 1
    return {
        "iteration": state.iteration,
        "loss": loss_val,
        "task": task.item(),
        "distill": dist_val,
        "tau": tau,
        "flops": flops_new,
        "flops_frac": flops_new / dense,
        "z": dual.z,
        "y_heads_mean": float(dual.y_heads.mean()),
        "y_hidden_mean": float(dual.y_hidden.mean()),
        "p_mean": float(dual.p.mean()),
        "gate_keep": state.keep_prob(hp).tolist(),
        "s_heads": primal.s_heads.tolist(),
        "s_hidden": primal.s_hidden.tolist(),
        "r_mean": primal.r.mean(axis=1).tolist(),
    }


def teacher_logits_for(teacher: ViTWeights, images: np.ndarray) -> np.ndarray:
    return predict(images, teacher)


def run_compression(state: OptimState, images: np.ndarray, labels: np.ndarray, hp: HyperParams,
                    trace_file=None) -> tuple[OptimState, list[dict]]:
    """Iterate ``primal_dual_step`` over shuffled minibatches for ``hp.epochs``."""
    hp.validate()
    rng = np.random.default_rng(hp.seed)
    teacher = teacher_logits_for(state.teacher, images)
    steps_per_epoch = -(-len(labels) // hp.batch_size)
    state.total_iterations = max(1, hp.epochs * steps_per_epoch)
    trace: list[dict] = []
    for epoch in range(hp.epochs):
        for idx in minibatches(len(labels), hp.batch_size, rng):
            try:
                rec = primal_dual_step(state, images[idx], labels[idx], teacher[idx], hp, rng)
            except DivergenceError as exc:
                exc.trace = trace
                raise
            rec["epoch"] = epoch
            trace.append(rec)
            if trace_file is not None:
                trace_file.write(json.dumps(rec) + "\n")
        log.info("compress epoch %d: loss %.4f flops %.4f z %.4g", epoch, trace[-1]["loss"],
                 trace[-1]["flops_frac"], trace[-1]["z"])
    return state, trace
