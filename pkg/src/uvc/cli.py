"""Command-line pipeline: train-dense -> compress -> extract -> finetune -> eval/report.

Exit codes: 0 success, 2 validation error (bad config, paths, checkpoints,
infeasible budget), 3 numerical divergence.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from .checkpoint import CheckpointError, load_weights, save_weights
from .extraction import FinetuneParams, build_plan, extract, finetune
from .gating import GateVars
from .harness import DataError, Dataset, DenseParams, evaluate, load_image_folder, synth_dataset, train_dense
from .optimizer import DivergenceError, HyperParams, OptimState, run_compression, teacher_logits_for
from .plan import CompressionPlan, InvalidPlanError
from .resources import breakdown, dense_flops, head_flops, plan_breakdown, plan_flops, stem_flops
from .sparsity import DualVars, PrimalVars
from .vit import ConfigError, ViTConfig, ViTWeights, plan_masks

log = logging.getLogger("uvc")

EXIT_OK, EXIT_INVALID, EXIT_DIVERGED = 0, 2, 3


class ValidationError(ValueError):
    pass


@dataclass
class DataSource:
    source: str = "synthetic"     # "synthetic" or "folder"
    path: str | None = None
    num_classes: int = 10
    per_class: int = 200
    noise: float = 0.08
    seed: int = 0


@dataclass
class RunConfig:
    model: ViTConfig = field(default_factory=ViTConfig)
    data: DataSource = field(default_factory=DataSource)
    dense: DenseParams = field(default_factory=DenseParams)
    compress: HyperParams = field(default_factory=HyperParams)
    finetune: FinetuneParams = field(default_factory=FinetuneParams)
    budget: float = 0.5           # fraction of dense FLOPs, or absolute FLOPs when > 1
    out: str = "run"
    seed: int = 0
    precision: int = 32

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "data": asdict(self.data),
            "dense": asdict(self.dense),
            "compress": self.compress.to_dict(),
            "finetune": asdict(self.finetune),
            "budget": self.budget,
            "out": self.out,
            "seed": self.seed,
            "precision": self.precision,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d or {})
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown config sections: {sorted(unknown)}")
        try:
            cfg = cls(
                model=ViTConfig.from_dict(d.pop("model", {}) or {}),
                data=_build(DataSource, d.pop("data", {})),
                dense=_build(DenseParams, d.pop("dense", {})),
                compress=HyperParams.from_dict(d.pop("compress", {}) or {}),
                finetune=_build(FinetuneParams, d.pop("finetune", {})),
                **d,
            )
        except TypeError as exc:
            raise ValidationError(str(exc)) from exc
        return cfg

    @property
    def dtype(self):
        return np.float64 if self.precision == 64 else np.float32

    def budget_fraction(self) -> float:
        """Budget as a fraction of dense FLOPs; absolute budgets are converted."""
        dense = dense_flops(self.model)
        frac = self.budget / dense if self.budget > 1 else self.budget
        floor = (stem_flops(self.model) + head_flops(self.model)) / dense
        if not 0 < frac <= 1:
            raise ValidationError(f"budget {self.budget} is not in (0, 1] of dense FLOPs ({dense:.6g})")
        if frac <= floor:
            raise ValidationError(
                f"budget {frac:.4f} of dense is infeasible: stem + head alone cost {floor:.4f}")
        return frac

    def validate(self) -> None:
        if self.precision not in (32, 64):
            raise ValidationError("precision must be 32 or 64")
        if self.data.source not in ("synthetic", "folder"):
            raise ValidationError(f"unknown data source {self.data.source!r}")
        if self.data.source == "folder" and (self.data.path is None or not Path(self.data.path).is_dir()):
            raise ValidationError(f"data folder {self.data.path!r} does not exist")
        if self.data.source == "synthetic" and self.data.num_classes != self.model.num_classes:
            raise ValidationError("data.num_classes must match model.num_classes")
        self.budget_fraction()
        try:
            self.compress.validate()
        except ValueError as exc:
            raise ValidationError(str(exc)) from exc


def _build(cls, d):
    d = dict(d or {})
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ValidationError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**d)


def load_config(path: str | None, overrides: argparse.Namespace | None = None) -> RunConfig:
    raw = {}
    if path:
        p = Path(path)
        if not p.is_file():
            raise ValidationError(f"config file {path} not found")
        raw = yaml.safe_load(p.read_text()) or {}
        if not isinstance(raw, dict):
            raise ValidationError("config file must hold a mapping")
    cfg = RunConfig.from_dict(raw)
    if overrides is not None:
        if getattr(overrides, "seed", None) is not None:
            cfg.seed = overrides.seed
        if getattr(overrides, "budget", None) is not None:
            cfg.budget = overrides.budget
        if getattr(overrides, "out", None) is not None:
            cfg.out = overrides.out
        if getattr(overrides, "precision", None) is not None:
            cfg.precision = overrides.precision
    # one seed drives every stochastic stage
    cfg.dense.seed = cfg.compress.seed = cfg.finetune.seed = cfg.seed
    cfg.validate()
    return cfg


def load_data(cfg: RunConfig) -> Dataset:
    if cfg.data.source == "folder":
        data = load_image_folder(cfg.data.path, cfg.model.image_size, seed=cfg.data.seed)
        if data.num_classes != cfg.model.num_classes:
            raise ValidationError(f"folder has {data.num_classes} classes, model expects {cfg.model.num_classes}")
        return data
    return synth_dataset(cfg.data.num_classes, cfg.data.per_class, cfg.model.image_size, cfg.data.seed,
                         cfg.data.noise)


def _cast(data: Dataset, dtype) -> Dataset:
    return Dataset(data.images.astype(dtype), data.labels, data.train_idx, data.val_idx, data.num_classes)


# ------------------------------------------------------------ soft-state files

def save_state(path: Path, state: OptimState, hp: HyperParams) -> None:
    extra = {
        "s_heads": state.primal.s_heads, "s_hidden": state.primal.s_hidden, "r": state.primal.r,
        "y_heads": state.dual.y_heads, "y_hidden": state.dual.y_hidden, "p": state.dual.p,
        "z": np.array([state.dual.z]), "gate_logits": state.gates.logits,
    }
    extra.update({f"momentum.{k}": v for k, v in state.momentum.items()})
    extra.update({f"teacher.{k}": v for k, v in state.teacher.named_arrays().items()})
    meta = {
        "hyperparams": hp.to_dict(),
        "iteration": state.iteration,
        "total_iterations": state.total_iterations,
        "teacher_structure": state.teacher.structure(),
    }
    save_weights(path, state.weights, kind="soft-state", meta=meta, extra=extra)


def load_state(path: str | Path) -> tuple[OptimState, HyperParams]:
    weights, meta, extra = load_weights(path, expect_kind="soft-state")
    cfg = weights.config
    teacher = ViTWeights.from_named(cfg, {k[8:]: v for k, v in extra.items() if k.startswith("teacher.")},
                                    meta["teacher_structure"])
    state = OptimState(
        weights=weights,
        primal=PrimalVars(extra["s_heads"].astype(float), extra["s_hidden"].astype(float), extra["r"].astype(float)),
        dual=DualVars(extra["y_heads"].astype(float), extra["y_hidden"].astype(float), extra["p"].astype(float),
                      float(extra["z"][0])),
        gates=GateVars(extra["gate_logits"].astype(float)),
        teacher=teacher,
        momentum={k[9:]: v for k, v in extra.items() if k.startswith("momentum.")},
        iteration=int(meta["iteration"]),
        total_iterations=int(meta["total_iterations"]),
    )
    return state, HyperParams.from_dict(meta["hyperparams"])


# ---------------------------------------------------------------- commands

def cmd_train_dense(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    data = _cast(load_data(cfg), cfg.dtype)
    weights, history = train_dense(cfg.model, data, cfg.dense, dtype=cfg.dtype)
    metrics = evaluate(weights, *data.split("val"))
    path = out / "dense.ckpt"
    save_weights(path, weights, kind="dense", meta={"val": metrics, "data": asdict(cfg.data)})
    (out / "dense_history.json").write_text(json.dumps(history, indent=1) + "\n")
    log.info("dense model: val top1 %.4f -> %s", metrics["top1"], path)
    return path


def cmd_compress(cfg: RunConfig, dense_path: str | Path) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    weights, _, _ = load_weights(dense_path, expect_kind="dense")
    _check_model(cfg, weights)
    weights = weights.astype(cfg.dtype)
    hp = HyperParams.from_dict({**cfg.compress.to_dict(), "budget": cfg.budget_fraction()})
    x, y = _cast(load_data(cfg), cfg.dtype).split("train")
    state = OptimState.initial(weights, hp)
    with open(out / "trace.jsonl", "w") as fh:
        try:
            state, trace = run_compression(state, x, y, hp, trace_file=fh)
        except DivergenceError as exc:
            (out / "divergence.json").write_text(json.dumps(exc.diagnostics, indent=1) + "\n")
            raise
    path = out / "state.ckpt"
    save_state(path, state, hp)
    log.info("compression done: expected FLOPs %.4f of dense, z %.4g", trace[-1]["flops_frac"] if trace else 1.0,
             state.dual.z)
    return path


def cmd_extract(cfg: RunConfig, state_path: str | Path) -> tuple[Path, Path]:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    state, hp = load_state(state_path)
    plan = build_plan(state, hp)
    small = extract(state.weights, plan)
    plan_path = out / "plan.json"
    plan_path.write_text(plan.to_json())
    path = out / "compressed.ckpt"
    save_weights(path, small, kind="compressed", meta={"plan": json.loads(plan.to_json())})
    log.info("plan FLOPs %.4f of dense (budget %.4f)", plan.flops / plan.dense_flops, hp.budget)
    return plan_path, path


def cmd_finetune(cfg: RunConfig, model_path: str | Path, teacher_path: str | Path | None = None) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    weights, meta, _ = load_weights(model_path, expect_kind="compressed")
    _check_model(cfg, weights)
    weights = weights.astype(cfg.dtype)
    data = _cast(load_data(cfg), cfg.dtype)
    x, y = data.split("train")
    teacher_logits = None
    if teacher_path is not None and cfg.finetune.distill_weight:
        teacher, _, _ = load_weights(teacher_path, expect_kind="dense")
        teacher_logits = teacher_logits_for(teacher.astype(cfg.dtype), x)
    tuned, history = finetune(weights, (x, y), data.split("val"), cfg.finetune, teacher_logits)
    metrics = evaluate(tuned, *data.split("val"))
    path = out / "final.ckpt"
    save_weights(path, tuned, kind="compressed",
                 meta={**meta, "val": metrics, "data": asdict(cfg.data)})
    (out / "finetune_history.json").write_text(json.dumps(history, indent=1) + "\n")
    log.info("finetuned: val top1 %.4f -> %s", metrics["top1"], path)
    return path


def cmd_eval(cfg: RunConfig, model_path: str | Path) -> dict:
    weights, meta, _ = load_weights(model_path)
    _check_model(cfg, weights)
    data = load_data(cfg)
    weights = weights.astype(cfg.dtype)
    metrics = evaluate(weights, *_cast(data, cfg.dtype).split("val"))
    result = {"model": str(model_path), "val": metrics, "flops": _model_flops(weights),
              "dense_flops": dense_flops(weights.config)}
    if "val" in meta:
        result["recorded_val"] = meta["val"]
        result["matches_recorded"] = meta["val"] == metrics
    return result


def cmd_report(cfg: RunConfig, path: str | Path) -> Path:
    """FLOPs breakdown, kept-head/dim tables and skip mask as CSV plus a text summary."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    path = Path(path)
    soft = None
    if path.suffix == ".json":
        plan = CompressionPlan.from_json(path.read_text())
        config = cfg.model
    else:
        from .checkpoint import load_container

        header, _ = load_container(path)
        kind = header.get("kind")
        if kind == "soft-state":
            state, hp = load_state(path)
            config = state.config
            plan = build_plan(state, hp)
            soft = breakdown(config, state.primal, state.keep_prob(hp))
        elif kind == "dense":
            weights, _, _ = load_weights(path)
            config = weights.config
            plan = CompressionPlan.empty(config.num_blocks)
        else:
            raise ValidationError(f"cannot report on a '{kind}' checkpoint; pass its plan.json instead")
    hard = plan_breakdown(config, plan)
    _write_csv(out / "flops.csv", hard.rows())
    if soft is not None:
        _write_csv(out / "flops_soft.csv", soft.rows())
    H, dh = config.num_heads, config.head_dim
    head_rows, dim_rows = [], []
    for l, bp in enumerate(plan.blocks):
        kept = [h for h in range(H) if h not in bp.dropped_heads and len(bp.dropped_dims.get(h, ())) < dh]
        head_rows.append({"block": l, "skip": int(bp.skip), "kept_heads": 0 if bp.skip else len(kept),
                          "kept_hidden": 0 if bp.skip else config.hidden - len(bp.dropped_hidden)})
        for h in range(H):
            k = 0 if (bp.skip or h not in kept) else dh - len(bp.dropped_dims.get(h, ()))
            dim_rows.append({"block": l, "head": h, "kept_dims": k})
    _write_csv(out / "kept_heads.csv", head_rows)
    _write_csv(out / "kept_dims.csv", dim_rows)
    _write_csv(out / "skip_mask.csv", [{"block": l, "skip": int(b.skip)} for l, b in enumerate(plan.blocks)])
    dense = dense_flops(config)
    summary = {
        "source": str(path),
        "dense_flops": dense,
        "plan_flops": hard.total,
        "plan_fraction": hard.total / dense,
        "skip_mask": [bool(b.skip) for b in plan.blocks],
        "blocks": [
            {**row, "kept_dims_histogram": _histogram([r["kept_dims"] for r in dim_rows if r["block"] == row["block"]
                                                      and r["kept_dims"] > 0], dh)}
            for row in head_rows
        ],
    }
    if soft is not None:
        summary["expected_flops"] = soft.total
        summary["expected_fraction"] = soft.total / dense
    if plan.budget is not None:
        summary["budget_flops"] = plan.budget
    text = yaml.safe_dump(summary, sort_keys=False)
    (out / "summary.yaml").write_text(text)
    return out / "summary.yaml"


def _histogram(values: list[int], dh: int) -> dict[int, int]:
    counts = np.bincount(np.asarray(values, dtype=int), minlength=dh + 1)
    return {int(k): int(c) for k, c in enumerate(counts) if c}


def _write_csv(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        if not rows:
            return
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def _model_flops(weights: ViTWeights) -> float:
    from .resources import count_model_flops

    return count_model_flops(weights)


def _check_model(cfg: RunConfig, weights: ViTWeights) -> None:
    if weights.config != cfg.model:
        raise ValidationError(f"checkpoint model config {weights.config} differs from the run config {cfg.model}")


def run_pipeline(cfg: RunConfig) -> dict:
    """Every stage in sequence into ``cfg.out``; returns the headline numbers."""
    out = Path(cfg.out)
    dense = cmd_train_dense(cfg)
    state = cmd_compress(cfg, dense)
    plan_path, small = cmd_extract(cfg, state)
    final = cmd_finetune(cfg, small, dense)
    cmd_report(cfg, state)
    summary = {
        "dense": cmd_eval(cfg, dense)["val"],
        "extracted": cmd_eval(cfg, small)["val"],
        "final": cmd_eval(cfg, final)["val"],
        "plan": json.loads(plan_path.read_text()),
    }
    (out / "pipeline.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return summary


# ---------------------------------------------------------------- argparse

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run config (defaults: see print-defaults)")
    common.add_argument("--seed", type=int)
    common.add_argument("--budget", type=float, help="fraction of dense FLOPs, or absolute FLOPs if > 1")
    common.add_argument("--out", help="output directory")
    common.add_argument("--precision", type=int, choices=(32, 64))
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="uvc", description="Joint pruning, block skipping and distillation "
                                                             "for a small vision transformer.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("print-defaults", help="dump the default config as YAML")
    sub.add_parser("train-dense", parents=[common], help="train the uncompressed teacher")
    p = sub.add_parser("compress", parents=[common], help="primal-dual compression run")
    p.add_argument("--dense", required=True, help="dense checkpoint")
    p = sub.add_parser("extract", parents=[common], help="build the plan and shrink the model")
    p.add_argument("--state", required=True, help="soft-state checkpoint from compress")
    p = sub.add_parser("finetune", parents=[common], help="post-training of the extracted model")
    p.add_argument("--model", required=True, help="compressed checkpoint")
    p.add_argument("--teacher", help="dense checkpoint for distillation")
    p = sub.add_parser("eval", parents=[common], help="validation metrics of a checkpoint")
    p.add_argument("--model", required=True)
    p = sub.add_parser("report", parents=[common], help="FLOPs / structure report of a state, dense model or plan")
    p.add_argument("--input", required=True, help="soft-state or dense checkpoint, or plan.json")
    sub.add_parser("pipeline", parents=[common], help="run every stage end to end")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "print-defaults":
        sys.stdout.write(yaml.safe_dump(RunConfig().to_dict(), sort_keys=False))
        return EXIT_OK
    try:
        cfg = load_config(args.config, args)
        if args.command == "train-dense":
            result = {"checkpoint": str(cmd_train_dense(cfg))}
        elif args.command == "compress":
            result = {"state": str(cmd_compress(cfg, _existing(args.dense)))}
        elif args.command == "extract":
            plan, model = cmd_extract(cfg, _existing(args.state))
            result = {"plan": str(plan), "checkpoint": str(model)}
        elif args.command == "finetune":
            teacher = _existing(args.teacher) if args.teacher else None
            result = {"checkpoint": str(cmd_finetune(cfg, _existing(args.model), teacher))}
        elif args.command == "eval":
            result = cmd_eval(cfg, _existing(args.model))
        elif args.command == "report":
            result = {"summary": str(cmd_report(cfg, _existing(args.input)))}
        else:
            result = run_pipeline(cfg)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ValidationError, ConfigError, CheckpointError, DataError, InvalidPlanError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    print(json.dumps(result, indent=1, sort_keys=True))
    return EXIT_OK


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"{path} does not exist")
    return p


if __name__ == "__main__":
    sys.exit(main())
