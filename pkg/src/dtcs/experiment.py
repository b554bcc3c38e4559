"""Experiment configuration and execution of single runs on disk.

A config is a TOML file with ``[data]``, ``[train]``, ``[experiment]`` and
``[diagnostics]`` tables; command-line flags are applied on top of it.
"""

from __future__ import annotations

import copy
import csv
import dataclasses
import json
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import numpy as np
import tomli
import tomli_w

from dtcs import diagnostics
from dtcs.data import (Domain, MultiDomainDataset, Split, SplitPlan, SyntheticSpec, generate_synthetic,
                       ingest_csv, leave_one_out, split)
from dtcs.nn import SgdOptimizer, save_checkpoint
from dtcs.prophets import ProphetSpec, pretrain_experts, save_experts
from dtcs.scheduler import DESK_LR, RunRecord, TrainPlan, TrainingFailure, run_training

WORKERS_ENV = "DTCS_WORKERS"

DEFAULT_CONFIG: dict[str, Any] = {
    "data": {"source": "synthetic", "preset": "fig1-bench", "csv_path": "", "train_fraction": 0.8},
    "train": {
        "method": "dtcs", "prophet": "me", "alpha": 0.1, "tau": 2.0, "momentum": 0.9, "dcb": True,
        "iterations": 3000, "epoch_length": 50, "batch_size": 32, "hidden": [64, 64],
        "lr": DESK_LR, "weight_decay": 5e-4, "lr_milestones": [0.6, 0.8], "lr_decay": 0.1,
        "momentum_milestones": [0.6, 0.8], "momentum_decay": 0.1,
        "expert_epochs": 200, "mc_weight": 1.0, "kl_order": "target_first",
    },
    "experiment": {"seeds": [0], "sweep_targets": False, "target_domain": 0, "out": "runs"},
    "diagnostics": {"conflict_every": 10, "conflict_loss": "ce", "converged_fraction": 0.6},
}

# documented ranges; values outside need [experiment] allow_out_of_range = true
RANGES = {"alpha": (0.0, 1.0), "tau": (0.05, 20.0), "momentum": (0.0, 1.0), "lr": (1e-6, 1.0)}


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path: str | Path | None) -> dict:
    raw: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config: file {p} does not exist")
        try:
            raw = tomli.loads(p.read_text())
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"config: {p}: {exc}") from None
        unknown = set(raw) - set(DEFAULT_CONFIG)
        if unknown:
            raise ConfigError(f"config: unknown table(s) {sorted(unknown)}")
        for table, values in raw.items():
            if not isinstance(values, dict):
                raise ConfigError(f"config: [{table}] must be a table")
            allowed = set(DEFAULT_CONFIG[table]) | ({"synthetic"} if table == "data" else set()) | (
                {"allow_out_of_range", "grid"} if table == "experiment" else set())
            bad = set(values) - allowed
            if bad:
                raise ConfigError(f"config: unknown field(s) {sorted(f'{table}.{b}' for b in bad)}")
        if raw.get("data", {}).get("csv_path"):
            raw["data"]["csv_path"] = str((p.parent / raw["data"]["csv_path"]).resolve())
    return _merge(DEFAULT_CONFIG, raw)


def apply_overrides(config: dict, overrides: dict[str, Any]) -> dict:
    """Flag values win over file values; ``None`` means the flag was not given."""
    config = copy.deepcopy(config)
    for dotted, value in overrides.items():
        if value is None:
            continue
        table, key = dotted.split(".")
        config[table][key] = value
    return config


@dataclass
class ExperimentConfig:
    raw: dict
    plan: TrainPlan
    seeds: list[int]
    targets: list[int] | None  # None: every domain in turn
    out: Path
    converged_fraction: float = 0.6
    label: str = ""

    def resolved(self, seed: int, target: int) -> dict:
        out = copy.deepcopy(self.raw)
        out["experiment"]["seeds"] = [seed]
        out["experiment"]["target_domain"] = target
        out["experiment"]["sweep_targets"] = False
        out["experiment"]["label"] = self.label
        return out


def _num(table: dict, key: str, name: str, kind=float):
    try:
        return kind(table[key])
    except (TypeError, ValueError):
        raise ConfigError(f"config: {name} must be {kind.__name__}, got {table[key]!r}") from None


def build_experiment(config: dict, label: str | None = None) -> ExperimentConfig:
    """Validate a merged config dict into an :class:`ExperimentConfig`."""
    t, e, dg, d = config["train"], config["experiment"], config["diagnostics"], config["data"]
    method = str(t["method"]).lower().replace("-", "_")
    prophet = str(t["prophet"]).upper() if t.get("prophet") else None
    try:
        optimizer = SgdOptimizer(lr=_num(t, "lr", "train.lr"), weight_decay=_num(t, "weight_decay", "train.weight_decay"),
                                 milestones=tuple(t["lr_milestones"]), decay_factor=_num(t, "lr_decay", "train.lr_decay"))
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"config: train optimizer: {exc}") from None
    if not e.get("allow_out_of_range", False):
        for key, (lo, hi) in RANGES.items():
            value = _num(t, key, f"train.{key}")
            if not lo <= value <= hi:
                raise ConfigError(f"config: train.{key}={value} outside documented range [{lo}, {hi}] "
                                  "(set experiment.allow_out_of_range = true to override)")
    plan = TrainPlan(
        method=method, prophet=prophet if method == "dtcs" else None,
        alpha=_num(t, "alpha", "train.alpha"), tau=_num(t, "tau", "train.tau"),
        momentum=_num(t, "momentum", "train.momentum"), dcb=bool(t["dcb"]),
        iterations=_num(t, "iterations", "train.iterations", int),
        epoch_length=_num(t, "epoch_length", "train.epoch_length", int),
        batch_size=_num(t, "batch_size", "train.batch_size", int),
        hidden=tuple(int(h) for h in t["hidden"]), optimizer=optimizer,
        momentum_milestones=tuple(t["momentum_milestones"]), momentum_decay=_num(t, "momentum_decay", "train.momentum_decay"),
        kl_order=str(t["kl_order"]), expert_epochs=_num(t, "expert_epochs", "train.expert_epochs", int),
        mc_weight=_num(t, "mc_weight", "train.mc_weight"),
        conflict_every=_num(dg, "conflict_every", "diagnostics.conflict_every", int),
        conflict_loss=str(dg["conflict_loss"]),
    )
    try:
        plan.validate()
    except ValueError as exc:
        raise ConfigError(f"config: train: {exc}") from None
    seeds = e["seeds"]
    if isinstance(seeds, int):
        seeds = [seeds]
    if not seeds:
        raise ConfigError("config: experiment.seeds must be nonempty")
    seeds = [int(s) for s in seeds]
    if d["source"] == "csv":
        if not d.get("csv_path") or not Path(d["csv_path"]).is_file():
            raise ConfigError(f"config: data.csv_path {d.get('csv_path')!r} does not exist")
    elif d["source"] != "synthetic":
        raise ConfigError(f"config: data.source must be 'synthetic' or 'csv', got {d['source']!r}")
    if not 0.0 < float(d["train_fraction"]) < 1.0:
        raise ConfigError("config: data.train_fraction must lie in (0, 1)")
    fraction = float(dg["converged_fraction"])
    if not 0.0 <= fraction < 1.0:
        raise ConfigError("config: diagnostics.converged_fraction must lie in [0, 1)")
    targets = None if e["sweep_targets"] else [int(e["target_domain"])]
    return ExperimentConfig(config, plan, seeds, targets, Path(e["out"]), fraction,
                            label if label is not None else default_label(plan))


def default_label(plan: TrainPlan) -> str:
    if plan.method != "dtcs":
        return plan.method.replace("_", "-")
    parts = ["dtcs", plan.prophet_kind.lower()]
    if not plan.dcb:
        parts.append("nodcb")
    if plan.alpha == 1.0:
        parts.append("a1")
    return "-".join(parts)


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


def synthetic_spec(config: dict, seed: int) -> SyntheticSpec:
    d = config["data"]
    if d.get("preset", "fig1-bench") != "fig1-bench":
        raise ConfigError(f"config: unknown data.preset {d['preset']!r}")
    spec = SyntheticSpec.fig1_bench(seed)
    for key, value in d.get("synthetic", {}).items():
        if not hasattr(spec, key):
            raise ConfigError(f"config: unknown field data.synthetic.{key}")
        setattr(spec, key, value)
    try:
        spec.validate()
    except ValueError as exc:
        raise ConfigError(f"config: data.synthetic: {exc}") from None
    return spec


def load_dataset(config: dict, seed: int) -> MultiDomainDataset:
    d = config["data"]
    if d["source"] == "csv":
        return ingest_csv(d["csv_path"])
    return generate_synthetic(synthetic_spec(config, seed))


def prepare(config: dict, seed: int, target: int) -> tuple[Split, Domain]:
    dataset = load_dataset(config, seed)
    sources, target_domain = leave_one_out(dataset, target)
    return split(sources, SplitPlan(float(config["data"]["train_fraction"]), seed)), target_domain


def domain_ids(config: dict, seed: int) -> list[int]:
    return [d.id for d in load_dataset(config, seed).domains]


# ---------------------------------------------------------------------------
# running
# ---------------------------------------------------------------------------


@dataclass
class RunResult:
    run_id: str
    directory: Path
    summary: dict
    ok: bool = True
    error: str = ""


@dataclass(frozen=True)
class RunTask:
    experiment: ExperimentConfig
    seed: int
    target: int
    directory: Path
    prophet: ProphetSpec | None = field(default=None, compare=False)


def run_id(label: str, target: int, seed: int) -> str:
    return f"{label}-t{target}-s{seed}"


def summarize(record: RunRecord, run_id_: str, plan_info: dict, seed: int, target: int,
              converged_fraction: float) -> tuple[dict, dict]:
    """Summary row and diagnostics computed purely from the record."""
    final = record.final_eval() or {}
    n = len(record.iterations)
    start = int(round(converged_fraction * n))
    diag: dict[str, Any] = {"run_id": run_id_, "iterations": n, "converged_start": start, "final_eval": final}
    row = dict(run_id=run_id_, **plan_info, seed=seed, target=target,
               target_acc=final.get("target_acc", float("nan")),
               pooled_val_acc=final.get("pooled_val_acc", float("nan")),
               total_loss_std=float("nan"), neg_frac=float("nan"))
    if n - start >= 2:
        dstd, tstd = diagnostics.converged_loss_std(record.domain_losses(), record.total_losses(), start)
        diag["converged_loss_std"] = {"domains": [float(v) for v in dstd], "total": tstd}
        row["total_loss_std"] = tstd
    conflict = [r["conflict"] for r in record.conflict_rows() if r["iter"] >= start]
    if conflict:
        diag["conflict_after_convergence"] = {
            k: float(np.mean([c[k] for c in conflict])) for k in ("neg_frac", "mean_cos", "sign_agree")}
        row["neg_frac"] = diag["conflict_after_convergence"]["neg_frac"]
    return row, diag


def plan_info(plan: TrainPlan, label: str) -> dict:
    return {"label": label, "method": plan.method, "prophet": plan.prophet_kind or "",
            "dcb": plan.method == "dtcs" and plan.dcb, "alpha": plan.alpha, "tau": plan.tau,
            "momentum": plan.momentum, "lr": plan.optimizer.lr}


def write_jsonl(record: RunRecord, path: Path) -> None:
    with open(path, "w") as fh:
        for obj in record.lines():
            fh.write(json.dumps(obj) + "\n")


def read_jsonl(path: Path) -> RunRecord:
    lines = []
    with open(path) as fh:
        for lineno, text in enumerate(fh, 1):
            if text.strip():
                try:
                    lines.append(json.loads(text))
                except json.JSONDecodeError as exc:
                    raise ValueError(f"{path}:{lineno}: {exc}") from None
    return RunRecord.from_lines(lines)


def write_csv(rows: Sequence[dict], path: Path) -> None:
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def execute(task: RunTask) -> RunResult:
    """Train one (seed, target) run and persist its artifacts."""
    exp, seed, target = task.experiment, task.seed, task.target
    rid = run_id(exp.label, target, seed)
    out = task.directory / rid
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(tomli_w.dumps(exp.resolved(seed, target)))
    info = plan_info(exp.plan, exp.label)
    data, target_domain = prepare(exp.raw, seed, target)
    prophet = task.prophet
    if prophet is None and exp.plan.method == "dtcs" and exp.plan.prophet_kind in ("ME", "SE") \
            and exp.plan.alpha < 1.0:
        prophet = build_experts(exp.plan, data, seed)
    if prophet is not None and prophet.kind in ("ME", "SE"):
        save_experts(prophet, out)
    try:
        model, record = run_training(exp.plan, data, seed, target_domain, prophet=prophet)
    except TrainingFailure as exc:
        write_jsonl(exc.record, out / "record.jsonl")
        (out / "failure.json").write_text(json.dumps({"run_id": rid, "iteration": exc.iteration,
                                                      "error": str(exc)}, indent=2))
        return RunResult(rid, out, {}, ok=False, error=str(exc))
    write_jsonl(record, out / "record.jsonl")
    save_checkpoint(model, out / "model.ckpt")
    row, diag = summarize(record, rid, info, seed, target, exp.converged_fraction)
    (out / "diag.json").write_text(json.dumps(diag, indent=2))
    write_csv([row], out / "summary.csv")
    return RunResult(rid, out, row)


def execute_group(tasks: Sequence[RunTask]) -> list[RunResult]:
    """Run tasks that share (seed, target) in order, pretraining shared experts once."""
    shared: dict[tuple, ProphetSpec] = {}
    out = []
    for task in tasks:
        plan = task.experiment.plan
        prophet = task.prophet
        if prophet is None and plan.method == "dtcs" and plan.prophet_kind in ("ME", "SE") and plan.alpha < 1.0:
            key = (plan.prophet_kind, plan.hidden, plan.expert_epochs, plan.batch_size,
                   repr(plan.optimizer), repr(plan.expert_optimizer), json.dumps(task.experiment.raw["data"], sort_keys=True))
            if key not in shared:
                data, _ = prepare(task.experiment.raw, task.seed, task.target)
                shared[key] = build_experts(plan, data, task.seed)
            prophet = shared[key]
        try:
            out.append(execute(dataclasses.replace(task, prophet=prophet)))
        except ValueError as exc:
            rid = run_id(task.experiment.label, task.target, task.seed)
            out.append(RunResult(rid, task.directory / rid, {}, ok=False, error=str(exc)))
    return out


def build_experts(plan: TrainPlan, data: Split, seed: int) -> ProphetSpec:
    """Pretrain the frozen experts a run would build for itself (shareable across runs)."""
    dims = (data.train[0].x.shape[1], *plan.hidden, 1 + int(max(d.y.max() for d in data.train)))
    opt = plan.expert_optimizer or plan.optimizer
    return pretrain_experts(plan.prophet_kind, data.train, dims, opt, plan.expert_epochs, plan.batch_size, seed)


def workers() -> int:
    value = os.environ.get(WORKERS_ENV, "1")
    try:
        return max(1, int(value))
    except ValueError:
        warnings.warn(f"ignoring non-integer {WORKERS_ENV}={value!r}")
        return 1


def parallel_map(fn: Callable, items: Iterable, max_workers: int | None = None) -> list:
    """Order-preserving map; runs in worker processes when more than one worker is allowed."""
    items = list(items)
    n = workers() if max_workers is None else max_workers
    if n <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=min(n, len(items))) as pool:
        return list(pool.map(fn, items))


def tasks_for(exp: ExperimentConfig, directory: Path | None = None) -> list[RunTask]:
    directory = exp.out if directory is None else directory
    out = []
    for seed in exp.seeds:
        targets = exp.targets if exp.targets is not None else domain_ids(exp.raw, seed)
        for target in targets:
            out.append(RunTask(exp, seed, target, directory))
    return out


def with_label(exp: ExperimentConfig, label: str, **train_overrides) -> ExperimentConfig:
    raw = apply_overrides(exp.raw, {f"train.{k}": v for k, v in train_overrides.items()})
    return build_experiment(raw, label=label)


def replace_plan(exp: ExperimentConfig, **changes) -> ExperimentConfig:
    return dataclasses.replace(exp, plan=dataclasses.replace(exp.plan, **changes))
