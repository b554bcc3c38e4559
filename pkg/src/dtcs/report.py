"""Aggregation of persisted runs into comparison tables and plot-ready curves.

Everything here is recomputed from ``record.jsonl`` and ``config.resolved``;
``summary.csv`` and ``diag.json`` are never read back.
"""

from __future__ import annotations

import math
import warnings
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import tomli

from dtcs import diagnostics
from dtcs.experiment import build_experiment, plan_info, read_jsonl, summarize
from dtcs.scheduler import RunRecord


@dataclass
class LoadedRun:
    directory: Path
    row: dict
    record: RunRecord


def load_run(directory: str | Path) -> LoadedRun:
    directory = Path(directory)
    raw = tomli.loads((directory / "config.resolved").read_text())
    exp = build_experiment(raw, label=raw["experiment"].get("label") or None)
    seed = int(raw["experiment"]["seeds"][0])
    target = int(raw["experiment"]["target_domain"])
    record = read_jsonl(directory / "record.jsonl")
    if not record.iterations and exp.plan.iterations:
        raise ValueError(f"{directory}: empty record")
    if (directory / "failure.json").exists():
        raise ValueError(f"{directory}: run failed (see failure.json)")
    row, _ = summarize(record, directory.name, plan_info(exp.plan, exp.label), seed, target,
                       exp.converged_fraction)
    return LoadedRun(directory, row, record)


def load_runs(directories: Iterable[str | Path]) -> list[LoadedRun]:
    """Load every readable run; corrupt or failed directories are skipped with a warning."""
    runs = []
    for d in directories:
        try:
            runs.append(load_run(d))
        except (OSError, ValueError, KeyError, IndexError, TypeError, tomli.TOMLDecodeError) as exc:
            warnings.warn(f"skipping run directory {d}: {exc}")
    return runs


def expand_run_dirs(paths: Iterable[str | Path]) -> list[Path]:
    """A path is either a run directory or a parent holding run directories."""
    out = []
    for p in map(Path, paths):
        if (p / "record.jsonl").exists() or (p / "config.resolved").exists():
            out.append(p)
        elif p.is_dir():
            children = sorted(c for c in p.iterdir() if (c / "config.resolved").exists())
            if not children:
                warnings.warn(f"skipping {p}: no run directories inside")
            out.extend(children)
        else:
            warnings.warn(f"skipping {p}: not a directory")
    return out


def _std(values: Sequence[float]) -> float:
    values = [v for v in values if not math.isnan(v)]
    if len(values) < 2:
        return 0.0 if values else float("nan")
    return float(np.std(values, ddof=1))


def _mean(values: Sequence[float]) -> float:
    values = [v for v in values if not math.isnan(v)]
    return float(np.mean(values)) if values else float("nan")


def aggregate(rows: Sequence[dict]) -> list[dict]:
    """One row per label: per-target accuracy (%) mean and std over seeds, Avg, GS, loss std."""
    groups: OrderedDict[str, list[dict]] = OrderedDict()
    for r in rows:
        groups.setdefault(r["label"], []).append(r)
    targets = sorted({int(r["target"]) for r in rows})
    table = []
    for label, members in groups.items():
        out: dict = {"label": label, "runs": len(members), "seeds": len({r["seed"] for r in members})}
        per_target = []
        for t in targets:
            accs = [100.0 * float(r["target_acc"]) for r in members if int(r["target"]) == t]
            out[f"t{t}_acc"] = _mean(accs)
            out[f"t{t}_std"] = _std(accs)
            if accs:
                per_target.append(out[f"t{t}_acc"])
        out["avg_acc"] = _mean(per_target)
        if len(per_target) >= 2:
            out["gs_sample_std"] = diagnostics.gs(per_target, diagnostics.GS_SAMPLE_STD)
            out["gs_eq12"] = diagnostics.gs(per_target, diagnostics.GS_EQ12)
        else:
            out["gs_sample_std"] = out["gs_eq12"] = float("nan")
        out["pooled_val_acc"] = _mean([100.0 * float(r["pooled_val_acc"]) for r in members])
        loss_std = [float(r["total_loss_std"]) for r in members]
        out["total_loss_std"] = _mean(loss_std)
        out["total_loss_std_sd"] = _std(loss_std)
        out["neg_frac"] = _mean([float(r["neg_frac"]) for r in members])
        table.append(out)
    return table


def _fmt(v) -> str:
    if isinstance(v, float):
        if math.isnan(v):
            return "n/a"
        return f"{v:.4g}" if abs(v) < 0.01 and v != 0 else f"{v:.2f}"
    return str(v)


def markdown_table(table: Sequence[dict], columns: Sequence[str] | None = None) -> str:
    if not table:
        return "(no rows)\n"
    columns = list(columns or table[0].keys())
    lines = ["| " + " | ".join(columns) + " |", "|" + "---|" * len(columns)]
    for row in table:
        lines.append("| " + " | ".join(_fmt(row.get(c, "")) for c in columns) + " |")
    return "\n".join(lines) + "\n"


def accuracy_columns(table: Sequence[dict]) -> list[str]:
    cols = ["label"]
    if table:
        cols += [k for k in table[0] if k.startswith("t") and k.endswith("_acc")]
    return cols + ["avg_acc"]


def summary_markdown(table: Sequence[dict]) -> str:
    """Accuracy with mean ± std per target, then Avg, both GS variants and loss statistics."""
    if not table:
        return "(no rows)\n"
    targets = [k[:-4] for k in table[0] if k.startswith("t") and k.endswith("_acc")]
    header = ["method"] + [f"target {t[1:]}" for t in targets] + [
        "Avg", "GS (sample std)", "GS (eq12)", "loss std", "neg-cos frac"]
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for row in table:
        cells = [row["label"]]
        cells += [f"{_fmt(row[t + '_acc'])} ± {_fmt(row[t + '_std'])}" for t in targets]
        cells += [_fmt(row["avg_acc"]), _fmt(row["gs_sample_std"]), _fmt(row["gs_eq12"]),
                  f"{_fmt(row['total_loss_std'])} ± {_fmt(row['total_loss_std_sd'])}", _fmt(row["neg_frac"])]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def curves(runs: Sequence[LoadedRun]) -> list[dict]:
    """Per-iteration means over runs: per-domain loss, weights, total loss, negative-cosine fraction."""
    if not runs:
        return []
    n = min(len(r.record.iterations) for r in runs)
    m = min(len(r.record.iterations[0]["weights"]) for r in runs if r.record.iterations) if n else 0
    rows = []
    for i in range(n):
        its = [r.record.iterations[i] for r in runs]
        row: dict = {"iter": i}
        for d in range(m):
            row[f"loss_d{d}"] = float(np.mean([it["domain_losses"][d]["composite"] for it in its]))
        for d in range(m):
            row[f"weight_d{d}"] = float(np.mean([it["weights"][d] for it in its]))
        row["total_loss"] = float(np.mean([it["total_loss"] for it in its]))
        conflict = [it["conflict"]["neg_frac"] for it in its if "conflict" in it]
        row["neg_frac"] = float(np.mean(conflict)) if conflict else ""
        rows.append(row)
    return rows


def group_runs(runs: Sequence[LoadedRun]) -> OrderedDict[str, list[LoadedRun]]:
    groups: OrderedDict[str, list[LoadedRun]] = OrderedDict()
    for r in runs:
        groups.setdefault(r.row["label"], []).append(r)
    return groups
