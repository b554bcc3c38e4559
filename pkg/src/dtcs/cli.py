"""Command-line entry point: ``run``, ``ablate``, ``sweep``, ``report`` and ``gen-data``.

Examples::

    dtcs run --config configs/fig1.toml --method erm --seeds 0
    dtcs ablate --config configs/fig1.toml --seeds 0-9 --out runs/ablate
    dtcs report runs/ablate --out runs/ablate/report

Set ``DTCS_WORKERS`` to run independent runs in parallel processes.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import warnings
from collections import OrderedDict
from pathlib import Path
from typing import Sequence

import tomli_w

from dtcs import plotting, report
from dtcs.data import export_csv
from dtcs.experiment import (ConfigError, ExperimentConfig, RunResult, RunTask, apply_overrides, build_experiment,
                             domain_ids, execute_group, load_config, load_dataset, parallel_map, tasks_for,
                             with_label, write_csv)
from dtcs.scheduler import SEARCH_SPACE, grid_points

ABLATION_ROWS = OrderedDict([
    ("A", {"dts": False, "dcb": False}),
    ("B", {"dts": False, "dcb": True}),
    ("C", {"dts": True, "dcb": False}),
    ("D", {"dts": True, "dcb": True}),
])


def parse_seeds(text: str) -> list[int]:
    """``"0,3,5"``, ``"0-9"`` or a mix of both."""
    seeds: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            if "-" in part[1:]:
                lo, hi = part.split("-", 1)
                seeds.extend(range(int(lo), int(hi) + 1))
            else:
                seeds.append(int(part))
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("seed list is empty")
    return seeds


def parse_grid(text: str) -> dict[str, list[float]]:
    """``"lr=0.05,0.01;tau=2"`` -> ``{"lr": [0.05, 0.01], "tau": [2.0]}``."""
    grid: dict[str, list[float]] = {}
    for part in filter(None, (p.strip() for p in text.split(";"))):
        key, _, values = part.partition("=")
        key = key.strip()
        if key not in SEARCH_SPACE:
            raise argparse.ArgumentTypeError(f"grid key {key!r} not in {sorted(SEARCH_SPACE)}")
        try:
            grid[key] = [float(v) for v in values.split(",") if v.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad grid values for {key}: {values!r}") from None
        if not grid[key]:
            raise argparse.ArgumentTypeError(f"grid key {key} has no values")
    return grid


def _experiment_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="TOML experiment config")
    p.add_argument("--method", choices=["dtcs", "erm", "agr-sum"])
    p.add_argument("--prophet", choices=["me", "se", "mp", "mc"])
    p.add_argument("--alpha", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--no-dcb", action="store_true", help="disable contribution balancing")
    p.add_argument("--lr", type=float)
    p.add_argument("--iterations", type=int)
    p.add_argument("--seeds", type=parse_seeds, help="e.g. 0,1,2 or 0-9")
    p.add_argument("--target-domain", type=int, help="single held-out domain (default: config)")
    p.add_argument("--all-targets", action="store_true", help="hold out every domain in turn")
    p.add_argument("--out", type=Path)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dtcs", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="verb", required=True)
    _experiment_flags(sub.add_parser("run", help="train runs for every seed (and target)"))
    _experiment_flags(sub.add_parser("ablate", help="2x2 ablation over soft targets and balancing"))
    sp = sub.add_parser("sweep", help="grid search selected by pooled source-validation accuracy")
    _experiment_flags(sp)
    sp.add_argument("--grid", type=parse_grid, help="e.g. 'lr=0.05,0.01;tau=2' (default: full search space)")
    rp = sub.add_parser("report", help="aggregate run directories into markdown, CSV and figures")
    rp.add_argument("runs", nargs="+", type=Path, help="run directories or their parents")
    rp.add_argument("--out", type=Path, default=Path("report"))
    gp = sub.add_parser("gen-data", help="write a synthetic dataset to CSV")
    gp.add_argument("--config", type=Path)
    gp.add_argument("--seeds", type=parse_seeds, default=[0], help="dataset seed (first value used)")
    gp.add_argument("--out", type=Path, default=Path("fig1-bench.csv"))
    return parser


def experiment_from_args(args: argparse.Namespace) -> ExperimentConfig:
    config = load_config(args.config)
    overrides = {
        "train.method": args.method,
        "train.prophet": args.prophet,
        "train.alpha": args.alpha,
        "train.tau": args.tau,
        "train.momentum": args.momentum,
        "train.dcb": False if args.no_dcb else None,
        "train.lr": args.lr,
        "train.iterations": args.iterations,
        "experiment.seeds": args.seeds,
        "experiment.target_domain": args.target_domain,
        "experiment.sweep_targets": True if args.all_targets else (False if args.target_domain is not None else None),
        "experiment.out": str(args.out) if args.out is not None else None,
    }
    return build_experiment(apply_overrides(config, overrides))


def _group_by_seed_target(tasks: Sequence[RunTask]) -> list[list[RunTask]]:
    groups: OrderedDict[tuple[int, int], list[RunTask]] = OrderedDict()
    for t in tasks:
        groups.setdefault((t.seed, t.target), []).append(t)
    return list(groups.values())


def run_tasks(tasks: Sequence[RunTask]) -> list[RunResult]:
    results = parallel_map(execute_group, _group_by_seed_target(tasks))
    flat = [r for group in results for r in group]
    for r in flat:
        if not r.ok:
            print(f"run {r.run_id} failed: {r.error} (partial record in {r.directory})", file=sys.stderr)
    return flat


def _write_tables(table: list[dict], out: Path, stem: str) -> str:
    out.mkdir(parents=True, exist_ok=True)
    write_csv(table, out / f"{stem}.csv")
    md = report.summary_markdown(table)
    (out / f"{stem}.md").write_text(md)
    return md


def cmd_run(args: argparse.Namespace) -> int:
    exp = experiment_from_args(args)
    results = run_tasks(tasks_for(exp))
    rows = [r.summary for r in results if r.ok]
    if rows:
        print(_write_tables(report.aggregate(rows), exp.out, "aggregate"))
    return 0 if all(r.ok for r in results) else 1


def ablation_experiments(exp: ExperimentConfig) -> OrderedDict[str, ExperimentConfig]:
    """Rows A-D; A is plain ERM and B keeps only balancing (alpha = 1 turns soft targets off)."""
    out: OrderedDict[str, ExperimentConfig] = OrderedDict()
    sweep_all = apply_overrides(exp.raw, {"experiment.sweep_targets": True})
    base = build_experiment(sweep_all)
    for row, parts in ABLATION_ROWS.items():
        if not parts["dts"] and not parts["dcb"]:
            out[row] = with_label(base, row, method="erm")
        else:
            out[row] = with_label(base, row, method="dtcs", dcb=parts["dcb"],
                                  alpha=exp.plan.alpha if parts["dts"] else 1.0,
                                  prophet=(exp.plan.prophet_kind or "ME").lower())
    return out


def cmd_ablate(args: argparse.Namespace) -> int:
    exp = experiment_from_args(args)
    rows = ablation_experiments(exp)
    tasks = [t for e in rows.values() for t in tasks_for(e, exp.out)]
    results = run_tasks(tasks)
    ok_rows = [r.summary for r in results if r.ok]
    table = report.aggregate(ok_rows)
    for t in table:
        t["dts"] = ABLATION_ROWS[t["label"]]["dts"]
        t["dcb"] = ABLATION_ROWS[t["label"]]["dcb"]
    exp.out.mkdir(parents=True, exist_ok=True)
    write_csv(table, exp.out / "ablation.csv")
    cols = ["label", "dts", "dcb"] + report.accuracy_columns(table)[1:]
    md = report.markdown_table(table, cols)
    (exp.out / "ablation.md").write_text(md)
    print(md)
    return 0 if all(r.ok for r in results) else 1


def point_label(point: dict) -> str:
    return "-".join(f"{k}{point[k]:g}" for k in sorted(point))


def sweep_points(grid: dict[str, Sequence[float]]) -> list[dict]:
    """Grid points in lexicographic order of their (key-sorted) values; ties select the first."""
    return sorted(grid_points(grid), key=lambda p: tuple(p[k] for k in sorted(p)))


def select_best(scores: Sequence[tuple[dict, float]]) -> int:
    best = 0
    for i, (_, score) in enumerate(scores):
        if score > scores[best][1]:
            best = i
    return best


def cmd_sweep(args: argparse.Namespace) -> int:
    exp = experiment_from_args(args)
    grid = args.grid or exp.raw["experiment"].get("grid") or SEARCH_SPACE
    points = sweep_points(grid)
    experiments = []
    for p in points:
        overrides = {("momentum" if k == "momentum" else k): v for k, v in p.items()}
        e = with_label(exp, exp.label, **overrides)
        experiments.append(dataclasses.replace(e, out=exp.out / point_label(p)))
    tasks = [t for e in experiments for t in tasks_for(e)]
    results = run_tasks(tasks)
    by_dir: dict[Path, list[dict]] = {}
    for r in results:
        if r.ok:
            by_dir.setdefault(r.directory.parent, []).append(r.summary)
    rows, scores = [], []
    for p, e in zip(points, experiments):
        members = by_dir.get(e.out, [])
        val = report._mean([100.0 * m["pooled_val_acc"] for m in members])
        tgt = report._mean([100.0 * m["target_acc"] for m in members])
        rows.append({"point": point_label(p), **p, "runs": len(members), "pooled_val_acc": val, "target_acc": tgt})
        scores.append((p, float("-inf") if val != val else val))
    best = select_best(scores)
    for i, row in enumerate(rows):
        row["selected"] = i == best
    exp.out.mkdir(parents=True, exist_ok=True)
    write_csv(rows, exp.out / "sweep.csv")
    md = report.markdown_table(rows)
    (exp.out / "sweep.md").write_text(md)
    (exp.out / "best.toml").write_text(tomli_w.dumps(experiments[best].raw))
    print(md)
    print(f"selected {rows[best]['point']} (pooled source-validation accuracy {rows[best]['pooled_val_acc']:.2f}%)")
    return 0 if all(r.ok for r in results) else 1


def cmd_report(args: argparse.Namespace) -> int:
    runs = report.load_runs(report.expand_run_dirs(args.runs))
    if not runs:
        print("error: no readable run directories", file=sys.stderr)
        return 1
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    write_csv([r.row for r in runs], out / "runs.csv")
    table = report.aggregate([r.row for r in runs])
    write_csv(table, out / "report.csv")
    curves = OrderedDict((label, report.curves(members)) for label, members in report.group_runs(runs).items())
    for label, rows in curves.items():
        write_csv(rows, out / f"curves_{label}.csv")
    figures = out / "figures"
    plotting.total_loss_figure(curves, figures / "total_loss.png")
    plotting.conflict_figure(curves, figures / "conflict.png")
    plotting.accuracy_figure(table, figures / "accuracy.png")
    for label, rows in curves.items():
        if rows:
            plotting.domain_loss_figure(label, rows, figures / f"domains_{label}.png")
    md = "# Run comparison\n\n" + report.summary_markdown(table)
    md += "\nAccuracies in %, mean ± sample std over seeds. GS is computed on the per-target means.\n"
    md += "Loss std is the sample std of the weighted total loss after the convergence point.\n\n"
    md += "".join(f"![{p.stem}](figures/{p.name})\n" for p in sorted(figures.glob("*.png")))
    (out / "report.md").write_text(md)
    print(report.summary_markdown(table))
    return 0


def cmd_gen_data(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    dataset = load_dataset(config, args.seeds[0])
    export_csv(dataset, args.out)
    sizes = ", ".join(f"{d.id}:{len(d)}" for d in dataset.domains)
    print(f"wrote {args.out} ({len(dataset.domains)} domains [{sizes}], d={dataset.num_features}, "
          f"C={dataset.num_classes})")
    return 0


COMMANDS = {"run": cmd_run, "ablate": cmd_ablate, "sweep": cmd_sweep, "report": cmd_report, "gen-data": cmd_gen_data}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return COMMANDS[args.verb](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
