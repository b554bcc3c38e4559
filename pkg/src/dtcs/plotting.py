"""Report figures rendered to PNG files with a headless matplotlib backend."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
    "figure.dpi": 120,
    "savefig.bbox": "tight",
}


def _figure(width: float = 6.0, height: float | None = None):
    golden = (5 ** 0.5 - 1) / 2
    return plt.subplots(figsize=(width, height or width * golden))


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def _series(rows: Sequence[dict], key: str) -> tuple[list[int], list[float]]:
    xs, ys = [], []
    for r in rows:
        if r.get(key, "") != "":
            xs.append(r["iter"])
            ys.append(float(r[key]))
    return xs, ys


def total_loss_figure(curves: Mapping[str, Sequence[dict]], path: Path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = _figure()
        for label, rows in curves.items():
            ax.plot(*_series(rows, "total_loss"), lw=0.8, label=label)
        ax.set_xlabel("iteration")
        ax.set_ylabel("weighted total loss")
        ax.set_yscale("log")
        ax.legend()
        return _save(fig, path)


def domain_loss_figure(label: str, rows: Sequence[dict], path: Path) -> Path:
    keys = [k for k in (rows[0] if rows else {}) if k.startswith("loss_d")]
    with plt.rc_context(STYLE):
        fig, (top, bottom) = plt.subplots(2, 1, figsize=(6.0, 5.0), sharex=True)
        for k in keys:
            top.plot(*_series(rows, k), lw=0.7, label=f"source {k[6:]}")
            bottom.plot(*_series(rows, "weight_d" + k[6:]), lw=0.7)
        top.set_ylabel("domain loss")
        top.set_title(label)
        top.legend(ncol=len(keys))
        bottom.set_ylabel("domain weight")
        bottom.set_xlabel("iteration")
        return _save(fig, path)


def conflict_figure(curves: Mapping[str, Sequence[dict]], path: Path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = _figure()
        for label, rows in curves.items():
            xs, ys = _series(rows, "neg_frac")
            if xs:
                ax.plot(xs, ys, lw=0.8, marker=".", ms=2, label=label)
        ax.set_xlabel("iteration")
        ax.set_ylabel("fraction of negative-cosine domain pairs")
        ax.set_ylim(-0.02, 1.02)
        ax.legend()
        return _save(fig, path)


def accuracy_figure(table: Sequence[dict], path: Path) -> Path:
    targets = [k for k in (table[0] if table else {}) if k.startswith("t") and k.endswith("_acc")]
    width = 0.8 / max(1, len(table))
    with plt.rc_context(STYLE):
        fig, ax = _figure()
        for j, row in enumerate(table):
            xs = [i + j * width for i in range(len(targets))]
            ax.bar(xs, [row[t] for t in targets], width, yerr=[row[t[:-4] + "_std"] for t in targets],
                   label=row["label"], capsize=2)
        ax.set_xticks([i + 0.4 - width / 2 for i in range(len(targets))])
        ax.set_xticklabels([f"target {t[1:-4]}" for t in targets])
        ax.set_ylabel("target accuracy (%)")
        ax.legend()
        return _save(fig, path)
