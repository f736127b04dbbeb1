"""Figures for the CLI report paths. Everything renders off-screen to PNG."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.4),
    "figure.dpi": 100,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "font.size": 9,
}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def pretrain_curves(curves: dict, path) -> Path:
    """Per-epoch stage-1 loss, one line per temperature label."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for label, ys in curves.items():
            ax.plot(np.arange(len(ys)), ys, label=label)
        ax.set_xlabel("epoch")
        ax.set_ylabel("source cross-entropy")
        ax.legend()
        return _save(fig, path)


def selection_curves(selections: list[dict], path) -> Path:
    """Selection precision next to the size-matched random baseline, per step."""
    steps = [s["m"] for s in selections]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax2 = ax.twinx()
        ax2.bar(steps, [s["n_selected"] for s in selections], color="0.85", width=0.5)
        ax2.set_ylabel("selected samples")
        ax.set_zorder(ax2.get_zorder() + 1)
        ax.patch.set_visible(False)
        for key, label, style in (("precision", "selected", "o-"),
                                  ("random_precision", "random (same size)", "s--")):
            pts = [(m, s.get(key)) for m, s in zip(steps, selections) if s.get(key) is not None]
            if pts:
                ax.plot(*zip(*pts), style, label=label)
        ax.set_xlabel("step m")
        ax.set_ylabel("pseudo-label precision")
        ax.legend(loc="lower right")
        return _save(fig, path)


def accuracy_curves(rows: list[dict], stage1: dict, path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for key in ("source_acc", "target_acc"):
            pts = [(0, stage1[key])] if key in stage1 else []
            pts += [(r["step"], r[key]) for r in rows if r.get(key) is not None]
            if pts:
                ax.plot(*zip(*pts), "o-", label=key.replace("_acc", ""))
        ax.set_xlabel("step m")
        ax.set_ylabel("accuracy")
        ax.set_ylim(0.0, 1.02)
        ax.legend()
        return _save(fig, path)


def a_distance_bars(values: dict, path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        names = list(values)
        ax.bar(names, [values[n] for n in names], color="C0", width=0.5)
        ax.set_ylabel("proxy A-distance")
        ax.set_ylim(0.0, 2.05)
        return _save(fig, path)


def embedding_scatter(xy: np.ndarray, labels, domain_tags, path) -> Path:
    labels = np.asarray(labels)
    tags = np.asarray(domain_tags)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.6, 4.2))
        for tag, marker in (("source", "o"), ("target", "x")):
            sel = tags == tag
            if sel.any():
                ax.scatter(xy[sel, 0], xy[sel, 1], c=labels[sel], cmap="tab10", vmin=0, vmax=9,
                           marker=marker, s=8, linewidths=0.6, alpha=0.7, label=tag)
        ax.set_xlabel("PC 1")
        ax.set_ylabel("PC 2")
        ax.legend()
        return _save(fig, path)


def ablation_bars(table, path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        x = np.arange(len(table.variants))
        med = [table.median(v) for v in table.variants]
        ax.bar(x, med, color="C0", width=0.6, label="median")
        for i, v in enumerate(table.variants):
            ys = [table.acc[(v, s)] for s in table.seeds]
            ax.plot([i] * len(ys), ys, "k.", ms=4)
        ax.set_xticks(x, table.variants, rotation=30)
        ax.set_ylabel("target accuracy")
        ax.set_ylim(0.0, 1.02)
        return _save(fig, path)
