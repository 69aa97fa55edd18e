"""SVG figures for benchmark reports. Output is byte-stable for fixed input."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_RC = {"svg.hashsalt": "sparsevos", "svg.fonttype": "none", "figure.figsize": (4.8, 3.6), "font.size": 9}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def accuracy_vs_speedup(summaries: Sequence[Mapping], path: str | Path) -> Path:
    """One point per configuration: end-to-end MAC speedup against mean IoU."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        for s in summaries:
            ax.scatter(s["speedup_total"], s["mean_iou_gt"], s=28)
            ax.annotate(s["config"], (s["speedup_total"], s["mean_iou_gt"]), textcoords="offset points", xytext=(4, 4))
        ax.set_xlabel("end-to-end MAC speedup")
        ax.set_ylabel("mean IoU vs ground truth")
        ax.grid(alpha=0.3)
        return _save(fig, path)


def tau_sweep_plot(rows: Sequence[Mapping], path: str | Path) -> Path:
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        ax.plot([r["tau"] for r in rows], [r["mean_window_sparsity"] for r in rows], marker="o")
        ax.set_xlabel("tau")
        ax.set_ylabel("mean window sparsity")
        ax.set_ylim(0, 1)
        ax.grid(alpha=0.3)
        return _save(fig, path)


def s_sweep_plot(rows: Sequence[Mapping], path: str | Path) -> Path:
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        s = [r["s"] for r in rows]
        ax.plot(s, [r["steady_memory_savings"] for r in rows], marker="o", label="measured (steady state)")
        ax.plot(s, [r["analytic_5s_over_7"] for r in rows], linestyle="--", label="5s/7")
        ax.set_xlabel("s")
        ax.set_ylabel("memory tokens skipped")
        ax.set_ylim(0, 1)
        ax.legend()
        ax.grid(alpha=0.3)
        return _save(fig, path)
