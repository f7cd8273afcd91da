"""Figure rendering for evaluation and training outputs.

Each helper writes a PNG next to the delimited file it illustrates; the CSV
stays the canonical product and all plotting is best-effort presentation.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt


def plot_eval_results(results, path) -> Path:
    """Bar chart of per-cell success rates with Wilson intervals."""
    path = Path(path)
    names = [r.cell.name for r in results]
    rates = [r.success_rate for r in results]
    errs = [
        (r.success_rate - r.wilson[0], r.wilson[1] - r.success_rate) for r in results
    ]
    lo = [e[0] for e in errs]
    hi = [e[1] for e in errs]
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(names)), 3.5))
    ax.bar(range(len(names)), rates, yerr=[lo, hi], capsize=4, color="#4878cf")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    ax.set_ylim(0, 1)
    ax.set_ylabel("success rate")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_metrics(metrics, path) -> Path:
    """Loss curves over training steps."""
    path = Path(path)
    steps = [s for s, _ in metrics]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for key in ("l_total", "l_bc", "l_alignment", "l_ext", "l_bbox"):
        ax.plot(steps, [r.terms()[key] for _, r in metrics], label=key, linewidth=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_ablation_grid(rows, path) -> Path:
    """Success vs. static-scene count, one line per views-per-state setting."""
    path = Path(path)
    parsed = []
    for line in rows[1:]:
        parts = line.split(",")
        if len(parts) >= 5 and parts[2] == "ok":
            parsed.append((int(parts[0]), int(parts[1]), float(parts[3]), float(parts[4])))
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for views in sorted({p[1] for p in parsed}):
        pts = sorted(p for p in parsed if p[1] == views)
        ax.plot([p[0] for p in pts], [p[2] for p in pts], marker="o",
                label=f"{views} views/state")
    ax.set_xscale("log")
    ax.set_xlabel("static scenes")
    ax.set_ylabel("uniform-view success")
    ax.set_ylim(0, 1)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
