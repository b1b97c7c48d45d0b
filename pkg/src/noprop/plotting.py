"""Figures rendered to files next to the CSV output."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _num(v):
    return float(v) if v not in (None, "") else None


def _epoch_rows(rows):
    return [r for r in rows if r["block"] == "all"]


def plot_accuracy_vs_time(runs: dict[str, list[dict]], path) -> None:
    """Test accuracy of every run against cumulative wall-clock seconds."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, rows in runs.items():
        pts = [(_num(r.get("wall_seconds")), _num(r["test_acc"])) for r in _epoch_rows(rows)]
        pts = [(t, a) for t, a in pts if t is not None and a is not None]
        if pts:
            ax.plot([p[0] for p in pts], [100 * p[1] for p in pts], marker="o", label=label)
    ax.set_xlabel("training time (s)")
    ax.set_ylabel("test accuracy (%)")
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_losses(rows: list[dict], path, title: str = "") -> None:
    """Per-epoch means of each loss term, one panel per term present."""
    rows = _epoch_rows(rows)
    terms = [k for k in ("ce", "kl", "l2") if any(_num(r[k]) is not None for r in rows)]
    fig, axes = plt.subplots(1, max(len(terms), 1), figsize=(4 * max(len(terms), 1), 3.2), squeeze=False)
    for ax, k in zip(axes[0], terms):
        ax.plot([int(r["epoch"]) for r in rows], [_num(r[k]) for r in rows], marker="o")
        ax.set_xlabel("epoch")
        ax.set_title(k)
        ax.grid(alpha=0.3)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_bench_mem(results: list[dict], path) -> None:
    """Grouped bars of peak live graph nodes by method and T."""
    methods = sorted({r["method"] for r in results})
    Ts = sorted({int(r["T"]) for r in results})
    width = 0.8 / len(Ts)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for i, T in enumerate(Ts):
        vals = [next(int(r["peak_nodes"]) for r in results if r["method"] == m and int(r["T"]) == T)
                for m in methods]
        ax.bar([j + i * width for j in range(len(methods))], vals, width, label=f"T={T}")
    ax.set_xticks([j + width * (len(Ts) - 1) / 2 for j in range(len(methods))], methods)
    ax.set_ylabel("peak live graph nodes")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
