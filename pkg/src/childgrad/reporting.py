"""Delimited outputs and the figures rendered alongside them."""

from __future__ import annotations

import csv
import os


def _atomic_write(path, text: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_csv(path, rows, fieldnames=None) -> None:
    rows = list(rows)
    if fieldnames is None:
        fieldnames = list(rows[0].keys()) if rows else []
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    os.replace(tmp, path)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _pyplot():
    import matplotlib

    matplotlib.use("Agg", force=False)
    import matplotlib.pyplot as plt

    return plt


def summary_text(summaries) -> str:
    """Human-readable mean (max) table, one row per method."""
    lines = [f"{'method':<28} {'eval set':<10} {'mean (max)':<20} {'std':>8} {'n':>4}"]
    for s in summaries:
        for row in s.to_rows():
            mean_max = f"{row['mean']:.4f} ({row['max']:.4f})"
            lines.append(
                f"{s.method:<28} {row['eval_set']:<10} {mean_max:<20}"
                f" {row['std']:>8.4f} {row['n']:>4d}"
            )
        for seed, msg in sorted(s.failures.items()):
            lines.append(f"{s.method:<28} seed {seed} FAILED: {msg}")
    return "\n".join(lines) + "\n"


def write_summary_text(path, summaries) -> None:
    _atomic_write(path, summary_text(summaries))


def fig_learning_curves(reports, path, metric_name="metric") -> None:
    """One panel per eval set: metric trajectory per seed."""
    plt = _pyplot()
    eval_sets = sorted(reports[0].eval_metrics) if reports else []
    fig, axes = plt.subplots(1, max(1, len(eval_sets)),
                             figsize=(4.5 * max(1, len(eval_sets)), 3.2),
                             squeeze=False)
    for ax, name in zip(axes[0], eval_sets):
        for rep in reports:
            ax.plot(range(1, len(rep.eval_metrics[name]) + 1),
                    rep.eval_metrics[name], alpha=0.7, label=f"seed {rep.seed}")
        ax.set_xlabel("epoch")
        ax.set_ylabel(metric_name)
        ax.set_title(name)
        ax.spines["right"].set_visible(False)
        ax.spines["top"].set_visible(False)
    if reports and len(reports) <= 10:
        axes[0][0].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def fig_method_comparison(rows, path, value_key="mean", label_key="method",
                          ylabel="final metric") -> None:
    """Bar chart of one summary value per method."""
    plt = _pyplot()
    labels = [r[label_key] for r in rows]
    values = [float(r[value_key]) for r in rows]
    fig, ax = plt.subplots(figsize=(max(4.0, 1.1 * len(labels)), 3.2))
    ax.bar(range(len(labels)), values, color="tab:blue")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel(ylabel)
    ax.spines["right"].set_visible(False)
    ax.spines["top"].set_visible(False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def fig_overlap_heatmap(matrix, labels, path) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(4.2, 3.6))
    im = ax.imshow(matrix, vmin=0.0, vmax=1.0, cmap="viridis")
    ax.set_xticks(range(len(labels)))
    ax.set_yticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=7)
    ax.set_yticklabels(labels, fontsize=7)
    for i in range(matrix.shape[0]):
        for j in range(matrix.shape[1]):
            ax.text(j, i, f"{matrix[i, j]:.2f}", ha="center", va="center",
                    fontsize=7, color="white")
    fig.colorbar(im, ax=ax, label="Jaccard overlap")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def fig_variance_check(rows, path) -> None:
    """Predicted vs empirical update variance on a log-log diagonal."""
    plt = _pyplot()
    predicted = [float(r["predicted_var"]) for r in rows]
    empirical = [float(r["empirical_var"]) for r in rows]
    fig, ax = plt.subplots(figsize=(4.0, 3.6))
    lo = min(predicted + empirical) * 0.5
    hi = max(predicted + empirical) * 2.0
    ax.plot([lo, hi], [lo, hi], "k--", lw=0.8, label="exact agreement")
    ax.loglog(predicted, empirical, "o", color="tab:red")
    ax.set_xlabel("predicted variance")
    ax.set_ylabel("empirical variance")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
