"""Report rendering: delimited tables plus matplotlib figures on disk.

Every CLI workflow that produces numbers also renders the companion
figure(s) next to the delimited output; all rendering uses the Agg backend
so it works headless.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .metrics import METRIC_NAMES, EvalReport


def write_per_slice_csv(report: EvalReport, path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["method", "subject", "orientation", "slice", *METRIC_NAMES])
        for method, rows in report.per_slice.items():
            for r in rows:
                w.writerow(
                    [method, r.subject, r.orientation, r.slice_index]
                    + [repr(r.values[m]) for m in METRIC_NAMES]
                )


def write_aggregates_csv(report: EvalReport, path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["method"] + [f"{m}_mean_std" for m in METRIC_NAMES])
        for method, aggs in report.aggregates.items():
            w.writerow([method] + [format_mean_std(*aggs[m]) for m in METRIC_NAMES])


def format_mean_std(mean: float, std: float) -> str:
    return f"{mean:.4f}±{std:.4f}"


def write_report_json(report: EvalReport, path: str | Path) -> None:
    payload = {
        "aggregates": {
            method: {m: {"mean": v[0], "std": v[1]} for m, v in aggs.items()}
            for method, aggs in report.aggregates.items()
        },
        "tests": [
            {
                "method_a": t.method_a,
                "method_b": t.method_b,
                "metric": t.metric,
                "t_statistic": t.t_statistic,
                "p_value": t.p_value,
                "degenerate": t.degenerate,
            }
            for t in report.tests
        ],
        "n_slices": {method: len(rows) for method, rows in report.per_slice.items()},
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))


def save_metric_distributions(report: EvalReport, path: str | Path) -> None:
    methods = list(report.per_slice)
    fig, axes = plt.subplots(1, len(METRIC_NAMES), figsize=(4 * len(METRIC_NAMES), 3.2))
    for ax, metric in zip(np.atleast_1d(axes), METRIC_NAMES):
        data = [[r.values[metric] for r in report.per_slice[m]] for m in methods]
        ax.boxplot(data, tick_labels=methods)
        ax.set_title(metric)
        ax.tick_params(axis="x", rotation=30)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_image_grid(
    rows: list[list[np.ndarray]], row_labels: list[str], path: str | Path
) -> None:
    n_rows, n_cols = len(rows), max(len(r) for r in rows)
    fig, axes = plt.subplots(n_rows, n_cols, figsize=(1.6 * n_cols, 1.7 * n_rows), squeeze=False)
    for i, (label, row) in enumerate(zip(row_labels, rows)):
        for j in range(n_cols):
            ax = axes[i][j]
            ax.axis("off")
            if j < len(row):
                ax.imshow(row[j], cmap="gray", vmin=0.0, vmax=1.0)
            if j == 0:
                ax.set_title(label, loc="left", fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_cka_heatmap(
    matrix: np.ndarray, labels_rows: list[str], labels_cols: list[str],
    path: str | Path, title: str,
) -> None:
    fig, ax = plt.subplots(figsize=(1.0 + 0.8 * len(labels_cols), 1.0 + 0.8 * len(labels_rows)))
    im = ax.imshow(matrix, vmin=0.0, vmax=1.0, cmap="viridis")
    ax.set_xticks(range(len(labels_cols)), labels_cols, rotation=45, ha="right")
    ax.set_yticks(range(len(labels_rows)), labels_rows)
    for i in range(matrix.shape[0]):
        for j in range(matrix.shape[1]):
            ax.text(j, i, f"{matrix[i, j]:.2f}", ha="center", va="center",
                    color="white" if matrix[i, j] < 0.6 else "black", fontsize=8)
    ax.set_title(title)
    fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_cka_csv(
    matrix: np.ndarray, labels_rows: list[str], labels_cols: list[str], path: str | Path
) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["layer"] + labels_cols)
        for label, row in zip(labels_rows, matrix):
            w.writerow([label] + [repr(float(x)) for x in row])


def save_loss_curves(log_rows: list[dict], path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    steps = [r["step"] for r in log_rows]
    for key in ("loss_total", "loss_pet", "loss_mri", "loss_bias"):
        vals = [r[key] for r in log_rows]
        if any(v > 0 for v in vals):
            ax.plot(steps, vals, label=key.replace("loss_", ""))
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
