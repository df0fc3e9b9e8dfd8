"""Evaluation and training reports: delimited text, JSON, and figures.

Every evaluation writes a line-oriented ``key=value`` report, a JSON
twin of it, and matplotlib figures (a sample grid and a metric bar)
rendered to files next to the text output.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import torch
from torch import Tensor

REPORT_KEYS = ("fid", "psnr_mean", "diou", "n_samples", "tau")


def format_report(metrics: dict) -> str:
    lines = []
    for key in REPORT_KEYS:
        value = metrics[key]
        if isinstance(value, float):
            lines.append(f"{key}={value:.6g}")
        else:
            lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"


def _to_display(img: Tensor):
    return ((img.detach().float() + 1.0) / 2.0).clamp(0.0, 1.0).numpy()


def save_sample_grid(
    rows: Sequence[tuple[Tensor, Tensor, Tensor]],
    path: str | Path,
    max_rows: int = 8,
) -> Path:
    """Render (input, edited, target) triplets as an image grid."""
    rows = list(rows)[:max_rows]
    n = len(rows)
    fig, axes = plt.subplots(n, 3, figsize=(6, 2 * n), squeeze=False)
    for r, triplet in enumerate(rows):
        for c, (img, title) in enumerate(zip(triplet, ("input", "edited", "target"))):
            ax = axes[r][c]
            ax.imshow(_to_display(img))
            ax.set_axis_off()
            if r == 0:
                ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def save_metric_bars(metrics: dict, path: str | Path) -> Path:
    keys = ("fid", "psnr_mean", "diou")
    fig, axes = plt.subplots(1, len(keys), figsize=(9, 3))
    for ax, key in zip(axes, keys):
        ax.bar([key], [metrics[key]])
        ax.set_title(f"{key} = {metrics[key]:.4g}")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def save_loss_curves(history: Sequence[dict], path: str | Path) -> Path:
    """Plot per-step loss terms from the training history."""
    if not history:
        raise ValueError("empty training history")
    steps = [h["step"] for h in history]
    fig, ax = plt.subplots(figsize=(7, 4))
    for key in ("total", "src", "diff", "freq", "rec"):
        ax.plot(steps, [h[key] for h in history], label=key, linewidth=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def write_report(
    out_dir: str | Path,
    metrics: dict,
    rows: Sequence[tuple[Tensor, Tensor, Tensor]] | None = None,
    prefix: str = "report",
) -> dict[str, Path]:
    """Write the delimited report, its JSON twin, and the figures."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths: dict[str, Path] = {}

    txt = out_dir / f"{prefix}.txt"
    txt.write_text(format_report(metrics), encoding="utf-8")
    paths["text"] = txt

    js = out_dir / f"{prefix}.json"
    js.write_text(json.dumps({k: metrics[k] for k in REPORT_KEYS}, indent=2) + "\n", encoding="utf-8")
    paths["json"] = js

    paths["metrics_figure"] = save_metric_bars(metrics, out_dir / f"{prefix}_metrics.png")
    if rows:
        paths["samples_figure"] = save_sample_grid(rows, out_dir / f"{prefix}_samples.png")
    return paths
