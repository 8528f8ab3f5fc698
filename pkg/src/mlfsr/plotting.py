"""Figures for the report paths of the CLI, rendered straight to image files."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps repeated renders byte-identical
    fig.savefig(path, dpi=110, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    return path


def plot_scaling(reports: Sequence, path) -> Path:
    """Log-log runtime against pixel count, one line per report."""
    fig, ax = plt.subplots(figsize=(5, 3.6))
    for rep in reports:
        px = [r.size ** 2 for r in rep.rows]
        ms = [r.median_ms for r in rep.rows]
        ax.loglog(px, ms, "o-", label=f"{rep.label} (slope {rep.slope:.2f})")
    ax.set_xlabel("pixels per view")
    ax.set_ylabel("median forward time (ms)")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    return _save(fig, path)


def plot_training(history: Sequence[dict], path) -> Path:
    epochs = [r["epoch"] for r in history]
    fig, ax = plt.subplots(figsize=(5.5, 3.6))
    ax.plot(epochs, [r["train_loss"] for r in history], color="tab:blue", label="train loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("train loss", color="tab:blue")
    phase2 = [r["epoch"] for r in history if r["phase"] == 2]
    if phase2:
        ax.axvline(phase2[0] - 0.5, color="gray", ls="--", lw=1)
    val = [(r["epoch"], r["val_psnr"]) for r in history if r.get("val_psnr") not in (None, "")]
    if val:
        ax2 = ax.twinx()
        ax2.plot(*zip(*val), "s-", color="tab:red", ms=3)
        ax2.set_ylabel("val PSNR (dB)", color="tab:red")
    return _save(fig, path)


def plot_ablation(rows: Sequence, path) -> Path:
    """Bar chart of PSNR change relative to the full model."""
    fig, ax = plt.subplots(figsize=(5, 3.2))
    names = [r.variant for r in rows]
    deltas = [r.delta_psnr for r in rows]
    ax.bar(names, deltas, color=["tab:gray" if d == 0 else "tab:orange" for d in deltas])
    ax.axhline(0, color="black", lw=0.8)
    ax.set_ylabel("PSNR change (dB)")
    ax.tick_params(axis="x", rotation=20)
    return _save(fig, path)
