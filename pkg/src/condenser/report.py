"""Render run artifacts: delimited tables plus matplotlib figures.

Everything here consumes the files a run leaves behind (JSONL history,
synthetic-set binary, evaluation JSON) and writes CSVs and PNGs next to
them; nothing recomputes results.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib
import numpy as np

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .distill import SyntheticSet  # noqa: E402

HISTORY_FIELDS = ("step", "matching_loss_mean", "net_loss", "elapsed_ms",
                  "checkpoint_id", "alpha", "synth_updates", "net_updates",
                  "flops")

# plotting-oriented view of the history: loss against each efficiency axis;
# the column order is part of the format and never changes
CURVE_FIELDS = ("step", "loss", "elapsed_ms", "flops", "accuracy")


def read_history(jsonl_path) -> list[dict]:
    rows = []
    for line in Path(jsonl_path).read_text().splitlines():
        if line.strip():
            rows.append(json.loads(line))
    return rows


def write_history_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=HISTORY_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k) for k in HISTORY_FIELDS})


def write_curves_csv(rows: list[dict], path, accuracy: float | None = None) -> None:
    """Per-step curve table: matching loss against step index, cumulative
    wall time, and cumulative estimated flops.  ``accuracy`` is known only
    after a final evaluation, so it fills the last row and stays blank
    elsewhere."""
    elapsed = 0.0
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CURVE_FIELDS)
        for i, row in enumerate(rows):
            elapsed += row["elapsed_ms"]
            last = i == len(rows) - 1
            writer.writerow([row["step"], f"{row['matching_loss_mean']:.8g}",
                             f"{elapsed:.3f}", row["flops"],
                             f"{accuracy:.6f}" if last and accuracy is not None else ""])


def run_accuracy(run_dir) -> float | None:
    """Final distilled-set accuracy, if the run directory has been
    evaluated."""
    eval_path = Path(run_dir) / "eval.json"
    if not eval_path.exists():
        return None
    blob = json.loads(eval_path.read_text())
    entry = blob.get("distilled")
    return entry.get("mean") if isinstance(entry, dict) else None


def plot_loss_curves(rows: list[dict], path, dpi: int = 120) -> None:
    steps = [r["step"] for r in rows]
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    axes[0].plot(steps, [r["matching_loss_mean"] for r in rows], lw=1.2)
    axes[0].set_xlabel("outer step")
    axes[0].set_ylabel("mean matching loss")
    axes[0].set_title("gradient matching")
    axes[1].plot(steps, [r["net_loss"] for r in rows], lw=1.2, color="tab:orange")
    axes[1].set_xlabel("outer step")
    axes[1].set_ylabel("network loss")
    axes[1].set_title("inner training")
    for ax in axes:
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=dpi)
    plt.close(fig)


def synthetic_mosaic(synth: SyntheticSet, max_cols: int = 10) -> np.ndarray:
    """One row per class of decoded, denormalized images with 1-px gaps;
    returns (H, W) for grayscale or (H, W, 3) for color, in [0, 1]."""
    x, y = synth.decode()
    x = np.clip(x * synth.std[:, None, None] + synth.mean[:, None, None], 0, 1)
    classes = synth.num_classes
    cols = min(max_cols, synth.images_per_class)
    c, h, w = x.shape[1:]
    grid = np.ones((classes * (h + 1) - 1, cols * (w + 1) - 1, c))
    for cls in range(classes):
        rows_of_class = np.flatnonzero(y == cls)[:cols]
        for j, idx in enumerate(rows_of_class):
            tile = x[idx].transpose(1, 2, 0)
            grid[cls * (h + 1):cls * (h + 1) + h, j * (w + 1):j * (w + 1) + w] = tile
    return grid[..., 0] if c == 1 else grid


def render_synthetic_grid(synth: SyntheticSet, path, dpi: int = 120) -> None:
    grid = synthetic_mosaic(synth)
    fig, ax = plt.subplots(figsize=(max(3, grid.shape[1] / 28),
                                    max(3, grid.shape[0] / 28)))
    ax.imshow(grid, cmap="gray" if grid.ndim == 2 else None,
              vmin=0, vmax=1, interpolation="nearest")
    ax.set_axis_off()
    ax.set_title("synthetic set (one row per class)")
    fig.tight_layout()
    fig.savefig(path, dpi=dpi)
    plt.close(fig)


def write_eval_csv(eval_blob: dict, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["candidate", "rep", "accuracy"])
        for name, entry in eval_blob.items():
            if not isinstance(entry, dict) or "accuracies" not in entry:
                continue
            for i, acc in enumerate(entry["accuracies"]):
                writer.writerow([name, i, f"{acc:.6f}"])


def plot_eval_bars(eval_blob: dict, path, dpi: int = 120) -> None:
    names = [k for k, v in eval_blob.items()
             if isinstance(v, dict) and "accuracies" in v]
    means = [eval_blob[k]["mean"] for k in names]
    stds = [eval_blob[k]["std"] for k in names]
    fig, ax = plt.subplots(figsize=(1.8 + 1.4 * len(names), 3.5))
    ax.bar(names, means, yerr=stds, capsize=4,
           color=["tab:blue", "tab:gray", "tab:green"][:len(names)])
    ax.set_ylabel("test accuracy")
    ax.set_ylim(0, 1)
    ax.grid(axis="y", alpha=0.3)
    for i, m in enumerate(means):
        ax.text(i, m + 0.02, f"{m:.3f}", ha="center", fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=dpi)
    plt.close(fig)


def plot_overlaid_losses(series: list[tuple[str, list[dict]]], path,
                         dpi: int = 120) -> None:
    """Matching-loss curves of several runs on shared axes, one labeled
    line each."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, rows in series:
        ax.plot([r["step"] for r in rows],
                [r["matching_loss_mean"] for r in rows], lw=1.2, label=label)
    ax.set_xlabel("outer step")
    ax.set_ylabel("mean matching loss")
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=dpi)
    plt.close(fig)


def render_run(run_dir, out_dir=None, dpi: int = 120) -> list[str]:
    """Produce every table and figure the run directory supports; returns
    the paths written."""
    run_dir = Path(run_dir)
    out_dir = Path(out_dir) if out_dir else run_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    log = run_dir / "run_log.jsonl"
    if log.exists():
        rows = read_history(log)
        write_history_csv(rows, out_dir / "run_log.csv")
        write_curves_csv(rows, out_dir / "curves.csv", run_accuracy(run_dir))
        plot_loss_curves(rows, out_dir / "loss_curves.png", dpi)
        written += [str(out_dir / "run_log.csv"), str(out_dir / "curves.csv"),
                    str(out_dir / "loss_curves.png")]
    synth_path = run_dir / "synthetic.ddsy"
    if synth_path.exists():
        render_synthetic_grid(SyntheticSet.load(synth_path),
                              out_dir / "synthetic_grid.png", dpi)
        written.append(str(out_dir / "synthetic_grid.png"))
    eval_path = run_dir / "eval.json"
    if eval_path.exists():
        blob = json.loads(eval_path.read_text())
        write_eval_csv(blob, out_dir / "eval.csv")
        plot_eval_bars(blob, out_dir / "eval_bars.png", dpi)
        written += [str(out_dir / "eval.csv"), str(out_dir / "eval_bars.png")]
    return written


def render_runs(run_dirs, out_dir=None, dpi: int = 120) -> list[str]:
    """Render one run directory in full, or overlay several: each run gets
    its own labeled curve table, and the loss curves land on shared axes."""
    run_dirs = [Path(r) for r in run_dirs]
    if len(run_dirs) == 1:
        return render_run(run_dirs[0], out_dir, dpi)
    out_dir = Path(out_dir) if out_dir else run_dirs[0]
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    series = []
    seen: dict[str, int] = {}
    for run in run_dirs:
        log = run / "run_log.jsonl"
        if not log.exists():
            continue
        label = run.name
        if label in seen:
            seen[label] += 1
            label = f"{label}_{seen[label]}"
        else:
            seen[label] = 0
        rows = read_history(log)
        csv_path = out_dir / f"curves_{label}.csv"
        write_curves_csv(rows, csv_path, run_accuracy(run))
        written.append(str(csv_path))
        series.append((label, rows))
    if series:
        plot_overlaid_losses(series, out_dir / "loss_curves.png", dpi)
        written.append(str(out_dir / "loss_curves.png"))
    return written
