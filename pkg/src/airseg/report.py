"""Figure rendering for evaluation reports.

Consumes the per-case CSV written by the eval command (and optionally the
timing CSV from the run command) and renders summary figures next to a
delimited summary table. Rendering is headless (Agg backend).
"""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from airseg.metrics import METRIC_NAMES, format_mean_std

STAGE_NAMES = ("coarse", "crop", "fine", "post")


def read_case_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: no case rows")
    return rows


def render_per_case_dice(rows: list[dict], out_path) -> None:
    ids = [r["case"] for r in rows]
    dice = [float(r["dice"]) for r in rows]
    fig, ax = plt.subplots(figsize=(max(6, 0.5 * len(ids)), 4))
    ax.bar(range(len(ids)), dice, color="#4878b0")
    ax.axhline(float(np.mean(dice)), color="#c44e52", linestyle="--",
               label=f"mean {np.mean(dice):.3f}")
    ax.set_xticks(range(len(ids)))
    ax.set_xticklabels(ids, rotation=45, ha="right", fontsize=8)
    ax.set_ylabel("dice")
    ax.set_ylim(0, 1.05)
    ax.set_title("Per-case dice")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def render_metric_distributions(rows: list[dict], out_path) -> None:
    data = [[float(r[name]) for r in rows] for name in METRIC_NAMES]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.boxplot(data, tick_labels=list(METRIC_NAMES))
    ax.set_ylabel("value")
    ax.set_ylim(-0.02, 1.05)
    ax.set_title(f"Metric distributions over {len(rows)} cases")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def render_timing_breakdown(timing_rows: list[dict], out_path) -> None:
    ids = [r["case"] for r in timing_rows]
    bottoms = np.zeros(len(ids))
    fig, ax = plt.subplots(figsize=(max(6, 0.5 * len(ids)), 4))
    for stage in STAGE_NAMES:
        values = np.array([float(r[f"{stage}_s"]) for r in timing_rows])
        ax.bar(range(len(ids)), values, bottom=bottoms, label=stage)
        bottoms += values
    ax.set_xticks(range(len(ids)))
    ax.set_xticklabels(ids, rotation=45, ha="right", fontsize=8)
    ax.set_ylabel("seconds")
    ax.set_title("Stage wall time per case")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def write_summary_csv(rows: list[dict], out_path) -> None:
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "mean", "std", "formatted"])
        for name in METRIC_NAMES:
            values = np.array([float(r[name]) for r in rows], dtype=np.float64)
            mean, std = float(values.mean()), float(values.std())
            writer.writerow([name, f"{mean:.6f}", f"{std:.6f}", format_mean_std(mean, std)])


def generate_report(cases_csv, out_dir, timing_csv=None) -> list[Path]:
    """Render all figures plus the summary table; returns written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = read_case_rows(cases_csv)
    written = []
    path = out / "per_case_dice.png"
    render_per_case_dice(rows, path)
    written.append(path)
    path = out / "metric_distributions.png"
    render_metric_distributions(rows, path)
    written.append(path)
    path = out / "summary.csv"
    write_summary_csv(rows, path)
    written.append(path)
    if timing_csv is not None:
        timing_rows = read_case_rows(timing_csv)
        path = out / "timing_breakdown.png"
        render_timing_breakdown(timing_rows, path)
        written.append(path)
    return written
