"""Figures from the harness CSVs. Only the CLI's ``--plot`` flag imports this."""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

FONTSIZE = 9
WIDTH = 6.5  # inches


def init_plt():
    matplotlib.rcParams.update(
        {
            "font.size": FONTSIZE,
            "axes.titlesize": FONTSIZE,
            "axes.labelsize": FONTSIZE,
            "xtick.labelsize": FONTSIZE - 1,
            "ytick.labelsize": FONTSIZE - 1,
            "legend.fontsize": FONTSIZE - 1,
            "figure.figsize": (WIDTH, WIDTH * 0.6),
            "figure.dpi": 100,
            "savefig.dpi": 200,
            "axes.spines.top": False,
            "axes.spines.right": False,
            "axes.grid": True,
            "grid.color": "0.9",
            "lines.linewidth": 1.2,
        }
    )


def plot_curves(curves_csv: str | Path, out: str | Path, metric: str = "s.top1") -> Path:
    """One line per variant, averaged over seeds, for a single metric."""
    init_plt()
    series = defaultdict(lambda: defaultdict(list))
    with open(curves_csv, encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            if row["metric"] == metric:
                series[row["variant"]][int(row["step"])].append(float(row["value"]))
    fig, ax = plt.subplots()
    for variant, by_step in series.items():
        steps = sorted(by_step)
        ax.plot(steps, [sum(by_step[s]) / len(by_step[s]) for s in steps], marker="o", ms=2, label=variant)
    ax.set_xlabel("step")
    ax.set_ylabel(metric)
    if series:
        ax.legend(frameon=False)
    out = Path(out)
    fig.tight_layout()
    fig.savefig(out)
    plt.close(fig)
    return out


def plot_table(table_csv: str | Path, out: str | Path, metric: str = "s_final_top1") -> Path:
    """Bar per variant from the aggregate rows, with one-stddev error bars."""
    init_plt()
    names, means, stds = [], [], []
    with open(table_csv, encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            if row["seed"] != "aggregate" or not row[metric]:
                continue
            names.append(row["variant"])
            means.append(float(row[metric]))
            stds.append(float(row[f"{metric}_std"] or 0.0))
    fig, ax = plt.subplots()
    ax.bar(range(len(names)), means, yerr=stds, capsize=3, color="0.6", edgecolor="black", linewidth=0.6)
    ax.set_xticks(range(len(names)), names, rotation=30, ha="right")
    ax.set_ylabel(metric)
    out = Path(out)
    fig.tight_layout()
    fig.savefig(out)
    plt.close(fig)
    return out
