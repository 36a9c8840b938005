"""Figure rendering for exported experiment metrics.

Every plot reads the same delimited rows that ``harness.export_metrics``
writes, so figures can be regenerated from any saved run directory
without rerunning the experiment.  Rendering uses the Agg backend and
writes PNG files next to the CSV.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .harness import read_metrics

_SCHEME_STYLES = {
    "proposed": {"color": "tab:blue", "linewidth": 2.0},
    "no-offload": {"color": "tab:red", "linestyle": "--"},
    "air-only": {"color": "tab:orange", "linestyle": "-."},
    "space-only": {"color": "tab:green", "linestyle": ":"},
    "static": {"color": "tab:purple", "linestyle": "--"},
    "proportional": {"color": "tab:brown", "linestyle": "-."},
}


def accuracy_vs_time(rows: Sequence[Mapping], out_path: str | Path) -> Path:
    """Accuracy against cumulative simulated time, one line per scheme."""
    out = Path(out_path)
    fig, ax = plt.subplots(figsize=(6, 4))
    schemes = sorted({row["scheme"] for row in rows})
    for scheme in schemes:
        points = [(r["sim_time_s"], r["accuracy"]) for r in rows if r["scheme"] == scheme]
        points.sort()
        style = _SCHEME_STYLES.get(scheme, {})
        ax.plot(*zip(*points), label=scheme, **style)
    ax.set_xlabel("simulated time (s)")
    ax.set_ylabel("test accuracy")
    ax.grid(True, alpha=0.3)
    if schemes:
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out, dpi=150)
    plt.close(fig)
    return out


def latency_breakdown(rows: Sequence[Mapping], out_path: str | Path) -> Path:
    """Per-round space, worst-air, and total delays, one panel per scheme."""
    out = Path(out_path)
    schemes = sorted({row["scheme"] for row in rows})
    count = max(len(schemes), 1)
    fig, axes = plt.subplots(1, count, figsize=(4 * count, 3.2), squeeze=False)
    for ax, scheme in zip(axes[0], schemes):
        sub = sorted(
            (r for r in rows if r["scheme"] == scheme), key=lambda r: r["round"]
        )
        rounds = [r["round"] for r in sub]
        ax.plot(rounds, [r["tau_total"] for r in sub], label="total", color="black")
        ax.plot(rounds, [r["tau_space"] for r in sub], label="space", color="tab:blue")
        ax.plot(
            rounds, [r["tau_air_max"] for r in sub], label="air max", color="tab:orange"
        )
        ax.set_title(scheme, fontsize=9)
        ax.set_xlabel("round")
        ax.set_ylabel("seconds")
        ax.grid(True, alpha=0.3)
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out, dpi=150)
    plt.close(fig)
    return out


def sweep_curve(
    values: Sequence[float],
    metric: Sequence[float],
    xlabel: str,
    ylabel: str,
    out_path: str | Path,
) -> Path:
    """One-dimensional sweep result as a marked line."""
    out = Path(out_path)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(values, metric, marker="o")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(out, dpi=150)
    plt.close(fig)
    return out


def layer_share_bars(
    shares_by_value: Mapping[float, Mapping[str, float]],
    xlabel: str,
    out_path: str | Path,
) -> Path:
    """Stacked per-layer residency shares across a swept parameter."""
    out = Path(out_path)
    values = sorted(shares_by_value)
    ground = [shares_by_value[v]["ground"] for v in values]
    air = [shares_by_value[v]["air"] for v in values]
    space = [shares_by_value[v]["space"] for v in values]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    x = range(len(values))
    ax.bar(x, ground, label="ground", color="tab:brown")
    ax.bar(x, air, bottom=ground, label="air", color="tab:orange")
    bottoms = [g + a for g, a in zip(ground, air)]
    ax.bar(x, space, bottom=bottoms, label="space", color="tab:blue")
    ax.set_xticks(list(x), [f"{v:g}" for v in values])
    ax.set_xlabel(xlabel)
    ax.set_ylabel("sample share")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out, dpi=150)
    plt.close(fig)
    return out


def render_run_figures(run_dir: str | Path) -> list[Path]:
    """Render the standard figures for a run directory's metrics.csv."""
    run = Path(run_dir)
    rows = read_metrics(run / "metrics.csv")
    written = []
    if rows:
        written.append(accuracy_vs_time(rows, run / "accuracy_vs_time.png"))
        written.append(latency_breakdown(rows, run / "latency_breakdown.png"))
    return written
