"""Interval plots for exported posterior summaries."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_intervals(table: list[dict], path, title: str = "") -> Path:
    """Median with shaded 50% and 95% intervals, one series per quantity.

    ``table`` rows carry ``quantity, index, median, lo50, hi50, lo95, hi95``.
    Series with a single index (scalars) are drawn as points with error bars.
    """
    path = Path(path)
    series: dict[str, list[dict]] = {}
    for row in table:
        series.setdefault(row["quantity"], []).append(row)
    fig, ax = plt.subplots(figsize=(7, 4))
    scalars = [q for q, rows in series.items() if len(rows) == 1]
    for q, rows in series.items():
        if q in scalars:
            continue
        idx = np.array([r["index"] for r in rows], dtype=float)
        get = lambda k: np.array([r[k] for r in rows], dtype=float)  # noqa: E731
        line, = ax.plot(idx, get("median"), marker="o", label=q)
        ax.fill_between(idx, get("lo95"), get("hi95"), color=line.get_color(), alpha=0.15)
        ax.fill_between(idx, get("lo50"), get("hi50"), color=line.get_color(), alpha=0.35)
    if scalars:
        pos = np.arange(len(scalars))
        rows = [series[q][0] for q in scalars]
        med = np.array([r["median"] for r in rows])
        ax.errorbar(pos, med, yerr=[med - [r["lo95"] for r in rows], [r["hi95"] for r in rows] - med],
                    fmt="none", elinewidth=1, color="grey")
        ax.errorbar(pos, med, yerr=[med - [r["lo50"] for r in rows], [r["hi50"] for r in rows] - med],
                    fmt="o", elinewidth=3, color="black")
        ax.set_xticks(pos, scalars, rotation=60, ha="right", fontsize=7)
    else:
        ax.set_xlabel("period")
        ax.legend(fontsize=8)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
