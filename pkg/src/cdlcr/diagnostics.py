"""Convergence diagnostics, posterior summaries and draw-file input/output."""
from __future__ import annotations

import csv
import math
from dataclasses import astuple, dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "DiagnosticsError",
    "SummaryRow",
    "SUMMARY_COLUMNS",
    "psrf",
    "summarize",
    "resolve_names",
    "write_summary",
    "read_summary",
    "write_draws",
    "read_draws",
]

SUMMARY_COLUMNS = ("name", "median", "q2.5", "q25", "q75", "q97.5", "psrf", "n_draws")


class DiagnosticsError(ValueError):
    pass


@dataclass
class SummaryRow:
    name: str
    median: float
    q2_5: float
    q25: float
    q75: float
    q97_5: float
    psrf: float
    n_draws: int


def psrf(chains) -> float:
    """Potential scale reduction factor for one scalar, clamped below at 1.

    ``chains`` is a sequence of equal-length draw sequences.  Constant chains
    give 1 when they agree and ``inf`` when they do not.  NaN draws give NaN.
    """
    x = np.asarray(chains, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise DiagnosticsError("psrf needs at least 2 chains; rerun with --chains 2 or more")
    m, n = x.shape
    if n < 2:
        raise DiagnosticsError("psrf needs at least 2 draws per chain")
    if np.isnan(x).any():
        return math.nan
    means = x.mean(axis=1)
    W = float(x.var(axis=1, ddof=1).mean())
    B = float(n * means.var(ddof=1))
    if W == 0.0:
        return 1.0 if B == 0.0 else math.inf
    r = math.sqrt(((n - 1) / n * W + B / n) / W)
    return max(r, 1.0)


def resolve_names(names, available) -> list[str]:
    """Expand labels: exact column names, or a base name such as ``N`` for ``N[1]``, ``N[2]``..."""
    available = list(available)
    if names is None:
        return available
    out, unknown = [], []
    for name in names:
        if name in available:
            out.append(name)
            continue
        group = [c for c in available if c.startswith(name + "[")]
        if group:
            out.extend(group)
        else:
            unknown.append(name)
    if unknown:
        raise DiagnosticsError(f"unknown labels {unknown}; available: {', '.join(available)}")
    return out


def summarize(draws, names=None) -> list[SummaryRow]:
    """Median, central 50% and 95% intervals and psrf per labelled scalar.

    ``draws`` is a :class:`~cdlcr.sampler.PosteriorDraws` (or anything with
    ``columns`` and ``chains``).  Quantiles interpolate linearly between
    order statistics and ignore NaN draws (per-capita rates in periods with
    nobody alive).  psrf is NaN for single-chain input.
    """
    chains = [np.asarray(c, dtype=float) for c in draws.chains]
    if not chains or any(c.shape[0] == 0 for c in chains):
        raise DiagnosticsError("no draws to summarize")
    labels = resolve_names(names, draws.columns)
    rows = []
    for label in labels:
        k = list(draws.columns).index(label)
        per_chain = [c[:, k] for c in chains]
        pooled = np.concatenate(per_chain)
        kept = pooled[~np.isnan(pooled)]
        if kept.size:
            q = np.quantile(kept, [0.5, 0.025, 0.25, 0.75, 0.975], method="linear")
        else:
            q = np.full(5, np.nan)
        lengths = {len(c) for c in per_chain}
        r = psrf(per_chain) if len(per_chain) > 1 and len(lengths) == 1 and min(lengths) > 1 else math.nan
        rows.append(SummaryRow(label, *map(float, q), r, int(kept.size)))
    return rows


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if math.isnan(v):
        return "NA"
    return repr(float(v))


def write_summary(path, rows) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(SUMMARY_COLUMNS)
        for row in rows:
            out.writerow([_fmt(v) for v in astuple(row)])
    return path


def read_summary(path) -> list[SummaryRow]:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != SUMMARY_COLUMNS:
            raise DiagnosticsError(f"{path}: not a summary file")
        rows = []
        for rec in reader:
            vals = [float("nan") if v == "NA" else float(v) for v in rec[1:7]]
            rows.append(SummaryRow(rec[0], *vals, int(rec[7])))
    return rows


def write_draws(path, columns, draws) -> Path:
    """Write one chain's draws; floats use ``repr`` so they round-trip exactly."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        # labels such as omega[1,2] contain commas and are quoted
        csv.writer(fh, lineterminator="\n").writerow(columns)
        for row in np.asarray(draws, dtype=float).tolist():
            fh.write(",".join(map(repr, row)) + "\n")
    return path


def read_draws(path) -> tuple[list[str], np.ndarray]:
    path = Path(path)
    with path.open() as fh:
        header = fh.readline()
        if not header.strip():
            raise DiagnosticsError(f"{path}: empty draw file")
        columns = next(csv.reader([header]))
        lines = [ln for ln in fh if ln.strip()]
    data = np.loadtxt(lines, delimiter=",", ndmin=2) if lines else np.zeros((0, len(columns)))
    if data.shape[1] != len(columns):
        raise DiagnosticsError(f"{path}: {data.shape[1]} values per row for {len(columns)} columns")
    return columns, data
