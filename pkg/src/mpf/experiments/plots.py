"""Deterministic SVG figures from run records and sweep tables."""

from __future__ import annotations

import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from scipy.stats import gaussian_kde  # noqa: E402

from mpf.experiments.io import read_csv, write_atomic  # noqa: E402

log = logging.getLogger(__name__)

_RC = {"svg.hashsalt": "mpf", "svg.fonttype": "path", "path.simplify": False}


def _save(fig, path) -> Path:
    import io

    buf = io.StringIO()
    with plt.rc_context(_RC):
        fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    return write_atomic(path, buf.getvalue())


def weighted_kde(values, weights, grid):
    """Gaussian KDE with Silverman's bandwidth computed from weighted samples."""
    values = np.asarray(values, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if np.ptp(values) == 0:
        # degenerate sample: report a narrow bump rather than failing
        values = values + np.linspace(-1e-9, 1e-9, len(values))
    kde = gaussian_kde(values, bw_method="silverman", weights=weights / weights.sum())
    return kde(grid)


def plot_ess(path, n, ess, title="ESS") -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(n, ess, lw=1)
    ax.set_xlabel("time step n")
    ax.set_ylabel("ESS")
    ax.set_title(title)
    return _save(fig, path)


def plot_sweep(path, table: dict) -> Path:
    """ESS and MSE against ``log10(1/delta)``; ``table`` maps filter to (deltas, ess, mse)."""
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(9, 3.5))
    for name, (deltas, ess_v, mse_v) in table.items():
        x = np.where(deltas > 0, -np.log10(np.where(deltas > 0, deltas, 1.0)), np.nan)
        if np.all(np.isnan(x)):
            a1.axhline(ess_v[0], ls="--", lw=1, label=name)
            a2.axhline(mse_v[0], ls="--", lw=1, label=name)
            continue
        a1.plot(x, ess_v, marker="o", lw=1, label=name)
        a2.plot(x, mse_v, marker="o", lw=1, label=name)
    a1.set_xlabel("log10(1/delta)")
    a1.set_ylabel("median ESS")
    a2.set_xlabel("log10(1/delta)")
    a2.set_ylabel("MSE")
    a2.set_yscale("log")
    a1.legend(fontsize=7)
    return _save(fig, path)


def plot_marginal(path, values, weights, label="x") -> Path:
    lo, hi = float(np.min(values)), float(np.max(values))
    pad = 0.1 * (hi - lo) + 1e-6
    grid = np.linspace(lo - pad, hi + pad, 256)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(grid, weighted_kde(values, weights, grid), lw=1)
    ax.set_xlabel(label)
    ax.set_ylabel("density")
    return _save(fig, path)


def plot_paths(path, times, states, means=None) -> Path:
    fig, ax = plt.subplots(figsize=(7, 3.5))
    for i in range(states.shape[1]):
        ax.plot(times, states[:, i], lw=1, label=f"x_{i + 1}")
        if means is not None:
            ax.plot(times[1:], means[:, i], lw=1, ls="--", label=f"mean x_{i + 1}")
    ax.set_xlabel("t")
    ax.legend(fontsize=7)
    return _save(fig, path)


def emit_plots(csv_paths, out_dir=None) -> list[Path]:
    """Render an SVG next to (or into ``out_dir`` for) each recognized CSV.

    Run records give ESS-versus-time, sweep tables ESS/MSE-versus-delta,
    marginal files a weighted KDE. Empty inputs are skipped with a warning.
    """
    written = []
    for p in map(Path, csv_paths):
        header, body = read_csv(p) if p.exists() else ([], [])
        if not body:
            log.warning("%s: no data, nothing to plot", p)
            continue
        target = (Path(out_dir) if out_dir else p.parent) / (p.stem + ".svg")
        if header[:3] == ["n", "ess", "resampled"]:
            n = np.array([float(r[0]) for r in body])
            e = np.array([float(r[1]) for r in body])
            written.append(plot_ess(target, n, e, title=p.stem))
        elif header == ["filter", "delta", "median_ess", "mse"]:
            table = {}
            for r in body:
                table.setdefault(r[0], []).append((float(r[1]), float(r[2]), float(r[3])))
            series = {}
            for name, rows in table.items():
                rows.sort(key=lambda t: -t[0])
                arr = np.array(rows)
                series[name] = (arr[:, 0], arr[:, 1], arr[:, 2])
            written.append(plot_sweep(target, series))
        elif header[:2] == ["particle", "weight"]:
            arr = np.array([[float(v) for v in r] for r in body])
            written.append(plot_marginal(target, arr[:, 2], arr[:, 1], label=header[2]))
        elif header and header[0] == "t":
            d_x = sum(h.startswith("x_") for h in header)
            arr = np.array([[float(v) if v else np.nan for v in r] for r in body])
            written.append(plot_paths(target, arr[:, 0], arr[:, 1 : 1 + d_x]))
        else:
            log.warning("%s: unrecognized CSV layout, skipped", p)
    return written
