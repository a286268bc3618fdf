"""Delta sweeps: median ESS and mean-estimate MSE per (filter, delta)."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from mpf.experiments.config import ExperimentConfig
from mpf.experiments.io import csv_text, read_csv, write_atomic
from mpf.experiments.problems import build_problem
from mpf.experiments.runner import run_filter

DEFAULT_DELTAS = [10.0 ** -k for k in range(1, 13)]
SWEEP_HEADER = ["filter", "delta", "median_ess", "mse"]


@dataclass(frozen=True)
class SweepRow:
    filter: str
    delta: float
    median_ess: float
    mse: float
    collapsed_at: int | None = None


@dataclass
class SweepResult:
    rows: list[SweepRow]

    def to_csv_text(self) -> str:
        return csv_text(SWEEP_HEADER, ([r.filter, r.delta, r.median_ess, r.mse] for r in self.rows))

    def write(self, path) -> Path:
        return write_atomic(path, self.to_csv_text())

    @classmethod
    def from_csv(cls, path) -> "SweepResult":
        _, body = read_csv(path)
        return cls([SweepRow(r[0], float(r[1]), float(r[2]), float(r[3])) for r in body])

    def get(self, filter_id, delta) -> SweepRow:
        for r in self.rows:
            if r.filter == filter_id and r.delta == delta:
                return r
        raise KeyError((filter_id, delta))

    def series(self, filter_id):
        rows = sorted((r for r in self.rows if r.filter == filter_id), key=lambda r: -r.delta)
        return np.array([r.delta for r in rows]), np.array([r.median_ess for r in rows]), np.array([r.mse for r in rows])


def worker_count(n_tasks: int, workers: int | None = None) -> int:
    """Number of worker processes, capped by ``MPF_THREADS`` when set."""
    if workers is None:
        workers = os.cpu_count() or 1
    cap = os.environ.get("MPF_THREADS")
    if cap:
        workers = min(workers, max(1, int(cap)))
    return max(1, min(workers, n_tasks))


def sweep_cells(filters, deltas) -> list[tuple[str, float]]:
    """Cells of a sweep; the degenerate filter runs once, at ``delta = 0``."""
    cells = []
    for f in filters:
        if f == "degenerate":
            cells.append((f, 0.0))
        else:
            cells.extend((f, float(d)) for d in deltas if d > 0)
    return cells


def run_cell(config: ExperimentConfig, filter_id: str, delta: float) -> SweepRow:
    """One sweep cell. Data and filter seeds are shared by all cells (coupling)."""
    problem = build_problem(config.model, config.n_steps, config.d_x)
    traj = problem.simulate(delta, config.effective_data_seed)
    res = run_filter(
        problem, filter_id, traj, delta, config.n_particles, config.resample.policy(), config.seed,
        config.level, config.low_noise_proposal,
    )
    ess_trace = list(res.ess)
    if res.collapsed_at is not None:
        # a collapsed step has no usable particle: count it (and the rest) as ESS 0
        ess_trace += [0.0] * (traj.n_steps - len(ess_trace))
    ref = problem.reference_means(traj, delta)[: res.n_steps]
    mse = float(np.mean((res.means - ref) ** 2)) if res.n_steps else float("nan")
    return SweepRow(filter_id, delta, float(np.median(ess_trace)), mse, res.collapsed_at)


def _run_cell_args(args):
    return run_cell(*args)


def sweep_delta(config: ExperimentConfig, deltas=None, workers: int | None = None) -> SweepResult:
    """Run every (filter, delta) cell; rows follow the cell order, whatever the worker count."""
    deltas = DEFAULT_DELTAS if deltas is None else list(deltas)
    cells = sweep_cells(config.sweep_filters, deltas)
    tasks = [(config, f, d) for f, d in cells]
    n_workers = worker_count(len(tasks), workers)
    if n_workers == 1:
        rows = [_run_cell_args(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            rows = list(pool.map(_run_cell_args, tasks))
    return SweepResult(rows)
