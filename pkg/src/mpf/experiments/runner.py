"""Single experiment runs: simulate, filter, record."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from mpf.engine import FilterResult, pf_run
from mpf.experiments.config import ExperimentConfig
from mpf.experiments.io import canonical_json, git_blob_hash, write_atomic, write_csv
from mpf.experiments.problems import Problem, build_problem
from mpf.models import Trajectory

log = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_COLLAPSE = 0, 1, 2


@dataclass
class RunRecord:
    """Outcome of one filter run together with what is needed to reproduce it."""

    config: dict
    result: FilterResult
    trajectory: Trajectory
    content_hash: str
    wall_clock: float = 0.0
    marginals: dict = field(default_factory=dict)

    @property
    def n_steps(self) -> int:
        return self.result.n_steps

    @property
    def collapsed(self) -> bool:
        return self.result.collapsed_at is not None

    @property
    def exit_code(self) -> int:
        return EXIT_COLLAPSE if self.collapsed else EXIT_OK

    def runrecord_rows(self):
        r = self.result
        for k in range(r.n_steps):
            yield [k + 1, r.ess[k], int(r.resampled[k]), *r.means[k], *r.variances[k]]

    def runrecord_header(self):
        d = self.result.means.shape[1]
        return ["n", "ess", "resampled"] + [f"mean_{i + 1}" for i in range(d)] + [f"var_{i + 1}" for i in range(d)]

    def manifest(self) -> dict:
        r = self.result
        return {
            "config": self.config,
            "content_hash": self.content_hash,
            "n_steps": r.n_steps,
            "collapsed_at": r.collapsed_at,
            "log_likelihood": r.log_likelihood if r.n_steps else None,
            "marginal_files": [f"marginals_{n}.csv" for n in sorted(self.marginals)],
        }

    def write(self, out_dir) -> Path:
        """Write ``runrecord.csv``, ``diagnostics.csv``, marginals, the data and manifests.

        Wall-clock time goes to ``timing.json`` so the other files are
        byte-identical across repeated runs.
        """
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_csv(out / "runrecord.csv", self.runrecord_header(), self.runrecord_rows())
        r = self.result
        write_csv(
            out / "diagnostics.csv",
            ["n", "ess", "resampled", "log_evidence_increment"],
            ([k + 1, r.ess[k], int(r.resampled[k]), r.log_evidence_increments[k]] for k in range(r.n_steps)),
        )
        for n, (values, weights, comps) in sorted(self.marginals.items()):
            write_csv(
                out / f"marginals_{n}.csv",
                ["particle", "weight"] + [f"x_{c}" for c in comps],
                ([i, weights[i], *values[i]] for i in range(len(weights))),
            )
        self.trajectory.to_csv(out / "trajectory.csv")
        write_atomic(out / "manifest.json", json.dumps(self.manifest(), indent=2, sort_keys=True) + "\n")
        write_atomic(out / "timing.json", json.dumps({"wall_clock_seconds": self.wall_clock}) + "\n")
        return out


def content_hash(config: ExperimentConfig, traj: Trajectory) -> str:
    """Git-style hash of the config echo and the simulated data."""
    payload = canonical_json(config.echo()).encode() + b"\n"
    payload += np.ascontiguousarray(traj.states, dtype="<f8").tobytes()
    payload += np.ascontiguousarray(traj.observations, dtype="<f8").tobytes()
    return git_blob_hash(payload)


def marginal_observer(components, times):
    """Observer keeping the weighted particle values at the requested times."""
    store = {}
    cols = [c - 1 for c in components]
    wanted = set(times)

    def observe(n, cloud, x, w):
        if n in wanted:
            store[n] = (np.asarray(x)[:, cols].copy(), np.asarray(w).copy(), list(components))

    return observe, store


def run_filter(problem: Problem, filter_id, traj, delta, n_particles, policy, seed, level=4,
               low_noise_proposal="optimal", observers=()) -> FilterResult:
    kernel = problem.kernel(filter_id, traj, delta, n_particles, level, low_noise_proposal)
    return pf_run(kernel, traj.n_steps, n_particles, policy, seed, observers=observers)


def run_experiment(config: ExperimentConfig, trajectory: Trajectory | None = None) -> RunRecord:
    """Simulate data (unless given), run the configured filter and collect diagnostics."""
    problem = build_problem(config.model, config.n_steps, config.d_x)
    delta = config.scalar_delta
    bad = [c for c in config.marginal_components if c > problem.d_x]
    if bad:
        raise ValueError(f"marginal components {bad} exceed d_x = {problem.d_x}")
    traj = trajectory if trajectory is not None else problem.simulate(delta, config.effective_data_seed)
    observe, store = marginal_observer(config.marginal_components, config.marginal_times)
    t0 = time.perf_counter()
    result = run_filter(
        problem, config.filter, traj, delta, config.n_particles, config.resample.policy(), config.seed,
        config.level, config.low_noise_proposal, observers=(observe,),
    )
    elapsed = time.perf_counter() - t0
    if result.collapsed_at is not None:
        log.warning("run collapsed at step %d", result.collapsed_at)
    return RunRecord(
        config=config.echo(),
        result=result,
        trajectory=traj,
        content_hash=content_hash(config, traj),
        wall_clock=elapsed,
        marginals=store,
    )
