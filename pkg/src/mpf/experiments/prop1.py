"""Empirical L_r errors of filter estimates as the observation noise vanishes.

For a fixed particle count the error of the low-noise filter estimate
``pi^{delta,N}(phi)`` around the exact filter ``pi^delta(phi)`` converges to
the error of the degenerate filter around ``pi^*(phi)``. The harness
estimates these errors by replication on a small linear Gaussian model,
with replicate ``j`` using the same random stream at every ``delta``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from mpf.engine import Mode, ResamplePolicy, Scheme, pf_run
from mpf.experiments.io import csv_text, write_atomic
from mpf.experiments.kalman import kalman_filter
from mpf.models import ObservationSpec, lgm_transition, simulate_ssm
from mpf.proposals import ChartKernel

PROP1_HEADER = ["delta", "lr_error", "se", "gap", "gap_se"]


@dataclass
class Prop1Table:
    deltas: np.ndarray
    errors: np.ndarray
    ses: np.ndarray
    gaps: np.ndarray
    gap_ses: np.ndarray
    r: float
    raw: np.ndarray  # (n_deltas, n_reps) signed errors

    def to_csv_text(self) -> str:
        rows = zip(self.deltas, self.errors, self.ses, self.gaps, self.gap_ses)
        return csv_text(PROP1_HEADER, rows)

    def write(self, path) -> Path:
        return write_atomic(path, self.to_csv_text())

    def row(self, delta):
        i = int(np.flatnonzero(self.deltas == delta)[0])
        return self.errors[i], self.ses[i], self.gaps[i], self.gap_ses[i]


def small_lgm(d_x=2):
    B = 0.9 * np.eye(d_x)
    Omega = np.eye(d_x)
    A = np.full((1, d_x), 1.0 / d_x)
    return B, Omega, A


def lr_error(err, r):
    """``E|err|^r`` to the power ``1/r`` and its delta-method standard error."""
    s = np.abs(err) ** r
    m = s.mean()
    n = len(s)
    if m == 0:
        return 0.0, 0.0, s, 0.0
    deriv = m ** (1.0 / r - 1.0) / r
    return float(m ** (1.0 / r)), float(deriv * s.std(ddof=1) / np.sqrt(n)), s, deriv


def paired_gap(err_a, err_b, r):
    """Difference of two L_r errors from paired replicates and its standard error."""
    ea, _, sa, da = lr_error(err_a, r)
    eb, _, sb, db = lr_error(err_b, r)
    lin = da * sa - db * sb
    se = float(lin.std(ddof=1) / np.sqrt(len(lin))) if len(lin) > 1 else 0.0
    return ea - eb, se


def prop1_gap_harness(
    phi=None,
    n_particles=50,
    r=2.0,
    deltas=(1e-2, 1e-4, 1e-6, 1e-8),
    n_reps=2000,
    seed=0,
    n_steps=5,
    d_x=2,
    component=1,
    data_seed=None,
) -> Prop1Table:
    """L_r errors of the final-time filter estimate for each delta plus ``delta = 0``.

    ``phi`` maps an ``(N, d_x)`` array to ``(N,)`` and must be affine (for
    instance a coordinate or a constant): the exact reference is ``phi`` at
    the Kalman mean. The default is the ``component``-th coordinate
    (1-based). Data are simulated once without observation noise and shared
    by all deltas.
    """
    B, Omega, A = small_lgm(d_x)
    transition = lgm_transition(B, Omega)
    x0 = np.zeros(d_x)
    obs0 = ObservationSpec(A=A, delta=0.0)
    traj = simulate_ssm(transition, obs0, x0, n_steps, seed if data_seed is None else data_seed)
    ys = traj.observations
    if phi is None:
        c = component - 1
        phi = lambda x: x[:, c]  # noqa: E731
    policy = ResamplePolicy(Scheme.multinomial, Mode.every_step)
    all_deltas = [float(d) for d in deltas if d > 0] + [0.0]
    errs = np.empty((len(all_deltas), n_reps))
    for i, delta in enumerate(all_deltas):
        states, _ = kalman_filter(B, Omega, A, np.eye(1), delta, ys, x0)
        ref_mean = states[-1].mean
        ref = float(phi(ref_mean[None, :])[0])
        obs = obs0.with_delta(delta)
        proposal = "product" if delta > 0 else "optimal"
        kernel = ChartKernel(transition, obs, ys, x0, n_particles, proposal=proposal)
        for j in range(n_reps):
            est = {}

            def grab(n, cloud, x, w):
                if n == n_steps:
                    est["v"] = float(w @ phi(x))

            pf_run(kernel, n_steps, n_particles, policy, seed=_rep_seed(seed, j), observers=(grab,))
            errs[i, j] = est["v"] - ref
    errors, ses, gaps, gap_ses = [], [], [], []
    for i in range(len(all_deltas)):
        e, se, _, _ = lr_error(errs[i], r)
        g, gse = paired_gap(errs[i], errs[-1], r)
        errors.append(e)
        ses.append(se)
        gaps.append(g)
        gap_ses.append(gse)
    return Prop1Table(np.array(all_deltas), np.array(errors), np.array(ses), np.array(gaps), np.array(gap_ses), r, errs)


def _rep_seed(seed, j):
    return int(np.random.SeedSequence(entropy=seed, spawn_key=(j,)).generate_state(1, np.uint64)[0])
