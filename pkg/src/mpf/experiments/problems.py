"""The concrete experiment models and how to build filters for them."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from mpf.bridge import BridgeKernel, SdeSpec, fhn_sde, fhn_statedep_sde, simulate_diffusion
from mpf.experiments.kalman import kalman_filter
from mpf.models import (
    GaussianTransition,
    ObservationSpec,
    Trajectory,
    lgm_transition,
    lorenz96_transition,
    selection_matrix,
    simulate_ssm,
)
from mpf.proposals import BootstrapKernel, ChartKernel, OptimalNaturalKernel

DEFAULT_STEPS = {"lgm": 20, "lorenz96": 400, "fhn": 100, "fhn_statedep": 100}


@dataclass
class Problem:
    """A model, its observation operator and a recipe for data and filters."""

    name: str
    d_x: int
    n_steps: int
    x0: np.ndarray
    A: np.ndarray
    params: dict = field(default_factory=dict)
    transition: GaussianTransition | None = None
    sde: SdeSpec | None = None

    @property
    def is_diffusion(self) -> bool:
        return self.name.startswith("fhn")

    def obs(self, delta) -> ObservationSpec:
        return ObservationSpec(A=self.A, delta=delta)

    def simulate(self, delta, seed) -> Trajectory:
        if self.is_diffusion:
            p = self.params
            t_end = self.n_steps * p["h"]
            return simulate_diffusion(self.sde, self.x0, t_end, p["dt"], p["obs_every"], self.obs(delta), seed)
        return simulate_ssm(self.transition, self.obs(delta), self.x0, self.n_steps, seed)

    def kernel(self, filter_id, traj, delta, n_particles, level=4, low_noise_proposal="optimal"):
        obs = self.obs(delta)
        ys = traj.observations
        if self.is_diffusion:
            variant = {"optimal_natural": "optimal"}.get(filter_id, filter_id)
            return BridgeKernel(self.sde, obs, ys, self.x0, n_particles, self.params["h"], level, variant)
        if filter_id == "bootstrap":
            return BootstrapKernel(self.transition, obs, ys, self.x0, n_particles)
        if filter_id == "optimal_natural":
            return OptimalNaturalKernel(self.transition, obs, ys, self.x0, n_particles)
        if filter_id == "degenerate" and delta != 0:
            raise ValueError("the degenerate filter requires delta = 0")
        if filter_id == "low_noise" and delta == 0:
            raise ValueError("the low-noise filter requires delta > 0")
        proposal = low_noise_proposal if delta > 0 else "optimal"
        return ChartKernel(self.transition, obs, ys, self.x0, n_particles, proposal=proposal)

    def reference_means(self, traj, delta):
        """Kalman means for the linear model, the simulated states otherwise."""
        if self.name == "lgm":
            states, _ = self.kalman(traj, delta)
            return np.array([s.mean for s in states])
        return traj.states[1:]

    def kalman(self, traj, delta):
        return kalman_filter(
            self.params["B"], self.params["Omega"], self.A, np.eye(self.A.shape[0]), delta, traj.observations, self.x0
        )


def lgm_problem(d_x=10, n_steps=20) -> Problem:
    B = 0.9 * np.eye(d_x)
    Omega = np.eye(d_x)
    return Problem(
        "lgm", d_x, n_steps, np.zeros(d_x), np.full((1, d_x), 1.0 / d_x),
        {"B": B, "Omega": Omega}, transition=lgm_transition(B, Omega),
    )


def lorenz96_problem(d_x=8, n_steps=400, F0=8.0, dt=1e-2) -> Problem:
    return Problem(
        "lorenz96", d_x, n_steps, np.ones(d_x), selection_matrix(d_x, [0, 4]),
        {"F0": F0, "dt": dt}, transition=lorenz96_transition(d_x, F0, dt, noise_var=dt),
    )


def fhn_problem(state_dependent=False, n_steps=100, h=0.1, dt=5e-3) -> Problem:
    name = "fhn_statedep" if state_dependent else "fhn"
    return Problem(
        name, 2, n_steps, np.array([0.5, 0.5]), np.array([[1.0, 0.0]]),
        {"h": h, "dt": dt, "obs_every": int(round(h / dt))},
        sde=fhn_statedep_sde() if state_dependent else fhn_sde(),
    )


def build_problem(model, n_steps=None, d_x=None) -> Problem:
    n_steps = n_steps or DEFAULT_STEPS[model]
    if model == "lgm":
        return lgm_problem(d_x or 10, n_steps)
    if model == "lorenz96":
        return lorenz96_problem(d_x or 8, n_steps)
    if model in ("fhn", "fhn_statedep"):
        return fhn_problem(model == "fhn_statedep", n_steps)
    raise ValueError(f"unknown model {model!r}")
