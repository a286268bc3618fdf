"""Discrete-time state-space models with linear observations.

Hidden chain ``X_n = f(X_{n-1}) + nu_n`` with ``nu_n ~ N(0, Omega)`` and
observations ``Y_n = A X_n + delta**0.5 eps_n`` with ``eps_n ~ N(0, Sigma)``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from mpf.errors import ConditioningError, RankDeficiencyError
from mpf.geometry import RANK_RTOL

LOG_2PI = float(np.log(2.0 * np.pi))


def _cholesky(cov, what="covariance"):
    cov = np.asarray(cov, dtype=float)
    if not np.allclose(cov, cov.T, atol=1e-12, rtol=0):
        raise ConditioningError(f"{what} is not symmetric")
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise ConditioningError(f"{what} is not positive definite") from exc


def gaussian_log_density(x, mean, cov):
    """Log of the ``N(mean, cov)`` density; ``x`` and ``mean`` broadcast over rows."""
    L = _cholesky(cov)
    r = np.asarray(x, dtype=float) - np.asarray(mean, dtype=float)
    sol = np.linalg.solve(L, np.moveaxis(r, -1, 0)) if r.ndim > 1 else np.linalg.solve(L, r)
    quad = np.sum(sol**2, axis=0)
    d = L.shape[0]
    return -0.5 * quad - np.sum(np.log(np.diag(L))) - 0.5 * d * LOG_2PI


def batched_gaussian_log_density(x, mean, cov):
    """Row-wise Gaussian log-density with a per-row covariance ``cov[i]``."""
    r = np.asarray(x, dtype=float) - np.asarray(mean, dtype=float)
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise ConditioningError("covariance is not positive definite") from exc
    sol = np.linalg.solve(L, r[..., None])[..., 0]
    logdet = 2.0 * np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)
    return -0.5 * np.sum(sol**2, axis=-1) - 0.5 * logdet - 0.5 * r.shape[-1] * LOG_2PI


@dataclass(frozen=True)
class GaussianTransition:
    """``x_n | x_{n-1} ~ N(mean_map(x_{n-1}), covariance)``.

    ``mean_map`` must accept a batch of states as an ``(N, d_x)`` array.
    """

    mean_map: Callable[[np.ndarray], np.ndarray]
    covariance: np.ndarray
    chol: np.ndarray = field(init=False, repr=False)
    log_det: float = field(init=False)

    def __post_init__(self):
        cov = np.asarray(self.covariance, dtype=float)
        L = _cholesky(cov, "transition covariance")
        object.__setattr__(self, "covariance", cov)
        object.__setattr__(self, "chol", L)
        object.__setattr__(self, "log_det", float(2.0 * np.sum(np.log(np.diag(L)))))

    @property
    def dim(self) -> int:
        return self.covariance.shape[0]

    @property
    def precision(self) -> np.ndarray:
        return cho_solve((self.chol, True), np.eye(self.dim))

    def log_density(self, x, x_prev):
        return gaussian_log_density(x, self.mean_map(np.atleast_2d(x_prev)).squeeze(), self.covariance)

    def sample(self, x_prev, rng):
        x_prev = np.atleast_2d(x_prev)
        noise = rng.standard_normal(x_prev.shape) @ self.chol.T
        return self.mean_map(x_prev) + noise


@dataclass(frozen=True)
class ObservationSpec:
    """``Y_n = A X_n + delta**0.5 eps_n`` with ``eps_n ~ N(0, Sigma)``.

    ``A`` may be a single matrix or a callable ``n -> A_n``.
    """

    A: np.ndarray | Callable[[int], np.ndarray]
    Sigma: np.ndarray | None = None
    delta: float = 0.0

    def __post_init__(self):
        if self.delta < 0:
            raise ValueError("delta must be nonnegative")
        if not callable(self.A):
            A = np.atleast_2d(np.asarray(self.A, dtype=float))
            object.__setattr__(self, "A", A)
            s = np.linalg.svd(A, compute_uv=False)
            if s[-1] <= RANK_RTOL * s[0]:
                raise RankDeficiencyError("observation matrix is rank deficient")
        d_y = self.matrix(1).shape[0]
        Sigma = np.eye(d_y) if self.Sigma is None else np.atleast_2d(np.asarray(self.Sigma, float))
        _cholesky(Sigma, "observation noise covariance")
        object.__setattr__(self, "Sigma", Sigma)

    def matrix(self, n: int) -> np.ndarray:
        return np.atleast_2d(np.asarray(self.A(n), dtype=float)) if callable(self.A) else self.A

    @property
    def d_y(self) -> int:
        return self.Sigma.shape[0]

    def noise_log_density(self, eps):
        """Log-density ``p_n`` of the standardized noise ``eps``."""
        return gaussian_log_density(eps, np.zeros(self.d_y), self.Sigma)

    def with_delta(self, delta: float) -> "ObservationSpec":
        return ObservationSpec(A=self.A, Sigma=self.Sigma, delta=delta)


def lgm_transition(B, Omega) -> GaussianTransition:
    """Linear Gaussian transition ``x -> N(B x, Omega)``."""
    B = np.asarray(B, dtype=float)

    def mean_map(x):
        return np.asarray(x) @ B.T

    return GaussianTransition(mean_map=mean_map, covariance=Omega)


def lorenz96_map(x, F0, dt):
    """One explicit Euler step of Lorenz-96 with cyclic indices.

    ``F_i(x) = x_i + dt * ((x_{i+1} - x_{i-2}) x_{i-1} - x_i + F0)``.
    Works on a single state or on rows of a batch.
    """
    x = np.asarray(x, dtype=float)
    if x.shape[-1] < 4:
        raise ValueError("Lorenz-96 needs at least 4 components")
    xp1 = np.roll(x, -1, axis=-1)
    xm1 = np.roll(x, 1, axis=-1)
    xm2 = np.roll(x, 2, axis=-1)
    return x + dt * ((xp1 - xm2) * xm1 - x + F0)


def lorenz96_transition(d_x=8, F0=8.0, dt=1e-2, noise_var=None) -> GaussianTransition:
    noise_var = dt if noise_var is None else noise_var
    return GaussianTransition(
        mean_map=lambda x: lorenz96_map(x, F0, dt), covariance=noise_var * np.eye(d_x)
    )


def selection_matrix(d_x, components):
    """Rows of the identity picking the given (0-based) components."""
    A = np.zeros((len(components), d_x))
    A[np.arange(len(components)), components] = 1.0
    return A


@dataclass
class Trajectory:
    """Simulated states ``x_0..x_n`` and observations ``y_1..y_n``."""

    times: np.ndarray
    states: np.ndarray
    observations: np.ndarray
    noise: np.ndarray | None = None
    seed: int | None = None

    def __post_init__(self):
        if len(self.states) != len(self.times) or len(self.observations) != len(self.times) - 1:
            raise ValueError("inconsistent trajectory lengths")

    @property
    def n_steps(self) -> int:
        return len(self.times) - 1

    def to_csv(self, path) -> None:
        path = Path(path)
        d_x = self.states.shape[1]
        d_y = self.observations.shape[1]
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"x_{i + 1}" for i in range(d_x)] + [f"y_{i + 1}" for i in range(d_y)])
            for k, t in enumerate(self.times):
                obs = [""] * d_y if k == 0 else [repr(float(v)) for v in self.observations[k - 1]]
                w.writerow([repr(float(t))] + [repr(float(v)) for v in self.states[k]] + obs)
        manifest = {"seed": self.seed, "n_steps": self.n_steps, "d_x": d_x, "d_y": d_y}
        path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True))

    @classmethod
    def from_csv(cls, path) -> "Trajectory":
        path = Path(path)
        with path.open() as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        d_x = sum(h.startswith("x_") for h in header)
        times = np.array([float(r[0]) for r in body])
        states = np.array([[float(v) for v in r[1 : 1 + d_x]] for r in body])
        obs = np.array([[float(v) for v in r[1 + d_x :]] for r in body[1:]])
        seed = None
        side = path.with_suffix(".json")
        if side.exists():
            seed = json.loads(side.read_text()).get("seed")
        return cls(times=times, states=states, observations=obs, seed=seed)


def simulate_ssm(transition: GaussianTransition, obs: ObservationSpec, x0, n_steps, seed) -> Trajectory:
    """Simulate ``n_steps`` transitions and observations from ``x0``."""
    rng = np.random.default_rng(seed)
    x0 = np.asarray(x0, dtype=float)
    states = [x0]
    ys, eps_all = [], []
    eps_chol = np.linalg.cholesky(obs.Sigma)
    for n in range(1, n_steps + 1):
        x = transition.sample(states[-1], rng)[0]
        eps = eps_chol @ rng.standard_normal(obs.d_y)
        states.append(x)
        eps_all.append(eps)
        ys.append(obs.matrix(n) @ x + np.sqrt(obs.delta) * eps)
    return Trajectory(
        times=np.arange(n_steps + 1, dtype=float),
        states=np.array(states),
        observations=np.array(ys),
        noise=np.array(eps_all),
        seed=seed,
    )


def observation_log_likelihood(obs: ObservationSpec, n, x, y):
    """``log h_n(y | x)`` for rows of ``x``; requires ``delta > 0``."""
    A = obs.matrix(n)
    r = y - np.asarray(x) @ A.T
    return gaussian_log_density(r, np.zeros(obs.d_y), obs.delta * obs.Sigma)


def solve_spd(mat, rhs):
    """Solve ``mat @ X = rhs`` for a symmetric positive definite ``mat``."""
    return cho_solve(cho_factor(mat), rhs)
