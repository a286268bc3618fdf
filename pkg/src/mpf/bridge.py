"""Guided diffusion bridges and bridge particle filters.

Between two observation times ``s1 < s2`` (spacing ``h``) the hidden
diffusion ``dX = mu(X) dt + sigma(X) dW`` is proposed from a guided process
whose drift adds ``Sigma(x) grad_x log f~(x_end | x)``, with ``f~`` the
transition density of an auxiliary Ornstein-Uhlenbeck process obtained by
linearizing ``mu`` at a reference point. The path is discretized on ``2**l``
Euler steps and reweighted by the discretized likelihood ratio

    log R = sum_j L(t_j, X_j) * step + log f~(x_end | x_start).

Everything is vectorized over particles: states are ``(N, d)`` arrays and
matrices are ``(N, d, d)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import expm

from mpf.errors import ConditioningError, LinearizationError, PathDivergenceError, UnsupportedParameterizationError
from mpf.geometry import chart_state, make_chart
from mpf.models import ObservationSpec, Trajectory, batched_gaussian_log_density
from mpf.proposals import chart_log_jacobian, chart_optimal, conjugate_sample, natural_conjugate

EIG_COND_MAX = 1e6


@dataclass(frozen=True)
class SdeSpec:
    """``dX = drift(X) dt + diffusion(X) dW`` with batched callables.

    ``drift``: ``(N, d) -> (N, d)``; ``diffusion``: ``(N, d) -> (N, d, d)``;
    ``jacobian`` (optional): ``(N, d) -> (N, d, d)``.
    """

    drift: Callable[[np.ndarray], np.ndarray]
    diffusion: Callable[[np.ndarray], np.ndarray]
    dim: int
    jacobian: Callable[[np.ndarray], np.ndarray] | None = None
    constant_diffusion: bool = False
    name: str = "sde"

    def sigma_sq(self, x):
        s = self.diffusion(np.atleast_2d(x))
        return s @ np.swapaxes(s, -1, -2)


def fhn_sde(alpha=0.1, gamma=1.0, beta=0.2, sigma0=0.1) -> SdeSpec:
    """FitzHugh-Nagumo with constant diffusion ``sigma0 * I``."""

    def drift(x):
        x1, x2 = x[..., 0], x[..., 1]
        return np.stack([(x1 - x1**3 - x2) / alpha, gamma * x1 - x2 + beta], axis=-1)

    def jac(x):
        x1 = x[..., 0]
        J = np.empty(x.shape[:-1] + (2, 2))
        J[..., 0, 0] = (1 - 3 * x1**2) / alpha
        J[..., 0, 1] = -1 / alpha
        J[..., 1, 0] = gamma
        J[..., 1, 1] = -1.0
        return J

    def diffusion(x):
        return np.broadcast_to(sigma0 * np.eye(2), x.shape[:-1] + (2, 2)).copy()

    return SdeSpec(drift, diffusion, 2, jacobian=jac, constant_diffusion=True, name="fhn")


def fhn_statedep_sde(alpha=0.1, gamma=1.0, beta=0.2, sigma1=0.1, sigma2=0.1) -> SdeSpec:
    """FitzHugh-Nagumo with ``sigma(x) = diag(s1 sqrt(x1^2+1), s2 sqrt(x2^2+1))``."""
    base = fhn_sde(alpha, gamma, beta)

    def diffusion(x):
        out = np.zeros(x.shape[:-1] + (2, 2))
        out[..., 0, 0] = sigma1 * np.sqrt(x[..., 0] ** 2 + 1)
        out[..., 1, 1] = sigma2 * np.sqrt(x[..., 1] ** 2 + 1)
        return out

    return SdeSpec(base.drift, diffusion, 2, jacobian=base.jacobian, name="fhn_statedep")


def linear_sde(B, sigma) -> SdeSpec:
    """``dX = B X dt + sigma dW`` with constant matrices."""
    B = np.atleast_2d(np.asarray(B, dtype=float))
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    d = B.shape[0]
    return SdeSpec(
        drift=lambda x: x @ B.T,
        diffusion=lambda x: np.broadcast_to(sigma, x.shape[:-1] + (d, d)).copy(),
        dim=d,
        jacobian=lambda x: np.broadcast_to(B, x.shape[:-1] + (d, d)).copy(),
        constant_diffusion=True,
        name="linear",
    )


def numerical_jacobian(drift, x, eps=1e-6):
    """Central-difference Jacobian of a batched drift, shape ``(N, d, d)``."""
    x = np.atleast_2d(x)
    d = x.shape[-1]
    cols = []
    for k in range(d):
        e = np.zeros(d)
        e[k] = eps
        cols.append((drift(x + e) - drift(x - e)) / (2 * eps))
    return np.stack(cols, axis=-1)


def deterministic_flow(sde: SdeSpec, x, h, steps=20):
    """Euler integration of ``dx/dt = mu(x)`` over a time ``h``."""
    x = np.array(np.atleast_2d(x), dtype=float)
    dt = h / steps
    for _ in range(steps):
        x = x + sde.drift(x) * dt
    return x


def _phi1(a, tau):
    """``(exp(a tau) - 1) / a`` with the ``a -> 0`` limit ``tau``."""
    small = np.abs(a) * tau < 1e-12
    a_safe = np.where(small, 1.0, a)
    return np.where(small, tau, np.expm1(a_safe * tau) / a_safe)


@dataclass
class AuxiliaryOu:
    """Linearized auxiliary process ``dX~ = (mu_ref + J (X~ - x_ref)) dt + sigma~ dW``.

    Batched over particles. Transition moments over a time ``tau`` are
    ``m = exp(J tau) x + c(tau)`` with ``c(tau) = int_0^tau exp(J s) ds (mu_ref - J x_ref)``
    and ``Q(tau) = int_0^tau exp(J s) Sigma~ exp(J' s) ds``, evaluated in the
    eigenbasis of ``J``. Particles whose eigenvector matrix is
    ill-conditioned fall back to Van Loan block exponentials.
    """

    x_ref: np.ndarray
    mu_ref: np.ndarray
    J: np.ndarray
    sigma_tilde_sq: np.ndarray
    _eig: tuple = field(init=False, repr=False)

    def __post_init__(self):
        self.x_ref = np.atleast_2d(self.x_ref)
        self.mu_ref = np.atleast_2d(self.mu_ref)
        n, d = self.x_ref.shape
        self.J = np.broadcast_to(self.J, (n, d, d))
        self.sigma_tilde_sq = np.broadcast_to(self.sigma_tilde_sq, (n, d, d))
        lam, P = np.linalg.eig(self.J)
        cond = np.linalg.cond(P)
        bad = ~np.isfinite(cond) | (cond > EIG_COND_MAX)
        Pinv = np.linalg.inv(np.where(bad[:, None, None], np.eye(d), P))
        S = Pinv @ self.sigma_tilde_sq @ np.swapaxes(Pinv, -1, -2)
        g = np.einsum("nij,nj->ni", Pinv, self.mu_ref - np.einsum("nij,nj->ni", self.J, self.x_ref))
        self._eig = (lam, P, Pinv, S, g, bad)

    @property
    def size(self):
        return self.x_ref.shape[0]

    @property
    def dim(self):
        return self.x_ref.shape[1]

    def drift(self, x):
        return self.mu_ref + np.einsum("nij,nj->ni", self.J, x - self.x_ref)

    def moments(self, tau):
        """``(E, c, Q)`` with ``E = exp(J tau)``; the mean from ``x`` is ``E x + c``."""
        lam, P, Pinv, S, g, bad = self._eig
        el = np.exp(lam * tau)
        E = np.real(np.einsum("nij,nj,njk->nik", P, el, Pinv))
        c = np.real(np.einsum("nij,nj->ni", P, _phi1(lam, tau) * g))
        pair = lam[:, :, None] + lam[:, None, :]
        Q = np.real(P @ (S * _phi1(pair, tau)) @ np.swapaxes(P, -1, -2))
        if np.any(bad):
            Eb, cb, Qb = _van_loan(self.J[bad], self.mu_ref[bad], self.x_ref[bad], self.sigma_tilde_sq[bad], tau)
            E, c, Q = E.copy(), c.copy(), Q.copy()
            E[bad], c[bad], Q[bad] = Eb, cb, Qb
        return E, c, 0.5 * (Q + np.swapaxes(Q, -1, -2))

    def transition(self, x, tau):
        """Mean and covariance of ``X~_{t+tau}`` given ``X~_t = x``."""
        E, c, Q = self.moments(tau)
        return np.einsum("nij,nj->ni", E, np.atleast_2d(x)) + c, Q

    def log_density(self, x_end, x, tau):
        m, Q = self.transition(x, tau)
        return batched_gaussian_log_density(x_end, m, Q)


def _van_loan(J, mu_ref, x_ref, Sig, tau):
    n, d, _ = J.shape
    M = np.zeros((n, 2 * d, 2 * d))
    M[:, :d, :d] = -J
    M[:, :d, d:] = Sig
    M[:, d:, d:] = np.swapaxes(J, -1, -2)
    F = expm(M * tau)
    E = np.swapaxes(F[:, d:, d:], -1, -2)
    Q = E @ F[:, :d, d:]
    G = np.zeros((n, d + 1, d + 1))
    G[:, :d, :d] = J
    G[:, :d, d] = mu_ref - np.einsum("nij,nj->ni", J, x_ref)
    c = expm(G * tau)[:, :d, d]
    return E, c, Q


def linearize(sde: SdeSpec, x_start, h, steps=20, sigma_tilde_sq=None, strict=False, time_index=None) -> AuxiliaryOu:
    """Auxiliary OU process linearized at the deterministic flow endpoint.

    ``x_ref`` is ``x_start`` pushed through ``steps`` Euler steps of
    ``dx/dt = mu(x)`` over ``h``; ``J`` is the analytic Jacobian there (or
    central differences with step ``1e-6``). ``sigma_tilde_sq`` defaults to
    ``Sigma(x_ref)``.

    With ``strict`` a singular or non-diagonalizable ``J`` raises
    :class:`LinearizationError`; otherwise the moments stay well defined
    through the ``phi1`` limit and the Van Loan fallback.
    """
    x_ref = deterministic_flow(sde, x_start, h, steps)
    J = sde.jacobian(x_ref) if sde.jacobian is not None else numerical_jacobian(sde.drift, x_ref)
    if strict:
        check_jacobian(J, time_index)
    if sigma_tilde_sq is None:
        sigma_tilde_sq = sde.sigma_sq(x_ref)
    return AuxiliaryOu(x_ref=x_ref, mu_ref=sde.drift(x_ref), J=J, sigma_tilde_sq=sigma_tilde_sq)


def check_jacobian(J, time_index=None):
    """Raise unless every ``J`` is invertible and has well-conditioned eigenvectors."""
    J = np.asarray(J, dtype=float)
    J = J.reshape((-1,) + J.shape[-2:])
    where = "" if time_index is None else f" at time step {time_index}"
    if np.any(np.abs(np.linalg.det(J)) <= 1e-12):
        raise LinearizationError(f"singular drift Jacobian{where}")
    cond = np.linalg.cond(np.linalg.eig(J)[1])
    if np.any(~np.isfinite(cond) | (cond > EIG_COND_MAX)):
        raise LinearizationError(f"drift Jacobian is not diagonalizable{where}")


def write_path_csv(path_file, paths, t0, grid: BridgeGrid):
    """Dump guided paths (``(N, 2**l + 1, d)``) as rows ``particle, t, x_1..x_d``."""
    from mpf.experiments.io import write_csv

    N, M1, d = paths.shape
    times = t0 + grid.spacing * np.arange(M1)
    rows = ([i, times[j], *paths[i, j]] for i in range(N) for j in range(M1))
    return write_csv(path_file, ["particle", "t"] + [f"x_{k + 1}" for k in range(d)], rows)


def with_sigma(aux: AuxiliaryOu, sigma_tilde_sq) -> AuxiliaryOu:
    """Same linearization, different auxiliary diffusion."""
    return AuxiliaryOu(x_ref=aux.x_ref, mu_ref=aux.mu_ref, J=aux.J, sigma_tilde_sq=sigma_tilde_sq)


def kronecker_psi(J, Sigma):
    """Solve ``vec(Psi) = (I kron J + J kron I)^-1 vec(Sigma)`` (column-major vec)."""
    J = np.atleast_2d(J)
    d = J.shape[0]
    I = np.eye(d)
    K = np.kron(I, J) + np.kron(J, I)
    vec = np.linalg.solve(K, np.asarray(Sigma, dtype=float).reshape(-1, order="F"))
    return vec.reshape(d, d, order="F")


def ou_transition(J, mu_ref, x_ref, Sigma, x, h, strict=True):
    """Closed-form OU transition ``(m, Q)`` for a single auxiliary process.

    ``m = exp(Jh) x + J^-1 (exp(Jh) - I)(mu_ref - J x_ref)`` and
    ``Q = exp(Jh) Psi exp(J'h) - Psi`` with ``Psi`` from the Kronecker system.
    The result is symmetrized; eigenvalues in ``[-1e-12, 0)`` are clamped to
    ``1e-14`` and anything more negative is an error.
    """
    J = np.atleast_2d(np.asarray(J, dtype=float))
    if strict and abs(np.linalg.det(J)) <= 1e-12:
        raise LinearizationError("Jacobian of the auxiliary drift is singular")
    E = expm(J * h)
    d = J.shape[0]
    m = E @ x + np.linalg.solve(J, (E - np.eye(d)) @ (mu_ref - J @ x_ref))
    Psi = kronecker_psi(J, Sigma)
    Q = E @ Psi @ E.T - Psi
    Q = 0.5 * (Q + Q.T)
    w, U = np.linalg.eigh(Q)
    if w.min() < -1e-12:
        raise ConditioningError(f"OU covariance has negative eigenvalue {w.min():.3e}")
    if w.min() <= 0:
        Q = (U * np.maximum(w, 1e-14)) @ U.T
    return m, Q


@dataclass(frozen=True)
class BridgeGrid:
    """``2**level`` Euler steps across an observation interval of length ``h``."""

    level: int
    h: float = 1.0

    @property
    def n_steps(self) -> int:
        return 2**self.level

    @property
    def spacing(self) -> float:
        return self.h / self.n_steps

    def sample_increments(self, rng, n_paths, dim):
        return np.sqrt(self.spacing) * rng.standard_normal((n_paths, self.n_steps, dim))


class BridgeSchedule:
    """Auxiliary moments at every grid time of one interval (remaining time ``h - t_j``)."""

    def __init__(self, aux: AuxiliaryOu, grid: BridgeGrid):
        self.aux = aux
        self.grid = grid
        self._cache = {}

    def at(self, j):
        if j not in self._cache:
            tau = self.grid.h - j * self.grid.spacing
            self._cache[j] = schedule_entry(self.aux, tau)
        return self._cache[j]


def schedule_entry(aux: AuxiliaryOu, tau):
    """``(E, c, Q, Q^-1, hess)`` for a remaining time ``tau``."""
    E, c, Q = aux.moments(tau)
    Qinv = np.linalg.inv(Q)
    Qinv = 0.5 * (Qinv + np.swapaxes(Qinv, -1, -2))
    hess = -np.swapaxes(E, -1, -2) @ Qinv @ E
    return E, c, Q, Qinv, hess


def ou_logdensity_derivs(aux: AuxiliaryOu, t, x, x_end, s2, entry=None):
    """Gradient and Hessian in ``x`` of ``log f~_{t,s2}(x_end | x)``.

    ``score = E' Q^-1 (x_end - E x - c)`` and ``hess = -E' Q^-1 E``.
    """
    if entry is None:
        if not s2 > t:
            raise ValueError("need s2 > t")
        entry = schedule_entry(aux, s2 - t)
    E, c, _, Qinv, hess = entry
    r = x_end - np.einsum("nij,nj->ni", E, np.atleast_2d(x)) - c
    score = np.einsum("nji,njk,nk->ni", E, Qinv, r)
    return score, hess


def guided_drift(sde: SdeSpec, aux, t, x, x_end, s2, entry=None):
    """``mu(x) + Sigma(x) score``."""
    score, _ = ou_logdensity_derivs(aux, t, x, x_end, s2, entry)
    return sde.drift(x) + np.einsum("nij,nj->ni", sde.sigma_sq(x), score)


def log_L(sde: SdeSpec, aux: AuxiliaryOu, t, x, x_end, s2, entry=None):
    """Integrand of the log likelihood ratio between true and guided bridges.

    ``(mu(x) - mu~(x))' score - 0.5 tr[(Sigma(x) - Sigma~)(-hess - score score')]``.
    """
    x = np.atleast_2d(x)
    score, hess = ou_logdensity_derivs(aux, t, x, x_end, s2, entry)
    out = np.einsum("ni,ni->n", sde.drift(x) - aux.drift(x), score)
    if not sde.constant_diffusion:
        dS = sde.sigma_sq(x) - aux.sigma_tilde_sq
        inner = -hess - score[:, :, None] * score[:, None, :]
        out = out - 0.5 * np.einsum("nij,nji->n", dS, inner)
    return out


def build_guided_path(sde: SdeSpec, aux: AuxiliaryOu, x_start, x_end, grid: BridgeGrid, increments, schedule=None):
    """Euler path of the guided bridge, shape ``(N, 2**l + 1, d)``.

    Interior points come from the recursion for ``j = 0 .. 2**l - 2``; the
    first and last points are exactly ``x_start`` and ``x_end``. The last
    Brownian increment is not used.
    """
    x_start = np.atleast_2d(x_start)
    x_end = np.atleast_2d(x_end)
    M = grid.n_steps
    if increments.shape[1] != M:
        raise ValueError(f"expected {M} increments per path, got {increments.shape[1]}")
    schedule = schedule or BridgeSchedule(aux, grid)
    path = np.empty((x_start.shape[0], M + 1, x_start.shape[1]))
    path[:, 0] = x_start
    x = x_start
    dt = grid.spacing
    for j in range(M - 1):
        mu_c = guided_drift(sde, aux, j * dt, x, x_end, grid.h, schedule.at(j))
        x = x + mu_c * dt + np.einsum("nij,nj->ni", sde.diffusion(x), increments[:, j])
        if not np.all(np.isfinite(x)):
            raise PathDivergenceError(j + 1)
        path[:, j + 1] = x
    path[:, M] = x_end
    return path


def log_R_l(sde: SdeSpec, aux: AuxiliaryOu, path, grid: BridgeGrid, schedule=None):
    """``sum_j L(t_j, X_j) * spacing + log f~(X_end | X_start)`` over left endpoints."""
    schedule = schedule or BridgeSchedule(aux, grid)
    M = grid.n_steps
    x_end = path[:, M]
    total = np.zeros(path.shape[0])
    for j in range(M):
        total += log_L(sde, aux, j * grid.spacing, path[:, j], x_end, grid.h, schedule.at(j))
    total *= grid.spacing
    E, c, Q = schedule.at(0)[:3]
    m = np.einsum("nij,nj->ni", E, path[:, 0]) + c
    return total + batched_gaussian_log_density(x_end, m, Q)


def endpoint_proposal(sde: SdeSpec, x_prev, h, substeps=20):
    """Auxiliary process used to propose endpoints.

    For constant diffusion it is the auxiliary process itself. For
    state-dependent diffusion the unknown endpoint in ``sigma~ = sigma(x')`` is
    replaced by the reference point, i.e. ``Sigma~ = Sigma(x_ref)``.
    """
    return linearize(sde, x_prev, h, substeps)


def statedep_proposal_correction(sde: SdeSpec, aux_frozen: AuxiliaryOu, x_prev, x_end, h):
    """Auxiliary process with ``Sigma~ = Sigma(x_end)`` and the weight correction.

    Returns ``(aux_true, log f~_true(x_end|x_prev) - log f~_frozen(x_end|x_prev))``.
    The correction is identically zero for constant diffusion.
    """
    if sde.constant_diffusion:
        return aux_frozen, np.zeros(np.atleast_2d(x_end).shape[0])
    aux_true = with_sigma(aux_frozen, sde.sigma_sq(x_end))
    corr = aux_true.log_density(x_end, x_prev, h) - aux_frozen.log_density(x_end, x_prev, h)
    return aux_true, corr


def bridge_log_weight(sde, aux_true, x_prev, x_end, grid, increments):
    """Build the guided path and return ``(log R, path)``."""
    schedule = BridgeSchedule(aux_true, grid)
    path = build_guided_path(sde, aux_true, x_prev, x_end, grid, increments, schedule)
    return log_R_l(sde, aux_true, path, grid, schedule), path


def diffusion_pf_weight_low_noise(
    z_prev, z_new, chart_prev, chart, increments, sde, aux_true, log_proposal, noise_log_density, grid, x0=None
):
    """``log R(C(u(z',x), w, u(z,x))) + log p(u(z,eps)) - log q(z|z')``."""
    z_new = np.atleast_2d(z_new)
    x_prev = np.atleast_2d(x0) if chart_prev is None else chart_state(chart_prev, np.atleast_2d(z_prev))
    x_prev = np.broadcast_to(x_prev, (z_new.shape[0], x_prev.shape[-1]))
    u = chart.base_point + z_new @ chart.basis.T
    x_end, eps = u[:, : chart.d_x], u[:, chart.d_x:]
    logR, _ = bridge_log_weight(sde, aux_true, x_prev, x_end, grid, increments)
    return logR + noise_log_density(eps) - log_proposal


def diffusion_pf_weight_degenerate(z_prev, z_new, chart_prev, chart, increments, sde, aux_true, log_proposal, grid, x0=None):
    """``log R(C(u*(z'), w, u*(z))) - log q*(z|z')``."""
    z_new = np.atleast_2d(z_new)
    x_prev = np.atleast_2d(x0) if chart_prev is None else chart_state(chart_prev, np.atleast_2d(z_prev))
    x_prev = np.broadcast_to(x_prev, (z_new.shape[0], x_prev.shape[-1]))
    x_end = chart_state(chart, z_new)
    logR, _ = bridge_log_weight(sde, aux_true, x_prev, x_end, grid, increments)
    return logR - log_proposal


def diffusion_pf_weight_natural(
    x_prev, x_new, increments, sde, aux_true, obs: ObservationSpec, n, y, log_proposal, grid
):
    """``log h(y|x) + log R - log q(x|x')`` in the natural parameterization."""
    if obs.delta <= 0:
        raise UnsupportedParameterizationError("natural bridge filters need delta > 0")
    A = obs.matrix(n)
    r = y - np.atleast_2d(x_new) @ A.T
    log_h = batched_gaussian_log_density(r, np.zeros_like(r), np.broadcast_to(obs.delta * obs.Sigma, (r.shape[0],) + obs.Sigma.shape))
    logR, _ = bridge_log_weight(sde, aux_true, x_prev, x_new, grid, increments)
    return log_h + logR - log_proposal


class BridgeKernel:
    """Bridge particle filter for a diffusion observed at spacing ``h``.

    ``variant`` is one of ``"low_noise"`` (``delta > 0``, extended charts),
    ``"degenerate"`` (``delta == 0``, reduced charts), ``"bootstrap"`` and
    ``"optimal"`` (natural parameterization, ``delta > 0``). Chart filters
    propose the endpoint from the optimal Gaussian proposal built from the
    endpoint-proposal OU transition; the natural ``"optimal"`` variant
    conditions that transition on the observation; ``"bootstrap"`` samples it
    directly. Brownian increments are fresh draws per particle.
    """

    VARIANTS = ("low_noise", "degenerate", "bootstrap", "optimal")

    def __init__(self, sde: SdeSpec, obs: ObservationSpec, ys, x0, n_particles, h, level, variant, substeps=20):
        if variant not in self.VARIANTS:
            raise ValueError(f"unknown bridge variant {variant!r}")
        if variant == "degenerate" and obs.delta != 0:
            raise ValueError("degenerate bridge filter requires delta = 0")
        if variant != "degenerate" and obs.delta <= 0:
            raise UnsupportedParameterizationError(f"{variant} bridge filter needs delta > 0")
        self.sde = sde
        self.obs = obs
        self.ys = np.atleast_2d(ys)
        self.x0 = np.asarray(x0, dtype=float)
        self.N = n_particles
        self.grid = BridgeGrid(level, h)
        self.variant = variant
        self.substeps = substeps
        self._charts = {}

    @property
    def uses_chart(self):
        return self.variant in ("low_noise", "degenerate")

    def chart(self, n):
        if n not in self._charts:
            self._charts[n] = make_chart(self.obs.matrix(n), self.ys[n - 1], self.obs.delta, n)
        return self._charts[n]

    def ambient(self, n, states):
        return chart_state(self.chart(n), states) if self.uses_chart else states

    def step(self, n, prev, rng):
        d = self.sde.dim
        h = self.grid.h
        if prev is None:
            x_prev = np.tile(self.x0, (self.N, 1))
        else:
            x_prev = chart_state(self.chart(n - 1), prev) if self.uses_chart else prev
        xi = rng.standard_normal((self.N, d))
        aux_prop = endpoint_proposal(self.sde, x_prev, h, self.substeps)
        E, c, Q = aux_prop.moments(h)
        m = np.einsum("nij,nj->ni", E, x_prev) + c
        if self.uses_chart:
            chart = self.chart(n)
            g = chart_optimal(m, Q, chart, self.obs.Sigma)
            z = g.sample(xi)
            log_q = g.log_density(z)
            u = chart.base_point + z @ chart.basis.T
            x_new = u[:, :d]
            log_extra = chart_log_jacobian(chart)
            if chart.is_extended:
                log_extra = log_extra + self.obs.noise_log_density(u[:, d:])
            states = z
        else:
            A = self.obs.matrix(n)
            if self.variant == "bootstrap":
                x_new = m + np.einsum("nij,nj->ni", np.linalg.cholesky(Q), xi)
                log_q = batched_gaussian_log_density(x_new, m, Q)
                r = self.ys[n - 1] - x_new @ A.T
                log_extra = batched_gaussian_log_density(
                    r, np.zeros_like(r), np.broadcast_to(self.obs.delta * self.obs.Sigma, (self.N,) + self.obs.Sigma.shape)
                )
            else:
                noise_cov = self.obs.delta * self.obs.Sigma
                K, _, log_ev = natural_conjugate(m, Q, A, self.ys[n - 1], noise_cov)
                eta = rng.standard_normal((self.N, A.shape[0]))
                x_new = conjugate_sample(m, np.linalg.cholesky(Q), A, self.ys[n - 1], np.linalg.cholesky(noise_cov), K, (xi, eta))
                # h(y|x) f~(x|x') / q(x|x') equals the evidence term
                log_q = batched_gaussian_log_density(x_new, m, Q)
                log_extra = log_ev
            states = x_new
        increments = self.grid.sample_increments(rng, self.N, d)
        aux_true, _ = statedep_proposal_correction(self.sde, aux_prop, x_prev, x_new, h)
        log_R, _ = bridge_log_weight(self.sde, aux_true, x_prev, x_new, self.grid, increments)
        return states, log_R + log_extra - log_q


def simulate_diffusion(sde: SdeSpec, x0, t_end, dt, obs_every, obs: ObservationSpec, seed) -> Trajectory:
    """Euler-Maruyama simulation observed every ``obs_every`` steps.

    Returns states and observations at observation times; the fine path is
    kept on the trajectory as ``fine_path``.
    """
    rng = np.random.default_rng(seed)
    n_fine = int(round(t_end / dt))
    x = np.atleast_2d(np.asarray(x0, dtype=float))
    fine = [x[0]]
    for _ in range(n_fine):
        dW = np.sqrt(dt) * rng.standard_normal(x.shape)
        x = x + sde.drift(x) * dt + np.einsum("nij,nj->ni", sde.diffusion(x), dW)
        fine.append(x[0])
    fine = np.array(fine)
    idx = np.arange(0, n_fine + 1, obs_every)
    states = fine[idx]
    n_obs = len(idx) - 1
    eps = rng.standard_normal((n_obs, obs.d_y)) @ np.linalg.cholesky(obs.Sigma).T
    ys = np.array([obs.matrix(k + 1) @ states[k + 1] for k in range(n_obs)]) + np.sqrt(obs.delta) * eps
    traj = Trajectory(times=idx * dt, states=states, observations=ys, noise=eps, seed=seed)
    traj.fine_path = fine
    return traj

