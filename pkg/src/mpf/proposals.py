"""Proposals and importance weights for additive Gaussian models.

Four filters are provided for ``X_n = f(X_{n-1}) + N(0, Omega)`` observed
through ``Y_n = A X_n + delta**0.5 N(0, Sigma)``:

* natural parameterization with the bootstrap proposal;
* natural parameterization with the optimal (conjugate) proposal;
* extended chart (low noise, ``delta > 0``) with the optimal proposal;
* reduced chart (degenerate noise, ``delta = 0``) with the optimal proposal.

The chart-based optimal proposals come out of completing the square in the
chart coordinate. The returned log-weights are the closed-form exponents;
the particle-independent normalizing terms are kept separately in
``log_const`` so that evidence estimates stay comparable between filters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mpf.errors import ConditioningError, UnsupportedParameterizationError
from mpf.geometry import AffineChart, chart_map, chart_state, degenerate_chart, make_chart
from mpf.models import LOG_2PI, GaussianTransition, ObservationSpec, gaussian_log_density


def _chol(mat, what):
    try:
        return np.linalg.cholesky(mat)
    except np.linalg.LinAlgError as exc:
        raise ConditioningError(f"{what} is not positive definite") from exc


def _spd_inverse(mat, what):
    L = _chol(mat, what)
    eye = np.broadcast_to(np.eye(mat.shape[-1]), mat.shape)
    Linv = np.linalg.solve(L, eye)
    inv = np.swapaxes(Linv, -1, -2) @ Linv
    logdet = 2.0 * np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)
    return 0.5 * (inv + np.swapaxes(inv, -1, -2)), logdet


@dataclass(frozen=True)
class ChartGaussian:
    """Gaussian proposal in chart coordinates and its normalizer.

    ``mean`` has one row per particle. ``cov`` is shared ``(k, k)`` or
    per-particle ``(N, k, k)``. ``log_weight`` is
    ``0.5 * (mean' P mean - m' Omega^-1 m)`` with ``P = cov^-1`` and
    ``m = f(x_prev) - x*``; adding ``log_const`` gives the log of the integral
    of the joint numerator over the chart.
    """

    mean: np.ndarray
    cov: np.ndarray
    cov_chol: np.ndarray
    precision: np.ndarray
    offset: np.ndarray
    log_weight: np.ndarray
    log_const: np.ndarray | float

    def sample(self, xi):
        """Map standard normals ``xi`` of shape ``(N, >= k)`` to proposals.

        Only the first ``k`` columns are used so that reduced and extended
        filters driven by the same normals stay coupled.
        """
        k = self.mean.shape[-1]
        xi = xi[:, :k]
        if self.cov_chol.ndim == 2:
            return self.mean + xi @ self.cov_chol.T
        return self.mean + np.einsum("nij,nj->ni", self.cov_chol, xi)

    def log_density(self, z):
        r = z - self.mean
        if self.precision.ndim == 2:
            quad = np.einsum("ni,ij,nj->n", r, self.precision, r)
        else:
            quad = np.einsum("ni,nij,nj->n", r, self.precision, r)
        logdet = 2.0 * np.sum(np.log(np.diagonal(self.cov_chol, axis1=-2, axis2=-1)), axis=-1)
        return -0.5 * quad - 0.5 * logdet - 0.5 * r.shape[-1] * LOG_2PI


# Names used for the two chart cases; both are ChartGaussian.
LowNoiseProposalParams = ChartGaussian
DegenerateProposalParams = ChartGaussian


def chart_optimal(mean, cov, chart: AffineChart, Sigma=None) -> ChartGaussian:
    """Optimal Gaussian proposal on a chart for ``x ~ N(mean, cov)``.

    With ``Vx``/``Ve`` the state and noise rows of the chart basis:
    precision ``P = Ve' Sigma^-1 Ve + Vx' cov^-1 Vx`` (the noise term is absent
    on a reduced chart), mean ``P^-1 Vx' cov^-1 (mean - x*)`` and weight
    ``exp{0.5 (mu' P mu - m' cov^-1 m)}``. ``mean`` is ``(N, d_x)``; ``cov``
    is ``(d_x, d_x)`` or ``(N, d_x, d_x)``.
    """
    mean = np.atleast_2d(mean)
    cov = np.asarray(cov, dtype=float)
    Vx = chart.state_basis
    k = chart.dim
    cov_inv, cov_logdet = _spd_inverse(cov, "transition covariance")
    m = mean - chart.state_base
    if cov.ndim == 2:
        P = Vx.T @ cov_inv @ Vx
        b = m @ (cov_inv @ Vx)
        m_quad = np.einsum("ni,ij,nj->n", m, cov_inv, m)
    else:
        P = np.einsum("ia,nij,jb->nab", Vx, cov_inv, Vx)
        Pm = np.einsum("nij,nj->ni", cov_inv, m)
        b = Pm @ Vx
        m_quad = np.einsum("ni,ni->n", m, Pm)
    log_const = -0.5 * cov_logdet - 0.5 * mean.shape[-1] * LOG_2PI + 0.5 * k * LOG_2PI
    if chart.is_extended:
        Sigma = np.eye(chart.ambient_dim - chart.d_x) if Sigma is None else np.atleast_2d(Sigma)
        Ve = chart.noise_basis
        Sig_inv, Sig_logdet = _spd_inverse(Sigma, "observation noise covariance")
        P = P + Ve.T @ Sig_inv @ Ve
        log_const = log_const - 0.5 * Sig_logdet - 0.5 * Sigma.shape[0] * LOG_2PI
    P = 0.5 * (P + np.swapaxes(P, -1, -2))
    omega, _ = _spd_inverse(P, "chart proposal precision")
    omega_chol = _chol(omega, "chart proposal covariance")
    _, P_logdet = _spd_inverse(P, "chart proposal precision")
    if P.ndim == 2:
        mu = b @ omega.T
    else:
        mu = np.einsum("nij,nj->ni", omega, b)
    log_weight = 0.5 * (np.einsum("ni,ni->n", mu, b) - m_quad)
    log_const = log_const - 0.5 * P_logdet
    return ChartGaussian(
        mean=mu,
        cov=omega,
        cov_chol=omega_chol,
        precision=P,
        offset=m,
        log_weight=log_weight,
        log_const=log_const,
    )


def low_noise_optimal(prev_x, chart: AffineChart, transition: GaussianTransition, Sigma=None):
    """Optimal proposal on the extended chart given previous hidden states.

    ``prev_x`` are the previous hidden states ``x*_{n-1} + V_{n-1}(x) z~_{n-1}``
    (or ``x0``). Returns ``(params, log_weight)``.
    """
    if not chart.is_extended:
        raise ValueError("low_noise_optimal needs an extended chart (delta > 0)")
    g = chart_optimal(transition.mean_map(np.atleast_2d(prev_x)), transition.covariance, chart, Sigma)
    return g, g.log_weight


def degenerate_optimal(prev_x, chart: AffineChart, transition: GaussianTransition):
    """Optimal proposal on the reduced chart given previous hidden states."""
    if chart.is_extended:
        raise ValueError("degenerate_optimal needs a reduced chart (delta = 0)")
    g = chart_optimal(transition.mean_map(np.atleast_2d(prev_x)), transition.covariance, chart)
    return g, g.log_weight


def bootstrap_natural(prev_x, transition: GaussianTransition, obs: ObservationSpec, n, y, rng):
    """Propose from the transition; weight ``exp{-(y-Ax)' Sigma^-1 (y-Ax) / (2 delta)}``."""
    if obs.delta <= 0:
        raise UnsupportedParameterizationError("bootstrap filter needs delta > 0")
    x = transition.sample(prev_x, rng)
    return x, bootstrap_log_weight(x, obs, n, y)


def bootstrap_log_weight(x, obs: ObservationSpec, n, y):
    A = obs.matrix(n)
    r = y - np.atleast_2d(x) @ A.T
    Sig_inv, _ = _spd_inverse(obs.Sigma, "observation noise covariance")
    return -0.5 / obs.delta * np.einsum("ni,ij,nj->n", r, Sig_inv, r)


def natural_conjugate(mean, cov, A, y, noise_cov):
    """Gaussian conditioning of ``x ~ N(mean, cov)`` on ``y = A x + N(0, noise_cov)``.

    Returns ``(gain, innovation covariance S, log evidence per row)``.
    ``cov`` may be per-row.
    """
    mean = np.atleast_2d(mean)
    S = A @ cov @ A.T + noise_cov
    S = 0.5 * (S + np.swapaxes(S, -1, -2))
    S_inv, S_logdet = _spd_inverse(S, "innovation covariance")
    K = cov @ A.T @ S_inv
    r = y - mean @ A.T
    if S.ndim == 2:
        quad = np.einsum("ni,ij,nj->n", r, S_inv, r)
    else:
        quad = np.einsum("ni,nij,nj->n", r, S_inv, r)
    log_ev = -0.5 * quad - 0.5 * S_logdet - 0.5 * A.shape[0] * LOG_2PI
    return K, S, log_ev


def conjugate_sample(mean, cov_chol, A, y, noise_chol, K, rng_normals):
    """Exact draw from the Gaussian conditional by perturbing a prior draw.

    ``x = x_prior + K (y - A x_prior - e)`` with ``x_prior ~ N(mean, cov)`` and
    ``e ~ N(0, noise_cov)``; avoids factorizing the nearly singular
    posterior covariance when the noise is tiny.
    """
    xi, eta = rng_normals
    if cov_chol.ndim == 2:
        x_prior = mean + xi @ cov_chol.T
    else:
        x_prior = mean + np.einsum("nij,nj->ni", cov_chol, xi)
    e = eta @ noise_chol.T
    innov = y - x_prior @ A.T - e
    if K.ndim == 2:
        return x_prior + innov @ K.T
    return x_prior + np.einsum("nij,nj->ni", K, innov)


def optimal_natural(prev_x, transition: GaussianTransition, obs: ObservationSpec, n, y, rng):
    """Draw from ``h(y|x) f(x|x')`` normalized; weight is ``N(y; A f(x'), dSigma + A Omega A')``."""
    if obs.delta <= 0:
        raise UnsupportedParameterizationError("natural optimal filter needs delta > 0")
    prev_x = np.atleast_2d(prev_x)
    A = obs.matrix(n)
    mean = transition.mean_map(prev_x)
    noise_cov = obs.delta * obs.Sigma
    K, _, log_ev = natural_conjugate(mean, transition.covariance, A, y, noise_cov)
    xi = rng.standard_normal(mean.shape)
    eta = rng.standard_normal((mean.shape[0], A.shape[0]))
    x = conjugate_sample(mean, transition.chol, A, y, np.linalg.cholesky(noise_cov), K, (xi, eta))
    return x, log_ev


def conjugate_params(mean, cov, A, y, noise_cov):
    """Posterior mean and covariance in the textbook precision form (for checks)."""
    P = np.linalg.inv(cov) + A.T @ np.linalg.solve(noise_cov, A)
    C = np.linalg.inv(P)
    m = (np.linalg.solve(cov, np.atleast_2d(mean).T).T + A.T @ np.linalg.solve(noise_cov, y)) @ C.T
    return m, C


def low_noise_generic_weight(
    z_prev, z_new, chart_prev, chart, log_proposal, transition: GaussianTransition, noise_log_density, x0=None
):
    """``log p(u(z,eps)) + log f(u(z,x) | u(z',x)) - log q(z | z')``.

    ``chart_prev`` may be ``None`` at the first step, in which case ``x0`` is
    the previous hidden state.
    """
    z_new = np.atleast_2d(z_new)
    prev_x = np.atleast_2d(x0) if chart_prev is None else chart_state(chart_prev, np.atleast_2d(z_prev))
    u = chart_map(chart, z_new)
    x, eps = u[:, : chart.d_x], u[:, chart.d_x:]
    log_q = np.asarray(log_proposal)
    if np.any(~np.isfinite(log_q)):
        raise ValueError("proposal density must be positive and finite")
    log_f = gaussian_log_density(x, transition.mean_map(prev_x), transition.covariance)
    return noise_log_density(eps) + log_f - log_q


def chart_log_jacobian(chart: AffineChart):
    """Constant turning chart-coordinate evidence into observation-space evidence.

    For an extended chart, ``h(y|x) dx = p(eps) f dz~ * |det Vx| / delta^(d_y/2)``;
    for a reduced chart the density of ``A X`` at ``y`` picks up
    ``det(A A')^(-1/2)``. Both reduce to ``-0.5 log det(A A')`` plus, for
    extended charts, ``-0.5 log det(I + delta (A A')^-1)``.
    """
    A = chart.extended_matrix[:, : chart.d_x]
    AAt = A @ A.T
    out = -0.5 * np.linalg.slogdet(AAt)[1]
    if chart.is_extended:
        G = np.eye(AAt.shape[0]) + chart.delta * np.linalg.inv(AAt)
        out -= 0.5 * np.linalg.slogdet(G)[1]
    return float(out)


def weight_limit_check(prev_z_tilde, transition, A, y_prev, y, deltas, x0=None, Sigma=None):
    """Compare low-noise and degenerate optimal weights as ``delta -> 0``.

    The previous particle is given in extended coordinates ``z~ = (z, z_bar)``;
    at each ``delta`` the previous hidden state is rebuilt on the extended
    chart at time ``n-1`` (or taken as ``x0`` when ``y_prev`` is ``None``), and
    the degenerate weight uses the reduced chart with ``z``. Returns rows
    ``(delta, w_low, w_degenerate, |w_low - w_deg|, relative gap)`` using the
    closed-form exponents.
    """
    prev_z_tilde = np.atleast_2d(prev_z_tilde)
    A = np.atleast_2d(A)
    k = A.shape[1] - A.shape[0]
    deg_chart = degenerate_chart(A, y)
    if y_prev is None:
        prev_star = np.atleast_2d(x0)
    else:
        prev_star = chart_state(degenerate_chart(A, y_prev), prev_z_tilde[:, :k])
    _, log_w_star = degenerate_optimal(prev_star, deg_chart, transition)
    rows = []
    for delta in deltas:
        chart = make_chart(A, y, delta)
        if y_prev is None:
            prev_x = np.atleast_2d(x0)
        else:
            prev_x = chart_state(make_chart(A, y_prev, delta), prev_z_tilde)
        _, log_w = low_noise_optimal(prev_x, chart, transition, Sigma)
        w, w_star = np.exp(log_w), np.exp(log_w_star)
        gap = np.abs(w - w_star)
        rows.append((float(delta), w, w_star, gap, gap / w_star))
    return rows


class _NaturalKernel:
    def __init__(self, transition: GaussianTransition, obs: ObservationSpec, ys, x0):
        if obs.delta <= 0:
            raise UnsupportedParameterizationError(
                f"{type(self).__name__} needs delta > 0 (density w.r.t. Lebesgue undefined)"
            )
        self.transition = transition
        self.obs = obs
        self.ys = np.atleast_2d(ys)
        self.x0 = np.asarray(x0, dtype=float)

    def _prev(self, prev, rng_n):
        return np.tile(self.x0, (rng_n, 1)) if prev is None else prev

    def ambient(self, n, states):
        return states


class BootstrapKernel(_NaturalKernel):
    """Bootstrap filter in the natural parameterization."""

    def __init__(self, transition, obs, ys, x0, n_particles):
        super().__init__(transition, obs, ys, x0)
        self.N = n_particles
        self._const = -0.5 * np.linalg.slogdet(2 * np.pi * obs.delta * obs.Sigma)[1]

    def step(self, n, prev, rng):
        x, logw = bootstrap_natural(self._prev(prev, self.N), self.transition, self.obs, n, self.ys[n - 1], rng)
        return x, logw + self._const


class OptimalNaturalKernel(_NaturalKernel):
    """Optimal proposal in the natural parameterization."""

    def __init__(self, transition, obs, ys, x0, n_particles):
        super().__init__(transition, obs, ys, x0)
        self.N = n_particles

    def step(self, n, prev, rng):
        return optimal_natural(self._prev(prev, self.N), self.transition, self.obs, n, self.ys[n - 1], rng)


class ChartKernel:
    """Optimal-proposal filter on the observation charts.

    ``delta > 0`` gives the low-noise filter on extended charts and
    ``delta == 0`` the degenerate filter on reduced charts. Particles are
    chart coordinates; :meth:`ambient` maps them back to hidden states.

    With ``proposal="product"`` (low noise only) the proposal is
    ``N(z_bar; 0, Sigma) x`` the degenerate optimal proposal for ``z`` given
    the previous hidden state, weighted by the generic chart weight; its
    limit as ``delta -> 0`` is exactly the degenerate filter.
    """

    def __init__(self, transition, obs: ObservationSpec, ys, x0, n_particles, proposal="optimal"):
        self.transition = transition
        self.obs = obs
        self.ys = np.atleast_2d(ys)
        self.x0 = np.asarray(x0, dtype=float)
        self.N = n_particles
        self.proposal = proposal
        if proposal not in ("optimal", "product"):
            raise ValueError(f"unknown proposal {proposal!r}")
        if proposal == "product" and obs.delta == 0:
            raise ValueError("product proposal is for delta > 0")
        self._charts = {}
        self._reduced = {}

    def chart(self, n) -> AffineChart:
        if n not in self._charts:
            self._charts[n] = make_chart(self.obs.matrix(n), self.ys[n - 1], self.obs.delta, n)
        return self._charts[n]

    def reduced_chart(self, n) -> AffineChart:
        if n not in self._reduced:
            self._reduced[n] = degenerate_chart(self.obs.matrix(n), self.ys[n - 1], n)
        return self._reduced[n]

    def ambient(self, n, states):
        return chart_state(self.chart(n), states)

    def prev_ambient(self, n, prev):
        return np.tile(self.x0, (self.N, 1)) if prev is None else chart_state(self.chart(n - 1), prev)

    def step(self, n, prev, rng):
        chart = self.chart(n)
        prev_x = self.prev_ambient(n, prev)
        d_x = self.transition.dim
        xi = rng.standard_normal((self.N, d_x))
        if self.proposal == "optimal":
            g = chart_optimal(self.transition.mean_map(prev_x), self.transition.covariance, chart, self.obs.Sigma)
            z = g.sample(xi)
            return z, g.log_weight + g.log_const + chart_log_jacobian(chart)
        red = self.reduced_chart(n)
        g = chart_optimal(self.transition.mean_map(prev_x), self.transition.covariance, red)
        k = red.dim
        z = g.sample(xi)
        z_bar = xi[:, k:] @ np.linalg.cholesky(self.obs.Sigma).T
        z_tilde = np.hstack([z, z_bar])
        log_q = g.log_density(z) + self.obs.noise_log_density(z_bar)
        logw = low_noise_generic_weight(
            None, z_tilde, None, chart, log_q, self.transition, self.obs.noise_log_density, x0=prev_x
        )
        return z_tilde, logw + chart_log_jacobian(chart)
