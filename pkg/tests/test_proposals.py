import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate

from conftest import random_full_rank, random_spd
from mpf.engine import ResamplePolicy, pf_run
from mpf.errors import UnsupportedParameterizationError
from mpf.experiments.kalman import kalman_filter
from mpf.geometry import chart_map, degenerate_chart, extended_chart, make_chart
from mpf.models import LOG_2PI, GaussianTransition, ObservationSpec, gaussian_log_density, lgm_transition
from mpf.proposals import (
    BootstrapKernel,
    ChartKernel,
    OptimalNaturalKernel,
    bootstrap_log_weight,
    bootstrap_natural,
    chart_log_jacobian,
    conjugate_params,
    degenerate_optimal,
    low_noise_generic_weight,
    low_noise_optimal,
    optimal_natural,
    weight_limit_check,
)


def lgm2(rng=None):
    B = np.array([[0.9, 0.1], [-0.2, 0.8]])
    Omega = np.array([[1.0, 0.3], [0.3, 0.7]])
    return lgm_transition(B, Omega)


# ---- natural parameterization -------------------------------------------


def test_bootstrap_weight_examples(rng):
    obs = ObservationSpec(A=np.array([[1.0, 2.0]]), delta=1e-4)
    x = np.array([[0.5, 0.25]])
    assert bootstrap_log_weight(x, obs, 1, np.array([1.0]))[0] == 0.0
    r1 = bootstrap_log_weight(x, obs, 1, np.array([1.3]))[0]
    r2 = bootstrap_log_weight(x, obs, 1, np.array([1.6]))[0]
    assert r2 == pytest.approx(4 * r1, rel=1e-12)
    assert r1 == pytest.approx(-5000 * 0.3**2, rel=1e-12)


def test_natural_filters_reject_zero_delta(rng):
    obs = ObservationSpec(A=np.eye(1, 2), delta=0.0)
    with pytest.raises(UnsupportedParameterizationError):
        bootstrap_natural(np.zeros((2, 2)), lgm2(), obs, 1, np.zeros(1), rng)
    with pytest.raises(UnsupportedParameterizationError):
        optimal_natural(np.zeros((2, 2)), lgm2(), obs, 1, np.zeros(1), rng)
    with pytest.raises(UnsupportedParameterizationError):
        BootstrapKernel(lgm2(), obs, np.zeros((1, 1)), np.zeros(2), 4)


def test_optimal_natural_pointwise_identity(rng):
    T = lgm2()
    obs = ObservationSpec(A=np.array([[1.0, -0.5]]), delta=0.05)
    prev = rng.standard_normal((1, 2))
    y = np.array([0.7])
    _, log_ev = optimal_natural(prev, T, obs, 1, y, rng)
    m_c, C_c = conjugate_params(T.mean_map(prev), T.covariance, obs.A, y, obs.delta * obs.Sigma)
    for x in rng.standard_normal((5, 2)):
        lhs = gaussian_log_density(x, m_c[0], C_c) + log_ev[0]
        log_h = gaussian_log_density(y, obs.A @ x, obs.delta * obs.Sigma)
        rhs = log_h + gaussian_log_density(x, T.mean_map(prev)[0], T.covariance)
        assert lhs == pytest.approx(rhs, abs=1e-10)


def test_optimal_natural_weight_quadrature(rng):
    T = lgm2()
    obs = ObservationSpec(A=np.array([[1.0, -0.5]]), delta=0.5)
    prev = np.array([[0.3, -0.1]])
    y = np.array([0.4])
    _, log_ev = optimal_natural(prev, T, obs, 1, y, rng)
    m = T.mean_map(prev)[0]
    f = lambda b, a: np.exp(  # noqa: E731
        gaussian_log_density(y, obs.A @ [a, b], obs.delta * obs.Sigma)
        + gaussian_log_density(np.array([a, b]), m, T.covariance)
    )
    val, _ = integrate.dblquad(f, m[0] - 8, m[0] + 8, m[1] - 8, m[1] + 8, epsabs=1e-12, epsrel=1e-11)
    assert val == pytest.approx(np.exp(log_ev[0]), abs=1e-8)
    S = obs.A @ T.covariance @ obs.A.T + obs.delta * obs.Sigma
    assert log_ev[0] == pytest.approx(gaussian_log_density(y, obs.A @ m, S), abs=1e-12)


def test_optimal_natural_samples_from_conjugate_posterior():
    T = lgm2()
    obs = ObservationSpec(A=np.array([[1.0, -0.5]]), delta=1e-3)
    prev = np.tile([0.3, -0.1], (200_000, 1))
    y = np.array([0.4])
    x, _ = optimal_natural(prev, T, obs, 1, y, np.random.default_rng(0))
    m_c, C_c = conjugate_params(T.mean_map(prev[:1]), T.covariance, obs.A, y, obs.delta * obs.Sigma)
    se = np.sqrt(np.diag(C_c) / len(x))
    assert np.all(np.abs(x.mean(0) - m_c[0]) <= 4 * se)
    np.testing.assert_allclose(np.cov(x.T), C_c, rtol=0.02, atol=1e-5)


def test_optimal_natural_flat_for_huge_delta(rng):
    T = lgm2()
    obs = ObservationSpec(A=np.array([[1.0, -0.5]]), delta=1e12)
    _, lw = optimal_natural(rng.standard_normal((10, 2)), T, obs, 1, np.array([0.2]), rng)
    assert np.ptp(lw) < 1e-10


# ---- charts: optimal proposals ------------------------------------------


def _numerator(chart, T, prev, z, Sigma=None):
    u = chart_map(chart, z)
    x, eps = u[: chart.d_x], u[chart.d_x:]
    out = gaussian_log_density(x, T.mean_map(prev[None])[0], T.covariance)
    if chart.is_extended:
        out += gaussian_log_density(eps, np.zeros(len(eps)), np.eye(len(eps)) if Sigma is None else Sigma)
    return out


def test_low_noise_factorization_and_quadrature(rng):
    T = lgm2()
    chart = extended_chart(np.array([[1.0, 0.0]]), np.array([0.3]), 1e-2)
    prev = np.array([0.5, -1.0])
    g, lw = low_noise_optimal(prev, chart, T)
    for z in rng.standard_normal((6, 2)):
        lhs = _numerator(chart, T, prev, z)
        rhs = lw[0] + g.log_const + g.log_density(z[None])[0]
        assert lhs == pytest.approx(rhs, abs=1e-9)
    mu = g.mean[0]
    val, _ = integrate.dblquad(
        lambda b, a: np.exp(_numerator(chart, T, prev, np.array([a, b]))),
        mu[0] - 10, mu[0] + 10, mu[1] - 10, mu[1] + 10, epsabs=1e-13, epsrel=1e-10,
    )
    assert val == pytest.approx(np.exp(lw[0] + g.log_const), abs=1e-7)


def test_degenerate_factorization_and_quadrature(rng):
    T = lgm2()
    chart = degenerate_chart(np.array([[0.5, 0.5]]), np.array([0.2]))
    prev = np.array([0.1, 0.7])
    g, lw = degenerate_optimal(prev, chart, T)
    for z in rng.standard_normal((6, 1)):
        lhs = _numerator(chart, T, prev, z)
        assert lhs == pytest.approx(lw[0] + g.log_const + g.log_density(z[None])[0], abs=1e-9)
    val, _ = integrate.quad(lambda a: np.exp(_numerator(chart, T, prev, np.array([a]))), -30, 30, epsabs=1e-13)
    assert val == pytest.approx(np.exp(lw[0] + g.log_const), abs=1e-7)


def test_constant_map_gives_zero_weight():
    A = np.array([[1.0, 2.0, 0.5]])
    y = np.array([0.8])
    x_star = degenerate_chart(A, y).base_point
    T = GaussianTransition(lambda x: np.tile(x_star, (np.atleast_2d(x).shape[0], 1)), np.eye(3))
    for chart, fn in [(degenerate_chart(A, y), degenerate_optimal), (extended_chart(A, y, 1e-3), low_noise_optimal)]:
        g, lw = fn(np.ones(3), chart, T)
        np.testing.assert_allclose(lw, 0.0, atol=1e-15)
        np.testing.assert_allclose(g.mean, 0.0, atol=1e-15)


def test_degenerate_identity_covariance(rng):
    T = lgm_transition(0.9 * np.eye(4), np.eye(4))
    g, _ = degenerate_optimal(rng.standard_normal(4), degenerate_chart(rng.standard_normal((2, 4)), np.ones(2)), T)
    np.testing.assert_allclose(g.cov, np.eye(2), atol=1e-12)


def test_wrong_chart_kind_rejected():
    T = lgm2()
    with pytest.raises(ValueError):
        low_noise_optimal(np.zeros(2), degenerate_chart(np.eye(1, 2), [0.0]), T)
    with pytest.raises(ValueError):
        degenerate_optimal(np.zeros(2), extended_chart(np.eye(1, 2), [0.0], 0.1), T)


@given(st.integers(0, 10_000), st.sampled_from([1e-1, 1e-3, 1e-6]))
def test_factorization_random_instances(seed, delta):
    rng = np.random.default_rng(seed)
    d_x = int(rng.integers(2, 6))
    d_y = int(rng.integers(1, d_x))
    A = random_full_rank(rng, d_y, d_x)
    T = lgm_transition(0.5 * rng.standard_normal((d_x, d_x)), random_spd(rng, d_x))
    Sigma = random_spd(rng, d_y)
    prev = rng.standard_normal(d_x)
    chart = make_chart(A, rng.standard_normal(d_y), delta)
    g, lw = low_noise_optimal(prev, chart, T, Sigma)
    consts = []
    for z in rng.standard_normal((4, d_x)):
        consts.append(_numerator(chart, T, prev, z, Sigma) - lw[0] - g.log_density(z[None])[0])
    assert np.ptp(consts) <= 1e-9
    assert consts[0] == pytest.approx(float(np.squeeze(g.log_const)), abs=1e-9)


@given(st.integers(0, 10_000))
def test_weights_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    T = lgm2()
    prev = rng.standard_normal((6, 2))
    p = rng.permutation(6)
    chart = extended_chart(np.array([[1.0, 1.0]]), [0.1], 1e-3)
    _, lw = low_noise_optimal(prev, chart, T)
    _, lw_p = low_noise_optimal(prev[p], chart, T)
    np.testing.assert_array_equal(lw_p, lw[p])
    dchart = degenerate_chart(np.array([[1.0, 1.0]]), [0.1])
    np.testing.assert_array_equal(degenerate_optimal(prev[p], dchart, T)[1], degenerate_optimal(prev, dchart, T)[1][p])
    obs = ObservationSpec(A=np.array([[1.0, 1.0]]), delta=1e-3)
    np.testing.assert_array_equal(bootstrap_log_weight(prev[p], obs, 1, [0.1]), bootstrap_log_weight(prev, obs, 1, [0.1])[p])
    w1 = optimal_natural(prev, T, obs, 1, np.array([0.1]), np.random.default_rng(0))[1]
    w2 = optimal_natural(prev[p], T, obs, 1, np.array([0.1]), np.random.default_rng(0))[1]
    np.testing.assert_allclose(w2, w1[p], atol=1e-12)


# ---- generic low-noise weight -------------------------------------------


def test_generic_weight_with_exact_proposal_is_constant(rng):
    T = lgm2()
    chart = extended_chart(np.array([[1.0, 0.4]]), [0.2], 1e-2)
    prev = np.array([[0.2, 0.1]])
    g, lw = low_noise_optimal(prev, chart, T)
    z = g.sample(rng.standard_normal((8, 2)))
    w = low_noise_generic_weight(None, z, None, chart, g.log_density(z), T, lambda e: gaussian_log_density(e, np.zeros(1), np.eye(1)), x0=prev)
    np.testing.assert_allclose(w, lw[0] + g.log_const, atol=1e-10)


def test_generic_weight_recomposition(rng):
    T = lgm2()
    A = np.array([[1.0, 0.4]])
    prev_chart = extended_chart(A, [0.5], 1e-2)
    chart = extended_chart(A, [0.2], 1e-2)
    z_prev = rng.standard_normal((3, 2))
    z = rng.standard_normal((3, 2))
    log_q = rng.standard_normal(3)
    noise = lambda e: gaussian_log_density(e, np.zeros(1), np.eye(1))  # noqa: E731
    w = low_noise_generic_weight(z_prev, z, prev_chart, chart, log_q, T, noise)
    for i in range(3):
        xp = chart_map(prev_chart, z_prev[i])[:2]
        u = chart_map(chart, z[i])
        ref = noise(u[2:]) + gaussian_log_density(u[:2], T.mean_map(xp[None])[0], T.covariance) - log_q[i]
        assert w[i] == pytest.approx(ref, abs=1e-12)
    with pytest.raises(ValueError):
        low_noise_generic_weight(z_prev, z, prev_chart, chart, np.full(3, -np.inf), T, noise)


def test_generic_weight_noise_block_separable():
    T = lgm2()
    chart = extended_chart(np.array([[1.0, 0.4]]), [0.2], 1e-16)
    noise = lambda e: gaussian_log_density(e, np.zeros(1), np.eye(1))  # noqa: E731
    x0 = np.array([[0.3, 0.3]])
    z1, z2 = np.array([[0.4, -0.2]]), np.array([[0.4, 1.3]])
    w1 = low_noise_generic_weight(None, z1, None, chart, np.zeros(1), T, noise, x0=x0)
    w2 = low_noise_generic_weight(None, z2, None, chart, np.zeros(1), T, noise, x0=x0)
    assert (w2 - w1)[0] == pytest.approx(noise(np.array([[1.3]]))[0] - noise(np.array([[-0.2]]))[0], abs=1e-6)


# ---- weight limit --------------------------------------------------------


def test_weight_limit_constant_map():
    A = np.array([[1.0, 0.0]])
    y = np.array([0.5])
    x_star = degenerate_chart(A, y).base_point
    T = GaussianTransition(lambda x: np.tile(x_star, (np.atleast_2d(x).shape[0], 1)), np.eye(2))
    rows = weight_limit_check(np.array([[0.3, -0.2]]), T, A, np.array([0.1]), y, [1e-2, 1e-6, 1e-12])
    for _, w, w_star, gap, _ in rows:
        np.testing.assert_allclose(w, 1.0, atol=1e-15)
        np.testing.assert_allclose(w_star, 1.0, atol=1e-15)
        np.testing.assert_allclose(gap, 0.0, atol=1e-15)


def test_weight_limit_lgm_instance():
    T = lgm_transition(0.9 * np.eye(2), np.eye(2))
    A = np.array([[0.5, 0.5]])
    deltas = [10.0**-k for k in range(2, 13)]
    rows = weight_limit_check(np.array([[0.4, -0.3]]), T, A, np.array([0.2]), np.array([0.5]), deltas)
    rel = np.array([r[4][0] for r in rows])
    assert rel[-1] <= 1e-6
    assert np.all(np.diff(rel) <= 0)


def test_weight_limit_gap_shrinks_random(rng):
    for _ in range(10):
        A = random_full_rank(rng, 1, 3)
        T = lgm_transition(0.5 * rng.standard_normal((3, 3)), random_spd(rng, 3))
        rows = weight_limit_check(rng.standard_normal((1, 3)), T, A, rng.standard_normal(1), rng.standard_normal(1), [1e-4, 1e-8])
        assert rows[0][3][0] > rows[1][3][0]


# ---- whole filters --------------------------------------------------------


def _lgm_problem(delta, n_steps=6, seed=3):
    from mpf.models import simulate_ssm

    B = 0.9 * np.eye(2)
    Omega = np.eye(2)
    T = lgm_transition(B, Omega)
    obs = ObservationSpec(A=np.array([[0.5, 0.5]]), delta=delta)
    traj = simulate_ssm(T, obs, np.zeros(2), n_steps, seed)
    return B, Omega, T, obs, traj


@pytest.mark.parametrize("delta,kind", [(1e-3, "low"), (1e-3, "product"), (1e-3, "natural"), (0.0, "degenerate")])
def test_first_step_evidence_is_exact(delta, kind):
    B, Omega, T, obs, traj = _lgm_problem(delta)
    if kind == "natural":
        k = OptimalNaturalKernel(T, obs, traj.observations, np.zeros(2), 50)
    else:
        k = ChartKernel(T, obs, traj.observations, np.zeros(2), 50, proposal="product" if kind == "product" else "optimal")
    res = pf_run(k, 1, 50, seed=0)
    _, ll = kalman_filter(B, Omega, obs.A, np.eye(1), delta, traj.observations[:1], np.zeros(2))
    if kind == "product":
        # the product proposal is not optimal, so only the expectation is exact
        assert res.log_evidence_increments[0] == pytest.approx(ll, abs=0.05)
    else:
        assert res.log_evidence_increments[0] == pytest.approx(ll, abs=1e-10)


def test_chart_log_jacobian_values():
    A = np.array([[0.5, 0.5]])
    assert chart_log_jacobian(make_chart(A, [0.0], 0.0)) == pytest.approx(-0.5 * np.log(0.5))
    assert chart_log_jacobian(make_chart(A, [0.0], 0.1)) == pytest.approx(-0.5 * np.log(0.5) - 0.5 * np.log(1 + 0.1 / 0.5))


def test_degenerate_lgm_weights_constant():
    B, Omega, T, obs, traj = _lgm_problem(0.0, n_steps=10)
    k = ChartKernel(T, obs, traj.observations, np.zeros(2), 64)
    res = pf_run(k, 10, 64, seed=0)
    np.testing.assert_allclose(res.ess, 64, rtol=1e-12)


@pytest.mark.parametrize("delta", [1e-4, 0.0])
def test_chart_filter_matches_kalman(delta):
    B, Omega, T, obs, traj = _lgm_problem(delta, n_steps=8, seed=11)
    N = 10_000
    k = ChartKernel(T, obs, traj.observations, np.zeros(2), N)
    res = pf_run(k, 8, N, ResamplePolicy(), seed=5)
    states, _ = kalman_filter(B, Omega, obs.A, np.eye(1), delta, traj.observations, np.zeros(2))
    km = np.array([s.mean for s in states])
    kv = np.array([np.diag(s.covariance) for s in states])
    se = np.sqrt(kv / res.ess[:, None])
    assert np.all(np.abs(res.means - km) <= 3 * se + 1e-12)
