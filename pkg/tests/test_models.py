import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate

from conftest import random_spd
from mpf.errors import ConditioningError, RankDeficiencyError
from mpf.models import (
    LOG_2PI,
    GaussianTransition,
    ObservationSpec,
    Trajectory,
    gaussian_log_density,
    lgm_transition,
    lorenz96_map,
    lorenz96_transition,
    selection_matrix,
    simulate_ssm,
)


def test_log_density_examples():
    assert gaussian_log_density(np.zeros(3), np.zeros(3), np.eye(3)) == pytest.approx(-1.5 * LOG_2PI, abs=1e-15)
    assert gaussian_log_density([1.0], [0.0], [[1.0]]) == pytest.approx(-0.5 - 0.5 * LOG_2PI, abs=1e-15)


def test_log_density_explicit_inverse(rng):
    C = random_spd(rng, 3)
    x, m = rng.standard_normal(3), rng.standard_normal(3)
    r = x - m
    ref = -0.5 * r @ np.linalg.inv(C) @ r - 0.5 * np.log(np.linalg.det(2 * np.pi * C))
    assert gaussian_log_density(x, m, C) == pytest.approx(ref, abs=1e-10)


def test_log_density_batch_rows(rng):
    C = random_spd(rng, 2)
    X = rng.standard_normal((4, 2))
    batch = gaussian_log_density(X, np.zeros(2), C)
    np.testing.assert_allclose(batch, [gaussian_log_density(x, np.zeros(2), C) for x in X], atol=1e-14)


def test_non_spd_rejected():
    with pytest.raises(ConditioningError):
        gaussian_log_density(np.zeros(2), np.zeros(2), np.array([[1.0, 2.0], [2.0, 1.0]]))
    with pytest.raises(ConditioningError):
        GaussianTransition(lambda x: x, np.array([[1.0, 0.5], [0.0, 1.0]]))


@given(st.integers(0, 10_000))
def test_log_density_swap_symmetry(seed):
    rng = np.random.default_rng(seed)
    C = random_spd(rng, 3)
    x, m = rng.standard_normal(3), rng.standard_normal(3)
    assert gaussian_log_density(x, m, C) == pytest.approx(gaussian_log_density(m, x, C), abs=1e-12)


def test_transition_density_integrates_to_one():
    T = lgm_transition(0.9 * np.eye(2), np.array([[1.0, 0.3], [0.3, 0.5]]))
    prev = np.array([0.2, -0.4])
    mean = 0.9 * prev
    val, _ = integrate.dblquad(
        lambda b, a: np.exp(T.log_density(np.array([a, b]), prev)),
        mean[0] - 9, mean[0] + 9, mean[1] - 7, mean[1] + 7, epsabs=1e-10,
    )
    assert val == pytest.approx(1.0, abs=1e-7)


def test_lgm_examples(rng):
    T = lgm_transition(0.9 * np.eye(10), np.eye(10))
    np.testing.assert_allclose(T.mean_map(np.ones((1, 10))), 0.9 * np.ones((1, 10)))
    T0 = lgm_transition(np.zeros((3, 3)), np.eye(3))
    np.testing.assert_array_equal(T0.mean_map(rng.standard_normal((4, 3))), 0.0)


def test_lgm_stationary_variance():
    T = lgm_transition(0.9 * np.eye(1), np.eye(1))
    rng = np.random.default_rng(0)
    x = np.zeros((20_000, 1))
    for _ in range(50):
        x = T.sample(x, rng)
    exact = sum(0.81**k for k in range(50))  # Lyapunov recursion from x0 = 0
    se = exact * np.sqrt(2 / len(x))
    assert abs(x.var() - exact) <= 4 * se
    assert exact == pytest.approx(1 / 0.19, rel=1e-4)


def test_lorenz_examples():
    np.testing.assert_allclose(lorenz96_map(8.0 * np.ones(8), 8.0, 1e-2), 8.0 * np.ones(8), rtol=0, atol=0)
    np.testing.assert_allclose(lorenz96_map(np.zeros(8), 8.0, 1e-2), 0.08 * np.ones(8), atol=1e-16)


def _lorenz_bruteforce(x, F0, dt):
    d = len(x)
    out = np.empty(d)
    for i in range(d):
        ip1, im1, im2 = (i + 1) % d, (i - 1) % d, (i - 2) % d
        out[i] = x[i] + dt * ((x[ip1] - x[im2]) * x[im1] - x[i] + F0)
    return out


@given(st.integers(4, 12), st.integers(0, 10_000))
def test_lorenz_matches_index_table(d, seed):
    x = np.random.default_rng(seed).standard_normal(d) * 3
    np.testing.assert_allclose(lorenz96_map(x, 8.0, 1e-2), _lorenz_bruteforce(x, 8.0, 1e-2), atol=1e-13)


def test_lorenz_batch_rows(rng):
    X = rng.standard_normal((3, 8))
    np.testing.assert_allclose(lorenz96_map(X, 8.0, 0.01), [_lorenz_bruteforce(x, 8.0, 0.01) for x in X], atol=1e-13)
    T = lorenz96_transition()
    np.testing.assert_allclose(T.covariance, 0.01 * np.eye(8))


def test_selection_matrix():
    A = selection_matrix(8, [0, 4])
    assert A.shape == (2, 8) and A[0, 0] == 1 and A[1, 4] == 1 and A.sum() == 2


def test_observation_spec_rank_check():
    with pytest.raises(RankDeficiencyError):
        ObservationSpec(A=np.array([[1.0, 1.0], [2.0, 2.0]]))
    with pytest.raises(ValueError):
        ObservationSpec(A=np.eye(1, 2), delta=-1.0)


def test_simulate_noiseless_exact(rng):
    T = lgm_transition(0.9 * np.eye(3), np.eye(3))
    obs = ObservationSpec(A=rng.standard_normal((2, 3)), delta=0.0)
    tr = simulate_ssm(T, obs, np.zeros(3), 30, seed=4)
    for x, y in zip(tr.states[1:], tr.observations):
        assert np.linalg.norm(y - obs.A @ x) == 0.0


def test_simulate_reproducible():
    T = lgm_transition(0.9 * np.eye(3), np.eye(3))
    obs = ObservationSpec(A=np.full((1, 3), 1 / 3), delta=1e-2)
    a = simulate_ssm(T, obs, np.zeros(3), 10, seed=9)
    b = simulate_ssm(T, obs, np.zeros(3), 10, seed=9)
    np.testing.assert_array_equal(a.states, b.states)
    np.testing.assert_array_equal(a.observations, b.observations)


def test_simulate_residual_variance():
    # static hidden state: B = I, Omega tiny
    T = lgm_transition(np.eye(2), 1e-300 * np.eye(2))
    Sigma = np.array([[2.0]])
    obs = ObservationSpec(A=np.array([[1.0, 1.0]]), Sigma=Sigma, delta=0.3)
    tr = simulate_ssm(T, obs, np.zeros(2), 100_000, seed=1)
    res = tr.observations - tr.states[1:] @ obs.A.T
    assert res.var() == pytest.approx(0.6, rel=0.02)
    np.testing.assert_allclose(res, np.sqrt(0.3) * tr.noise, atol=1e-12)


def test_trajectory_csv_round_trip(tmp_path):
    T = lgm_transition(0.9 * np.eye(2), np.eye(2))
    tr = simulate_ssm(T, ObservationSpec(A=np.eye(1, 2), delta=0.1), np.zeros(2), 5, seed=77)
    path = tmp_path / "traj.csv"
    tr.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "t,x_1,x_2,y_1"
    assert lines[1].endswith(",")  # no observation at t = 0
    back = Trajectory.from_csv(path)
    np.testing.assert_array_equal(back.states, tr.states)
    np.testing.assert_array_equal(back.observations, tr.observations)
    assert back.seed == 77


def test_trajectory_length_check():
    with pytest.raises(ValueError):
        Trajectory(times=np.arange(3.0), states=np.zeros((3, 2)), observations=np.zeros((3, 1)))
