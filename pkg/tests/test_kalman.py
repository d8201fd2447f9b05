import math

import numpy as np
import pytest
from scipy.integrate import solve_ivp
from scipy.signal import lfilter

from pilotctl.boundary import theta_star, vertical_boundary
from pilotctl.model import ModelParams, training_power
from pilotctl.policy import ConstantTrainingPolicy, OnOffRule, Policy, WaterFilling
from pilotctl.simulate import (
    KalmanState,
    burn_in_length,
    channel_step,
    kalman_step,
    simulate_trace,
    theta_recursion,
    write_trace_csv,
)

P_VERT = ModelParams(sigma_h2=1.0, sigma_z2=1.0, rho=1.0, n_scale=1000, m_block=5, eps_max=15.0)


class _NeverTrain:
    train_power = 0.0

    def should_train(self, mu, theta):
        return False

    def data_power(self, mu, theta):
        return 0.0


def test_channel_step_degenerate_correlations():
    assert channel_step(1 + 0j, 1.0, 1.0, 5 - 3j) == 1 + 0j
    w = 0.3 + 0.4j
    assert channel_step(7 + 7j, 0.0, 4.0, w) == 2.0 * w
    with pytest.raises(ValueError):
        channel_step(1j, 1.5, 1.0, 0j)


def test_channel_autocorrelation():
    # lag-k autocovariance of the recursion should follow r**k * sigma_h2
    r, s2, n = 0.99, 1.0, 1_000_000
    rng = np.random.default_rng(11)
    w = (rng.standard_normal(n) + 1j * rng.standard_normal(n)) * math.sqrt(s2 / 2)
    h = lfilter([math.sqrt(1 - r * r)], [1.0, -r], w)
    h = h[2000:]  # settle the filter
    for lag in (1, 10, 100):
        prod = (np.conj(h[:-lag]) * h[lag:]).real
        batches = np.array_split(prod, 16)
        means = np.array([b.mean() for b in batches])
        se = means.std(ddof=1) / math.sqrt(len(means))
        assert abs(means.mean() - r**lag * s2) < 3 * se


def test_kalman_step_pure_prediction():
    p = ModelParams(sigma_h2=1.0, sigma_z2=1.0, rho=10.0, n_scale=100, m_block=1)
    assert p.block_corr == pytest.approx(0.9)
    st = kalman_step(KalmanState(h_hat=1 + 1j, theta=0.5), 0.0, 0j, p, 0j)
    assert st.theta == pytest.approx(0.81 * 0.5 + 0.19, rel=1e-12)
    assert st.h_hat == pytest.approx(0.9 * (1 + 1j))


def test_kalman_step_measurement_update():
    # r = 1, prior variance 1, unit pilot energy, unit noise: posterior 1/2
    p = ModelParams(sigma_h2=1.0, sigma_z2=1.0, rho=1e-9, n_scale=1000, m_block=1)
    st = kalman_step(KalmanState(h_hat=0j, theta=1.0), 1.0 / p.m_block, 1 + 0j, p, 0j)
    assert st.theta == pytest.approx(0.5, rel=1e-9)
    with pytest.raises(ValueError):
        kalman_step(KalmanState(h_hat=0j, theta=1.0), -1.0, 0j, p, 0j)


def test_constant_training_fixed_point_matches_vertical_height():
    # holding eps_v pins the error variance at theta_v, up to O(dt)
    theta_v = 0.5
    eps_v = training_power(theta_v, P_VERT)
    traj = theta_recursion(P_VERT, eps_v, 20_000)
    assert abs(traj[-1] - traj[-2]) < 1e-12  # converged
    assert abs(traj[-1] - theta_v) < 5 * P_VERT.dt
    finer = ModelParams(**{**P_VERT.__dict__, "m_block": 1})
    assert abs(theta_recursion(finer, eps_v, 100_000)[-1] - theta_v) < 5 * finer.dt


def test_theta_recursion_converges_to_ode():
    # against high-accuracy integration of the continuous error dynamics
    p0 = ModelParams(sigma_h2=1.0, sigma_z2=1.0, rho=2.0, eps_max=15.0, n_scale=500, m_block=1)
    horizon = 10.0

    def ode_solution(ts):
        sol = solve_ivp(
            lambda t, y: 2 * p0.rho * (p0.sigma_h2 - y) - p0.eps_max * y**2 / p0.sigma_z2,
            (0, horizon),
            [p0.sigma_h2],
            t_eval=ts,
            rtol=1e-11,
            atol=1e-13,
        )
        return sol.y[0]

    errs = []
    for n in (500, 1000):
        p = ModelParams(**{**p0.__dict__, "n_scale": n})
        steps = int(horizon / p.dt)
        traj = theta_recursion(p, p.eps_max, steps)
        ts = np.arange(steps + 1) * p.dt
        errs.append(np.abs(traj - ode_solution(ts)).max())
    assert 0.4 < errs[1] / errs[0] < 0.6  # first-order in dt


def test_simulate_reproducible_and_bounded():
    b = vertical_boundary(0.5, P_VERT)
    pol = Policy(boundary=b, data_rule=WaterFilling(lam=1.0))
    t1 = simulate_trace(P_VERT, pol, 5000, seed=42)
    t2 = simulate_trace(P_VERT, pol, 5000, seed=42)
    np.testing.assert_array_equal(t1.mu_hat, t2.mu_hat)
    np.testing.assert_array_equal(t1.rate, t2.rate)
    assert np.all(t1.theta > 0)
    assert np.all(t1.theta <= P_VERT.sigma_h2)
    t3 = simulate_trace(P_VERT, pol, 5000, seed=43)
    assert not np.array_equal(t1.mu_hat, t3.mu_hat)


def test_simulate_matches_public_step_functions():
    # the inlined loop must replay exactly through channel_step/kalman_step
    p = ModelParams(sigma_h2=1.0, sigma_z2=1.0, rho=2.0, n_scale=200, m_block=1, eps_max=12.0)
    b = vertical_boundary(0.45, p)
    pol = Policy(boundary=b, data_rule=OnOffRule(mu0=0.8, p0=3.0))
    n = 400
    trace = simulate_trace(p, pol, n, seed=9)

    rng = np.random.default_rng(9)
    draws = rng.standard_normal(2 + 4 * n)
    h = math.sqrt(p.sigma_h2 / 2) * (draws[0] + 1j * draws[1])
    st = KalmanState(h_hat=0j, theta=p.sigma_h2 * (1 - 1e-12))
    for i in range(n):
        mu = abs(st.h_hat) ** 2
        train = pol.should_train(mu, st.theta)
        wr, wj, zr, zj = draws[2 + 4 * i : 6 + 4 * i]
        h = channel_step(h, p.block_corr, p.sigma_h2, (wr + 1j * wj) / math.sqrt(2))
        eps_block = p.eps_max / p.n_scale if train else 0.0
        st = kalman_step(st, eps_block, h, p, (zr + 1j * zj) / math.sqrt(2))
        assert trace.trained[i] == train
        assert trace.mu_hat[i] == pytest.approx(abs(st.h_hat) ** 2, rel=1e-12, abs=1e-300)
        assert trace.theta[i] == pytest.approx(st.theta, rel=1e-12)


def test_never_train_gives_zero_rate_and_prior_variance():
    p = ModelParams(sigma_h2=1.0, sigma_z2=1.0, rho=2.0, n_scale=200, m_block=1)
    trace = simulate_trace(p, _NeverTrain(), 3000, seed=5)
    assert np.all(trace.rate == 0.0)
    assert np.all(trace.data_power == 0.0)
    assert trace.theta[-1] == pytest.approx(p.sigma_h2, abs=1e-9)


def test_untrained_blocks_move_along_ray_to_prior():
    # between boundary hits the state slides on the straight line toward
    # (0, sigma_h2): both the estimate and the variance gap shrink by
    # exactly r^2 per untrained block
    p = ModelParams(sigma_h2=1.0, sigma_z2=1.0, rho=2.0, n_scale=200, m_block=1, eps_max=15.0)
    b = vertical_boundary(0.5, p)
    pol = Policy(boundary=b, data_rule=WaterFilling(lam=1.0))
    trace = simulate_trace(p, pol, 20_000, seed=8)
    r2 = p.block_corr**2
    mu, th = trace.mu_hat, trace.theta
    free = ~trace.trained[1:]
    assert free.sum() > 1000
    np.testing.assert_allclose(mu[1:][free], r2 * mu[:-1][free], rtol=1e-12)
    gap_next = p.sigma_h2 - th[1:][free]
    gap_prev = p.sigma_h2 - th[:-1][free]
    np.testing.assert_allclose(gap_next, r2 * gap_prev, rtol=1e-10)
    # equivalently mu / (sigma_h2 - theta) is invariant on those steps
    np.testing.assert_allclose(
        mu[1:][free] / gap_next, mu[:-1][free] / gap_prev, rtol=1e-9
    )


def test_always_train_settles_at_error_floor():
    p = ModelParams(sigma_h2=1.0, sigma_z2=1.0, rho=2.0, n_scale=1000, m_block=1, eps_max=15.0)
    pol = ConstantTrainingPolicy(eps=p.eps_max, data_rule=WaterFilling(lam=1.0), params=p)
    trace = simulate_trace(p, pol, 40_000, seed=3)
    tail = trace.theta[20_000:]
    t_star = theta_star(p)
    assert abs(tail.mean() - t_star) / t_star < 0.02


def test_vertical_policy_estimate_mean():
    theta_v = 0.5
    b = vertical_boundary(theta_v, P_VERT)
    pol = Policy(boundary=b, data_rule=WaterFilling(lam=1.0))
    trace = simulate_trace(P_VERT, pol, 1_000_000, seed=17)
    k = burn_in_length(trace.n_blocks)
    mu = trace.mu_hat[k:]
    batches = np.array_split(mu, 20)
    means = np.array([x.mean() for x in batches])
    se = means.std(ddof=1) / math.sqrt(len(means))
    assert abs(mu.mean() - (P_VERT.sigma_h2 - theta_v)) < 2 * se + 0.01 * theta_v


def test_trace_csv(tmp_path):
    b = vertical_boundary(0.5, P_VERT)
    pol = Policy(boundary=b, data_rule=WaterFilling(lam=1.0))
    trace = simulate_trace(P_VERT, pol, 50, seed=1)
    path = tmp_path / "trace.csv"
    write_trace_csv(trace, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "block,mu_hat,theta,trained,data_power,rate"
    assert len(lines) == 51
    first = lines[1].split(",")
    assert int(first[0]) == 0
    assert float(first[2]) == pytest.approx(trace.theta[0])
