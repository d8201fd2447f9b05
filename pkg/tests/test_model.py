import math

import numpy as np
import pytest

from pilotctl.model import (
    ModelParams,
    SystemState,
    lagrangian,
    lagrangian_dtheta,
    rate,
    scaled_rate,
    training_power,
    waterfill_power,
    waterfill_power_np,
)


def test_params_validation():
    with pytest.raises(ValueError):
        ModelParams(eps_max=0.0)
    with pytest.raises(ValueError):
        ModelParams(m_block=10, n_scale=5)
    with pytest.raises(ValueError):
        ModelParams(rho=300.0, n_scale=1000, m_block=5)  # block correlation <= 0
    p = ModelParams(rho=2.0, n_scale=1000, m_block=5)
    assert p.dt == 0.005
    assert p.block_corr == pytest.approx(0.99)
    assert p.with_snr_db(3.0).snr_db == pytest.approx(3.0)


def test_state_validation():
    with pytest.raises(ValueError):
        SystemState(mu_hat=-1.0, theta=0.5)
    with pytest.raises(ValueError):
        SystemState(mu_hat=0.0, theta=0.0)


def test_rate_examples():
    assert rate(1.0, 0.0, 0.3, 1.0) == 0.0
    assert rate(1.0, 1.0, 0.0, 1.0) == pytest.approx(math.log(2.0), rel=1e-12)
    # P=2, mu=1, theta=0.5: 2*1/(2*0.5+1) = 1
    assert rate(2.0, 1.0, 0.5, 1.0) == pytest.approx(math.log(2.0), rel=1e-12)
    assert rate(0.0, 5.0, 0.5, 1.0) == 0.0


def test_rate_domain_errors():
    for bad in [(-1, 1, 1, 1), (1, -1, 1, 1), (1, 1, -1, 1), (1, 1, 1, 0.0)]:
        with pytest.raises(ValueError):
            rate(*bad)
    with pytest.raises(ValueError):
        rate(float("nan"), 1, 1, 1)


def test_rate_monotonicity():
    rng = np.random.default_rng(0)
    for _ in range(200):
        mu, th = rng.uniform(0.01, 4, size=2)
        p1, p2 = sorted(rng.uniform(0, 5, size=2))
        assert rate(p2, mu, th, 1.0) >= rate(p1, mu, th, 1.0) - 1e-15
        assert rate(1.0, mu + 0.1, th, 1.0) > rate(1.0, mu, th, 1.0)
        assert rate(1.0, mu, th + 0.1, 1.0) <= rate(1.0, mu, th, 1.0)


def test_scaled_rate():
    p = ModelParams(n_scale=1000, m_block=5)
    assert scaled_rate(0.0, 1.0, 0.5, p) == 0.0
    assert scaled_rate(10.0, 1.0, 0.0, p) == pytest.approx(1000 * math.log1p(0.01), rel=1e-12)
    unit = ModelParams(n_scale=1, m_block=1, rho=0.5)
    assert scaled_rate(2.0, 1.0, 0.5, unit) == pytest.approx(rate(2.0, 1.0, 0.5, 1.0))


def test_waterfill_examples():
    assert waterfill_power(0.4, 0.3, 0.5, 1.0) == 0.0
    # theta -> 0 recovers classic water-filling
    wf = waterfill_power(2.0, 1e-9, 0.5, 1.0)
    assert wf == pytest.approx(1.0 / 0.5 - 1.0 / 2.0, rel=1e-6)
    assert waterfill_power(4.0, 1.0, 1.0, 1.0) == pytest.approx(0.3798, abs=1e-4)
    with pytest.raises(ValueError):
        waterfill_power(1.0, 0.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        waterfill_power(1.0, 1.0, 0.0, 1.0)


def test_waterfill_positivity_threshold():
    rng = np.random.default_rng(1)
    for _ in range(300):
        lam = rng.uniform(0.1, 3)
        th = rng.uniform(0.05, 1.0)
        sz2 = rng.uniform(0.5, 2.0)
        eps = 1e-9
        assert waterfill_power(lam * sz2 * (1 - eps), th, lam, sz2) == 0.0
        assert waterfill_power(lam * sz2 * (1 + 1e-6), th, lam, sz2) > 0.0


def test_waterfill_matches_grid_search():
    # closed form vs brute maximization of rate - lam * P
    rng = np.random.default_rng(2)
    grid = np.arange(0.0, 12.0, 1e-4)
    for _ in range(60):
        mu = rng.uniform(0.05, 5.0)
        th = rng.uniform(0.02, 1.0)
        lam = rng.uniform(0.15, 3.0)
        obj = np.log1p(grid * mu / (grid * th + 1.0)) - lam * grid
        best = grid[obj.argmax()]
        assert waterfill_power(mu, th, lam, 1.0) == pytest.approx(best, abs=1e-3)


def test_waterfill_np_matches_scalar():
    rng = np.random.default_rng(3)
    mu = rng.uniform(0, 5, 100)
    th = rng.uniform(0.05, 1, 100)
    lam = 0.7
    vec = waterfill_power_np(mu, th, lam, 1.0)
    ref = [waterfill_power(m, t, lam, 1.0) for m, t in zip(mu, th)]
    np.testing.assert_allclose(vec, ref, atol=1e-12)


def test_lagrangian_examples():
    p = ModelParams(sigma_h2=1.0, sigma_z2=1.0, rho=1.0, n_scale=1, m_block=1)
    val = lagrangian(1.0, 1.0, 0.5, 0.1, p)
    assert val == pytest.approx(math.log(1 + 1 / 1.5) - 0.5, abs=1e-9)
    # zero power at the prior variance: no rate, no training cost
    assert lagrangian(0.0, 3.0, 1.0, 0.7, p) == pytest.approx(0.0, abs=1e-12)
    # multiplier off reduces to the scaled rate
    big = ModelParams(n_scale=500, m_block=5)
    assert lagrangian(2.0, 1.5, 0.4, 0.0, big) == pytest.approx(
        scaled_rate(2.0, 1.5, 0.4, big)
    )
    with pytest.raises(ValueError):
        lagrangian(1.0, 1.0, 0.0, 0.1, p)


def test_training_power():
    p = ModelParams(rho=1.0)
    assert training_power(0.5, p) == pytest.approx(4.0)
    assert training_power(p.sigma_h2, p) == 0.0


def test_lagrangian_dtheta_values():
    p = ModelParams(sigma_h2=1.0, sigma_z2=1.0, rho=1.0, n_scale=1000, m_block=5)
    assert lagrangian_dtheta(0.0, 2.0, 0.5, 1.0, p) == pytest.approx(24.0, rel=1e-12)
    unit = ModelParams(sigma_h2=1.0, sigma_z2=1.0, rho=0.5, n_scale=1, m_block=1)
    assert lagrangian_dtheta(1.0, 1.0, 1.0, 0.0, unit) == pytest.approx(-1.0 / 6.0, rel=1e-12)


def test_lagrangian_dtheta_finite_differences():
    p = ModelParams(sigma_h2=1.0, sigma_z2=1.0, rho=2.0, n_scale=200, m_block=1)
    rng = np.random.default_rng(4)
    for _ in range(100):
        power = rng.uniform(0, 50)
        u = rng.uniform(0, 4)
        th = rng.uniform(0.1, 0.95)
        lam = rng.uniform(0.05, 2)
        h = 1e-5 * th
        fd = (lagrangian(power, u, th + h, lam, p) - lagrangian(power, u, th - h, lam, p)) / (
            2 * h
        )
        assert lagrangian_dtheta(power, u, th, lam, p) == pytest.approx(fd, rel=1e-6)
