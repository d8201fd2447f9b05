"""Core rate and power-allocation primitives that every other module composes.

Rates are in nats throughout; conversion to other units happens only at the
reporting layer.  Powers are in scaled ("wideband") units: a total power P
spread uniformly over ``n_scale`` parallel channel uses enters the per-use
rate formula as ``P / n_scale``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

# Callers clamp the estimation-error variance at this floor before invoking
# operations that divide by it (the water-filling formula is singular at 0).
THETA_FLOOR = 1e-12


@dataclass(frozen=True)
class ModelParams:
    """Constants of the fading channel and the power-control problem.

    sigma_h2 : channel gain variance (stationary second moment of the gain)
    sigma_z2 : additive noise variance per channel use
    rho      : channel decay rate, 1 / time unit
    n_scale  : channel uses per time unit (N, the power-scaling factor)
    m_block  : symbols per coherence block (M, with M << N)
    eps_max  : peak training power, scaled units
    p_av     : average total power budget, scaled units
    """

    sigma_h2: float = 1.0
    sigma_z2: float = 1.0
    rho: float = 1.0
    n_scale: int = 1000
    m_block: int = 5
    eps_max: float = 15.0
    p_av: float = 1.0

    def __post_init__(self):
        for name in ("sigma_h2", "sigma_z2", "rho", "eps_max"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be positive and finite, got {v!r}")
        if not (math.isfinite(self.p_av) and self.p_av >= 0):
            raise ValueError(f"p_av must be nonnegative, got {self.p_av!r}")
        if int(self.n_scale) != self.n_scale or self.n_scale < 1:
            raise ValueError("n_scale must be a positive integer")
        if int(self.m_block) != self.m_block or self.m_block < 1:
            raise ValueError("m_block must be a positive integer")
        if self.m_block > self.n_scale:
            raise ValueError("m_block must not exceed n_scale")
        # dt = 1 (one block per time unit) is allowed so the unscaled
        # single-use system n_scale = m_block = 1 remains expressible.
        if not 0.0 < self.dt <= 1.0:
            raise ValueError("m_block / n_scale must lie in (0, 1]")
        # r = 0 (block-i.i.d. fading) is a valid degenerate corner
        if not 0.0 <= self.block_corr < 1.0:
            raise ValueError(
                f"block correlation 1 - rho*dt = {self.block_corr:g} is outside [0, 1); "
                "reduce rho or the block duration"
            )

    @property
    def dt(self) -> float:
        """Duration of one coherence block in time units."""
        return self.m_block / self.n_scale

    @property
    def block_corr(self) -> float:
        """Correlation r = 1 - rho*dt between adjacent coherence blocks."""
        return 1.0 - self.rho * self.dt

    @property
    def snr_db(self) -> float:
        """Average received SNR, p_av * sigma_h2 / sigma_z2, in dB."""
        if self.p_av <= 0:
            raise ValueError("snr_db undefined for p_av = 0")
        return 10.0 * math.log10(self.p_av * self.sigma_h2 / self.sigma_z2)

    def with_snr_db(self, snr_db: float) -> "ModelParams":
        p_av = 10.0 ** (snr_db / 10.0) * self.sigma_z2 / self.sigma_h2
        return replace(self, p_av=p_av)

    def with_p_av(self, p_av: float) -> "ModelParams":
        return replace(self, p_av=p_av)


@dataclass(frozen=True)
class SystemState:
    """Markov control state: squared channel estimate and its error variance."""

    mu_hat: float
    theta: float

    def __post_init__(self):
        if not (math.isfinite(self.mu_hat) and self.mu_hat >= 0):
            raise ValueError(f"mu_hat must be nonnegative, got {self.mu_hat!r}")
        if not (math.isfinite(self.theta) and self.theta > 0):
            raise ValueError(f"theta must be positive, got {self.theta!r}")


def _check_rate_args(power, mu_hat, theta, sigma_z2):
    for name, v in (("power", power), ("mu_hat", mu_hat), ("theta", theta)):
        if not (math.isfinite(v) and v >= 0):
            raise ValueError(f"{name} must be nonnegative and finite, got {v!r}")
    if not (math.isfinite(sigma_z2) and sigma_z2 > 0):
        raise ValueError(f"sigma_z2 must be positive and finite, got {sigma_z2!r}")


def rate(power: float, mu_hat: float, theta: float, sigma_z2: float) -> float:
    """Achievable-rate lower bound log(1 + P*mu / (P*theta + sigma_z2)), in nats.

    The estimation error enters as extra noise with power P*theta, so the
    bound is 0 whenever the transmitter sends nothing or the estimate is 0,
    nondecreasing in P and mu_hat, and nonincreasing in theta.
    """
    _check_rate_args(power, mu_hat, theta, sigma_z2)
    if power == 0.0 or mu_hat == 0.0:
        return 0.0
    return math.log1p(power * mu_hat / (power * theta + sigma_z2))


def scaled_rate(p_total: float, mu_hat: float, theta: float, params: ModelParams) -> float:
    """Sum rate over n_scale parallel uses: N * rate(P/N, mu, theta)."""
    n = params.n_scale
    return n * rate(p_total / n, mu_hat, theta, params.sigma_z2)


def waterfill_power(mu_hat: float, theta: float, lam: float, sigma_z2: float) -> float:
    """Data power maximizing rate(P, mu, theta) - lam * P over P >= 0.

    Closed form: the positive root of the first-order condition, clamped at
    zero.  Positive exactly when mu_hat > lam * sigma_z2.  With theta -> 0
    it recovers classic water-filling (1/lam - sigma_z2/mu_hat)+.
    """
    if not (math.isfinite(lam) and lam > 0):
        raise ValueError(f"lam must be positive, got {lam!r}")
    if not (math.isfinite(theta) and theta > 0):
        raise ValueError(f"theta must be positive, got {theta!r}")
    if not (math.isfinite(mu_hat) and mu_hat >= 0):
        raise ValueError(f"mu_hat must be nonnegative, got {mu_hat!r}")
    if mu_hat <= lam * sigma_z2:
        return 0.0
    disc = (
        lam * lam * mu_hat * mu_hat * sigma_z2 * sigma_z2
        + 4.0 * lam * mu_hat * mu_hat * theta * sigma_z2
        + 4.0 * lam * mu_hat * theta * theta * sigma_z2
    )
    p = (-lam * sigma_z2 * (2.0 * theta + mu_hat) + math.sqrt(disc)) / (
        2.0 * lam * theta * (mu_hat + theta)
    )
    return max(p, 0.0)


def training_power(theta: float, params: ModelParams) -> float:
    """Average training power that holds the estimation error at theta.

    2 * rho * sigma_z2 * (sigma_h2 - theta) / theta**2: the power at which
    the deterministic error dynamics have a fixed point at theta.
    """
    if theta <= 0:
        raise ValueError(f"theta must be positive, got {theta!r}")
    return 2.0 * params.rho * params.sigma_z2 * (params.sigma_h2 - theta) / (theta * theta)


def lagrangian(power: float, u: float, theta: float, lam: float, params: ModelParams) -> float:
    """Rate minus the power price: N*R(P/N, u, theta) - lam*(P + eps(theta)).

    eps(theta) is the training power required to sustain error variance
    theta (see :func:`training_power`).
    """
    if theta <= 0:
        raise ValueError(f"theta must be positive, got {theta!r}")
    return scaled_rate(power, u, theta, params) - lam * (power + training_power(theta, params))


def lagrangian_dtheta(power: float, u: float, theta: float, lam: float, params: ModelParams) -> float:
    """Partial derivative of :func:`lagrangian` with respect to theta."""
    if theta <= 0:
        raise ValueError(f"theta must be positive, got {theta!r}")
    n = params.n_scale
    sz2 = params.sigma_z2
    rate_term = -(n * power * power * u) / (
        (power * theta + power * u + n * sz2) * (power * theta + n * sz2)
    )
    train_term = (
        2.0 * lam * params.rho * sz2 * (2.0 * params.sigma_h2 - theta) / theta**3
    )
    return rate_term + train_term


# Vectorized variants for quadrature over estimate grids.  Inputs follow the
# same conventions as the scalar versions but skip per-element validation.

def rate_np(power, mu_hat, theta, sigma_z2):
    power = np.asarray(power, dtype=float)
    mu_hat = np.asarray(mu_hat, dtype=float)
    return np.log1p(power * mu_hat / (power * np.asarray(theta) + sigma_z2))


def waterfill_power_np(mu_hat, theta, lam, sigma_z2):
    mu_hat = np.asarray(mu_hat, dtype=float)
    theta = np.asarray(theta, dtype=float)
    disc = (
        lam * lam * mu_hat**2 * sigma_z2**2
        + 4.0 * lam * mu_hat**2 * theta * sigma_z2
        + 4.0 * lam * mu_hat * theta**2 * sigma_z2
    )
    p = (-lam * sigma_z2 * (2.0 * theta + mu_hat) + np.sqrt(disc)) / (
        2.0 * lam * theta * (mu_hat + theta)
    )
    return np.where(mu_hat > lam * sigma_z2, np.maximum(p, 0.0), 0.0)
