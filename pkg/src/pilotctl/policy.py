"""Pilot/data control policies built from a switching boundary.

The pilot side is always the same bang-bang rule: train at peak power
whenever the error variance sits on or above the boundary at the current
estimate (ties train).  The data side is either water-filling against a
power price or an on-off rule with a threshold and a fixed on-power.
All powers are in scaled (diffusion) units.
"""

from __future__ import annotations

from dataclasses import dataclass

from .boundary import Boundary
from .model import waterfill_power


@dataclass(frozen=True)
class WaterFilling:
    """Data power N * P_d(mu, theta, lam): the rate-maximizing allocation."""

    lam: float

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError("water-filling needs a positive power price")


@dataclass(frozen=True)
class OnOffRule:
    """Data power p0 when the estimate exceeds mu0, zero otherwise."""

    mu0: float
    p0: float

    def __post_init__(self):
        if self.mu0 < 0:
            raise ValueError("mu0 must be nonnegative")
        if self.p0 <= 0:
            raise ValueError("p0 must be positive")


def _rule_power(rule, mu_hat, theta, params):
    if isinstance(rule, WaterFilling):
        return params.n_scale * waterfill_power(mu_hat, theta, rule.lam, params.sigma_z2)
    return rule.p0 if mu_hat > rule.mu0 else 0.0


@dataclass(frozen=True)
class Policy:
    boundary: Boundary
    data_rule: WaterFilling | OnOffRule

    @property
    def params(self):
        return self.boundary.params

    @property
    def train_power(self) -> float:
        """Training power while training (bang-bang: always the peak)."""
        return self.boundary.params.eps_max

    def should_train(self, mu_hat: float, theta: float) -> bool:
        return theta >= self.boundary.theta_at(mu_hat)

    def data_power(self, mu_hat: float, theta: float) -> float:
        return _rule_power(self.data_rule, mu_hat, theta, self.boundary.params)


@dataclass(frozen=True)
class ConstantTrainingPolicy:
    """Train every block at a fixed power; no feedback on the pilot side.

    The non-adaptive baseline: holding the training power at eps pins the
    error variance at the matching fixed point, reproducing the estimation
    error and estimate distribution of a vertical switching boundary with
    the same average training power.
    """

    eps: float
    data_rule: WaterFilling | OnOffRule
    params: "object"

    @property
    def train_power(self) -> float:
        return self.eps

    def should_train(self, mu_hat: float, theta: float) -> bool:
        return True

    def data_power(self, mu_hat: float, theta: float) -> float:
        return _rule_power(self.data_rule, mu_hat, theta, self.params)
