"""Monte Carlo evaluation of pilot/data policies on the discrete-time system.

The pilot side fully determines the state trajectory (data power never feeds
back into the channel or the tracker), so each seed's trajectory is
simulated once and the data rule is applied afterwards, vectorized.  By
default the data rule is re-calibrated on the simulated trajectories so
that total consumed power (pilot + data) meets the budget p_av exactly:
for water-filling the price is re-solved per seed, for on-off rules the
on-power is rescaled.  Without this, a rule calibrated on the asymptotic
analysis overspends on the discrete system and rate comparisons against
the analysis would be power-inconsistent.

Across-seed means and standard errors are reported; blocks within a trace
are autocorrelated, so only seeds count as independent replicates.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .boundary import Boundary, steady_pdf, theta_star, training_power_np
from .errors import InfeasibleError
from .model import ModelParams, rate_np, waterfill_power_np
from .policy import ConstantTrainingPolicy, OnOffRule, Policy, WaterFilling
from .simulate import Trace, simulate_trace


@dataclass(eq=False)
class SimStats:
    """Aggregated Monte Carlo outputs (scaled units, post-burn-in)."""

    avg_rate: float
    avg_data_power: float
    avg_train_power: float
    train_fraction: float
    collapse_fraction: float
    rate_se: float
    data_power_se: float
    train_power_se: float
    hist_density: np.ndarray
    hist_edges: np.ndarray
    overflow_mass: float
    n_blocks: int
    seeds: tuple
    eta: float
    lam_sim: float | None = None
    per_seed_rate: np.ndarray = field(default_factory=lambda: np.empty(0))

    def to_dict(self) -> dict:
        return {
            "avg_rate": self.avg_rate,
            "avg_data_power": self.avg_data_power,
            "avg_train_power": self.avg_train_power,
            "train_fraction": self.train_fraction,
            "collapse_fraction": self.collapse_fraction,
            "rate_se": self.rate_se,
            "data_power_se": self.data_power_se,
            "train_power_se": self.train_power_se,
            "overflow_mass": self.overflow_mass,
            "n_blocks": self.n_blocks,
            "seeds": list(self.seeds),
            "eta": self.eta,
            "lam_sim": self.lam_sim,
            "hist_edges": self.hist_edges.tolist(),
            "hist_density": self.hist_density.tolist(),
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def _se(values) -> float:
    values = np.asarray(values, dtype=float)
    if len(values) < 2:
        return float("nan")
    return float(values.std(ddof=1) / math.sqrt(len(values)))


def collapse_fraction(trace: Trace, boundary: Boundary, eta: float) -> float:
    """Fraction of post-burn-in blocks outside the eta-tube around the
    attractor set: the switching curve together with the error-floor line
    theta = theta_star (the state rides the floor wherever peak training
    saturates)."""
    if eta <= 0:
        raise ValueError("eta must be positive")
    k = trace.burn_in
    mu = trace.mu_hat[k:]
    th = trace.theta[k:]
    d_curve = np.abs(th - boundary.theta_at(mu))
    d_floor = np.abs(th - theta_star(boundary.params))
    return float((np.minimum(d_curve, d_floor) > eta).mean())


def _calibrated_rule(rule, mu, th, train_power_avg, params):
    """Refit the data rule on a simulated trajectory to meet the budget."""
    n = params.n_scale
    sz2 = params.sigma_z2
    data_budget = params.p_av - train_power_avg
    if data_budget <= 0:
        raise InfeasibleError(
            f"training consumed {train_power_avg:g} of a {params.p_av:g} budget"
        )
    if isinstance(rule, WaterFilling):

        def gap(lam):
            return n * waterfill_power_np(mu, th, lam, sz2).mean() - data_budget

        if gap(1e6) > 0:
            raise InfeasibleError("budget not reachable at the maximum power price")
        lam = brentq(gap, 1e-9, 1e6, xtol=1e-14, rtol=1e-12, maxiter=200)
        return WaterFilling(lam=lam)
    q = float((mu > rule.mu0).mean())
    if q <= 0:
        raise InfeasibleError("on-off threshold above every simulated estimate")
    return OnOffRule(mu0=rule.mu0, p0=data_budget / q)


def _apply_rule(rule, mu, th, params):
    n = params.n_scale
    sz2 = params.sigma_z2
    if isinstance(rule, WaterFilling):
        power = n * waterfill_power_np(mu, th, rule.lam, sz2)
    else:
        power = np.where(mu > rule.mu0, rule.p0, 0.0)
    rate = n * rate_np(power / n, mu, th, sz2)
    return power, rate


def evaluate_policy(
    params: ModelParams,
    policy,
    n_blocks: int,
    seeds,
    eta: float = 0.05,
    enforce_budget: bool = True,
    hist_bins: int = 100,
) -> SimStats:
    """Simulate a policy over several seeds and aggregate steady-state stats.

    With ``enforce_budget`` the data rule is refit per seed so pilot + data
    power equals p_av on the trajectory; the reported rule parameters vary
    only through Monte Carlo noise.  The histogram covers the boundary's
    grid span with an overflow bin.
    """
    seeds = tuple(seeds)
    if not seeds:
        raise ValueError("at least one seed is required")
    boundary = getattr(policy, "boundary", None)
    if boundary is not None:
        u_max = boundary.u_max
    else:
        u_max = 5.0 * params.sigma_h2
    edges = np.linspace(0.0, u_max, hist_bins + 1)

    rates, dpows, tpows, tfracs, collapses, lams = [], [], [], [], [], []
    counts = np.zeros(hist_bins)
    overflow = 0
    total = 0
    for seed in seeds:
        trace = simulate_trace(params, policy, n_blocks, seed)
        k = trace.burn_in
        mu = trace.mu_hat[k:]
        th = trace.theta[k:]
        trained = trace.trained[k:]
        tfrac = float(trained.mean())
        train_pow = policy.train_power * tfrac
        rule = policy.data_rule
        if enforce_budget:
            rule = _calibrated_rule(rule, mu, th, train_pow, params)
            power, rate = _apply_rule(rule, mu, th, params)
        else:
            power = trace.data_power[k:]
            rate = trace.rate[k:]
        if isinstance(rule, WaterFilling):
            lams.append(rule.lam)
        rates.append(float(rate.mean()))
        dpows.append(float(power.mean()))
        tpows.append(train_pow)
        tfracs.append(tfrac)
        if boundary is not None:
            collapses.append(collapse_fraction(trace, boundary, eta))
        c, _ = np.histogram(mu, bins=edges)
        counts += c
        overflow += int((mu >= u_max).sum())
        total += len(mu)

    widths = np.diff(edges)
    density = counts / (total * widths)
    return SimStats(
        avg_rate=float(np.mean(rates)),
        avg_data_power=float(np.mean(dpows)),
        avg_train_power=float(np.mean(tpows)),
        train_fraction=float(np.mean(tfracs)),
        collapse_fraction=float(np.mean(collapses)) if collapses else float("nan"),
        rate_se=_se(rates),
        data_power_se=_se(dpows),
        train_power_se=_se(tpows),
        hist_density=density,
        hist_edges=edges,
        overflow_mass=overflow / total,
        n_blocks=n_blocks,
        seeds=seeds,
        eta=eta,
        lam_sim=float(np.mean(lams)) if lams else None,
        per_seed_rate=np.array(rates),
    )


def overhead_rate(boundary: Boundary, data_rule, params: ModelParams) -> float:
    """Stationary rate with the per-block training symbol discounted.

    Each trained block spends one of its m_block symbols on the pilot; at
    estimate u that happens a fraction eps(u)/eps_max of the time, so the
    rate integrand is scaled by 1 - eps(u)/(eps_max*m_block) with
    eps(u) = 2*rho*sigma_z2*(sigma_h2 - theta(u))/theta(u)^2.
    """
    n = params.n_scale
    sz2 = params.sigma_z2
    cap = params.eps_max * params.m_block
    eps_grid = training_power_np(boundary.theta_vals, params)
    if np.any(eps_grid > cap * (1.0 + 1e-9)):
        raise ValueError(
            "training power exceeds eps_max * m_block somewhere: overhead "
            "factor would go negative"
        )
    pdf = steady_pdf(boundary)

    if isinstance(data_rule, WaterFilling):
        lam = data_rule.lam

        def phi(u, th):
            pd = waterfill_power_np(u, th, lam, sz2)
            factor = 1.0 - training_power_np(th, params) / cap
            return factor * n * rate_np(pd, u, th, sz2)

        return pdf.integrate(phi)

    def phi(u, th):
        factor = 1.0 - training_power_np(th, params) / cap
        return factor * n * rate_np(data_rule.p0 / n, u, th, sz2)

    return pdf.integrate(phi, lower=data_rule.mu0)


@dataclass(eq=False)
class PolicyComparison:
    labels: list
    stats: list
    rate_diff: np.ndarray  # paired difference vs the first policy, per seed
    rate_diff_se: np.ndarray

    def rows(self):
        out = []
        for i, (label, st) in enumerate(zip(self.labels, self.stats)):
            out.append(
                {
                    "policy": label,
                    "rate": st.avg_rate,
                    "rate_se": st.rate_se,
                    "data_power": st.avg_data_power,
                    "train_power": st.avg_train_power,
                    "train_fraction": st.train_fraction,
                    "rate_diff_vs_first": float(self.rate_diff[i]),
                    "rate_diff_se": float(self.rate_diff_se[i]),
                }
            )
        return out


def compare_policies(
    params: ModelParams,
    policies,
    n_blocks: int,
    seeds,
    labels=None,
    enforce_budget: bool = True,
) -> PolicyComparison:
    """Evaluate policies under common random numbers and pair the differences.

    All policies see identical noise streams (same seeds), so per-seed rate
    differences cancel shared channel randomness and their standard errors
    are far below those of independent runs.
    """
    if len(policies) < 2:
        raise ValueError("need at least two policies to compare")
    if labels is None:
        labels = [f"policy-{i}" for i in range(len(policies))]
    stats = [
        evaluate_policy(params, pol, n_blocks, seeds, enforce_budget=enforce_budget)
        for pol in policies
    ]
    base = stats[0].per_seed_rate
    diffs = np.array([st.per_seed_rate - base for st in stats])
    return PolicyComparison(
        labels=list(labels),
        stats=stats,
        rate_diff=diffs.mean(axis=1),
        rate_diff_se=np.array([_se(d) for d in diffs]),
    )
