"""On-off data power allocation: one-bit data feedback.

Data power is restricted to {0, p0} with a threshold mu0 on the channel
estimate.  Under the total power budget met with equality the on-power is
pinned to p0 = (p_av - eps_avg) / q with q the stationary probability of
transmitting, which turns the rate into a function of the threshold and the
switching boundary alone.  The boundary enters the asymptotics only through
the harmonic mean of sigma_h2 - theta over [0, mu0]; the optimal threshold
grows like that harmonic mean times log N.

The boundary itself is re-optimized for the on-off profile with the same
backward recursion as the water-filling case, with the data power fixed at
p0 above the threshold and the curve extended flat beyond it (its shape
there is asymptotically immaterial).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .boundary import (
    Boundary,
    GridSpec,
    SteadyPdf,
    _bisect,
    _descending_root,
    _laggauss,
    _log_mean,
    avg_training_power,
    calibrate_lambda,
    steady_pdf,
    theta_star,
    training_power_np,
)
from .errors import InfeasibleError, SolverError
from .model import ModelParams, rate_np
from .policy import OnOffRule

__all__ = [
    "OnOffRule",
    "OnOffResult",
    "transmit_prob",
    "onoff_rate",
    "rate_bounds",
    "harmonic_mean",
    "solve_onoff_boundary",
    "optimize_onoff",
    "growth_diagnostic",
]


def transmit_prob(boundary: Boundary, mu0: float) -> float:
    """Stationary probability q that the estimate exceeds the threshold."""
    if mu0 < 0:
        raise ValueError("mu0 must be nonnegative")
    return steady_pdf(boundary).survival_at(mu0)


def harmonic_mean(boundary: Boundary, mu0: float) -> float:
    """Harmonic mean of sigma_h2 - theta(u) over [0, mu0] along the curve."""
    if mu0 <= 0:
        raise ValueError("mu0 must be positive")
    q = transmit_prob(boundary, mu0)
    return mu0 / (-math.log(q))


def _onoff_rate_from_pdf(
    pdf: SteadyPdf, mu0: float, eps_avg: float, params: ModelParams, overhead: bool = False
) -> float:
    """Rate of the budget-saturating on-off rule at threshold mu0."""
    if eps_avg >= params.p_av:
        raise InfeasibleError(
            f"training power {eps_avg:g} exceeds the total budget {params.p_av:g}"
        )
    n = params.n_scale
    sz2 = params.sigma_z2
    c = params.p_av - eps_avg
    q = pdf.survival_at(mu0)
    if q <= 0.0:
        return 0.0
    cap = params.eps_max * params.m_block

    def phi(u, th):
        val = n * np.log1p(c * u / (c * th + sz2 * n * q))
        if overhead:
            val = val * (1.0 - training_power_np(th, params) / cap)
        return val

    return pdf.integrate(phi, lower=mu0)


def onoff_rate(boundary: Boundary, rule: OnOffRule, params: ModelParams) -> float:
    """Stationary rate of the on-off rule with the budget met with equality.

    The on-power implied by the budget, (p_av - eps_avg)/q, is used
    directly; rule.p0 records the same value when the rule was produced by
    the optimizer.
    """
    pdf = steady_pdf(boundary)
    return _onoff_rate_from_pdf(pdf, rule.mu0, avg_training_power(boundary), params)


def rate_bounds(boundary: Boundary, rule: OnOffRule, params: ModelParams) -> tuple[float, float]:
    """Closed-form bracket around the on-off rate.

    Lower: every transmitting state is at least as good as (mu0, sigma_h2).
    Upper: drop the estimation error and apply Jensen, bounding the mean
    estimate beyond the threshold by mu0 + sigma_h2.
    """
    eps_avg = avg_training_power(boundary)
    if eps_avg >= params.p_av:
        raise InfeasibleError(
            f"training power {eps_avg:g} exceeds the total budget {params.p_av:g}"
        )
    c = params.p_av - eps_avg
    n = params.n_scale
    sz2 = params.sigma_z2
    s2 = params.sigma_h2
    q = transmit_prob(boundary, rule.mu0)
    if q <= 0:
        return 0.0, 0.0
    lower = n * q * math.log1p(c * rule.mu0 / (c * s2 + sz2 * n * q))
    upper = n * q * math.log1p(c * (rule.mu0 + s2) / (sz2 * n * q))
    return lower, upper


def _onoff_lagrangian_terms(u, th, p0, lam, params: ModelParams, overhead: bool = False):
    """Lagrangian and theta-derivative at fixed data power p0 (scalars).

    With ``overhead`` the rate term carries the training-symbol discount
    (1 - eps(theta)/(eps_max*m_block)), whose theta-derivative rewards
    higher curves in regions that earn rate.
    """
    n = params.n_scale
    sz2 = params.sigma_z2
    rho = params.rho
    s2 = params.sigma_h2
    eps_t = 2.0 * rho * sz2 * (s2 - th) / (th * th)
    train_marginal = 2.0 * rho * sz2 * (2.0 * s2 - th) / (th * th * th)
    if p0 <= 0.0:
        return -lam * eps_t, lam * train_marginal
    rate_val = n * math.log1p((p0 / n) * u / ((p0 / n) * th + sz2))
    rate_term = -(n * p0 * p0 * u) / (
        (p0 * th + p0 * u + n * sz2) * (p0 * th + n * sz2)
    )
    if not overhead:
        return rate_val - lam * (p0 + eps_t), rate_term + lam * train_marginal
    cap = params.eps_max * params.m_block
    factor = 1.0 - eps_t / cap
    lag = factor * rate_val - lam * (p0 + eps_t)
    dlag = factor * rate_term + rate_val * train_marginal / cap + lam * train_marginal
    return lag, dlag


def _onoff_theta_flat(lam: float, p0: float, params: ModelParams) -> float:
    """Curve height where sustaining accuracy exactly pays for itself when
    transmitting at p0 with an arbitrarily large estimate."""
    s2 = params.sigma_h2
    sz2 = params.sigma_z2
    n = params.n_scale

    def resid(th):
        lhs = 2.0 * lam * params.rho * sz2 * (2.0 * s2 - th) / th**3
        rhs = n * p0 / (p0 * th + n * sz2)
        return lhs - rhs

    hi = s2 * (1.0 - 1e-12)
    if resid(hi) > 0:
        err = InfeasibleError(
            f"power price lam={lam:g} too large for on-off power {p0:g}"
        )
        err.reason = "multiplier_too_large"
        raise err
    lo = 1e-12 * s2
    return _bisect(resid, lo, hi, resid(lo), resid(hi), xtol=1e-14)


def _onoff_tail_expectation(lam, p0, params, u_max, th, overhead):
    """Expected Lagrangian beyond the grid, curve held flat at th."""
    beta = params.sigma_h2 - th
    lx, lw = _laggauss()
    v = u_max + beta * lx
    vals = np.array(
        [_onoff_lagrangian_terms(vi, th, p0, lam, params, overhead=overhead)[0] for vi in v]
    )
    return float(np.dot(lw, vals))


def _onoff_terminal_theta(lam, p0, params, u_max, t_star):
    """Terminal curve height for the overhead-aware recursion.

    The pointwise accuracy/overhead stationarity has no solution at large
    estimates (the overhead discount's value grows with the rate), so the
    grid edge is closed with the full balance against its own flat tail.
    """
    s2 = params.sigma_h2

    def closure(th):
        lag, dlag = _onoff_lagrangian_terms(u_max, th, p0, lam, params, overhead=True)
        tail = _onoff_tail_expectation(lam, p0, params, u_max, th, True)
        return (s2 - th) * dlag + lag - tail

    root, mode = _descending_root(closure, t_star + 1e-9, s2 * (1.0 - 1e-9), t_star)
    if mode == "argmin" or (mode == "root" and root >= s2 * (1.0 - 1e-8)):
        err = InfeasibleError(f"power price lam={lam:g} too large under overhead")
        err.reason = "multiplier_too_large"
        raise err
    return t_star if mode == "floor" else max(root, t_star)


def solve_onoff_boundary(
    lam: float,
    mu0: float,
    p0: float,
    params: ModelParams,
    grid: GridSpec | None = None,
    overhead: bool = False,
) -> Boundary:
    """Backward recursion for the boundary under an on-off data profile.

    Without overhead, nodes above the threshold are held flat at the height
    where marginal accuracy pays for itself, and only the no-data region is
    solved; the shape above the threshold is asymptotically immaterial.
    With ``overhead`` the Lagrangian discounts the training symbol, which
    has no large-estimate stationary point, so every node is solved with a
    self-consistent closure at the grid edge.
    """
    if lam <= 0 or p0 <= 0 or mu0 < 0:
        raise ValueError("lam and p0 must be positive, mu0 nonnegative")
    nodes = (grid or GridSpec()).nodes(params)
    s2 = params.sigma_h2
    t_star = theta_star(params)
    k_last = len(nodes) - 1
    theta = np.empty_like(nodes)

    if overhead:
        solve_from = k_last - 1
        th_term = _onoff_terminal_theta(lam, p0, params, float(nodes[-1]), t_star)
        theta[k_last] = th_term
        j_acc = _onoff_tail_expectation(lam, p0, params, float(nodes[-1]), th_term, True)
    else:
        th_flat = max(_onoff_theta_flat(lam, p0, params), t_star)
        j0 = min(int(np.searchsorted(nodes, mu0, side="left")), k_last)
        solve_from = j0 - 1
        theta[j0:] = th_flat
        j_acc = _onoff_tail_expectation(lam, p0, params, float(nodes[-1]), th_flat, False)

    def lag_terms(u, th, p):
        return _onoff_lagrangian_terms(u, th, p, lam, params, overhead=overhead)

    def power_at(idx):
        return p0 if nodes[idx] > mu0 else 0.0

    w_next = lag_terms(nodes[-1], theta[k_last], power_at(k_last))[0]
    flagged = []
    for k in range(k_last - 1, -1, -1):
        uk = float(nodes[k])
        du = float(nodes[k + 1] - nodes[k])
        th_next = theta[k + 1]
        b_next = s2 - th_next
        pk = power_at(k)
        if k > solve_from:
            # flat region (no-overhead case): accumulate the expectation only
            w_k = lag_terms(uk, th_next, pk)[0]
            e_g = math.exp(-du / b_next)
            theta[k] = th_next
            j_acc = 0.5 * (w_k + w_next) * (1.0 - e_g) + e_g * j_acc
            w_next = w_k
            continue

        def balance(th):
            w_k, dw_k = lag_terms(uk, th, pk)
            g_int = du / _log_mean(s2 - th, b_next)
            e_g = math.exp(-g_int)
            rhs = 0.5 * (w_k + w_next) * (1.0 - e_g) + e_g * j_acc
            return (s2 - th) * dw_k + w_k - rhs

        root, mode = _descending_root(balance, t_star + 1e-9, s2 * (1.0 - 1e-9), th_next)
        if mode == "floor":
            theta[k] = t_star
        else:
            theta[k] = max(root, t_star)
            if mode == "argmin":
                flagged.append(k)
        w_k = lag_terms(uk, theta[k], pk)[0]
        g_int = du / _log_mean(s2 - theta[k], b_next)
        e_g = math.exp(-g_int)
        j_acc = 0.5 * (w_k + w_next) * (1.0 - e_g) + e_g * j_acc
        w_next = w_k

    return Boundary(
        grid=nodes,
        theta_vals=theta,
        kind="free",
        params=params,
        lam=lam,
        flagged=np.array(sorted(flagged), dtype=int),
    )


def _best_threshold(pdf: SteadyPdf, eps_avg: float, params: ModelParams, overhead: bool):
    """Scan grid nodes for the rate-maximizing on-off threshold."""
    best = (-math.inf, 0.0)
    for u in pdf.grid[:-1]:
        r = _onoff_rate_from_pdf(pdf, float(u), eps_avg, params, overhead=overhead)
        if r > best[0]:
            best = (r, float(u))
    return best[1], best[0]


@dataclass(frozen=True)
class OnOffResult:
    boundary: Boundary
    rule: OnOffRule
    rate: float
    lam: float


def _calibrate_onoff_lambda(mu0, p0, params, grid, overhead=False, rel_tol=1e-3):
    """Power price at which the on-off policy consumes exactly p_av.

    Total power at fixed (mu0, p0) is monotone nonincreasing in the price;
    when it saturates below the budget even at a negligible price (the
    overhead-aware curve caps how much training the transmit region will
    carry), the on-power is scaled up and the search restarts.  Returns
    (lam, boundary, p0).
    """
    target = params.p_av

    for _ in range(30):

        def total(lam):
            try:
                b = solve_onoff_boundary(lam, mu0, p0, params, grid, overhead=overhead)
            except InfeasibleError as err:
                if getattr(err, "reason", "") == "multiplier_too_large":
                    return 0.0, None
                raise
            eps_avg = avg_training_power(b)
            q = steady_pdf(b).survival_at(mu0)
            return q * p0 + eps_avg, b

        lo = hi = 1.0 / (params.sigma_z2 + target)
        t_lo, _b = total(lo)
        saturated = False
        while t_lo < target:
            lo *= 0.25
            if lo < 1e-6:
                saturated = True
                break
            t_lo, _b = total(lo)
        if saturated:
            if t_lo <= 0:
                raise SolverError("on-off policy consumes no power at any price")
            p0 *= max(target / t_lo, 1.25)
            continue
        t_hi, _b = total(hi)
        while t_hi > target:
            hi *= 4.0
            if hi > 1e6:
                raise SolverError("no on-off lambda gets under the power budget")
            t_hi, _b = total(hi)
        for _i in range(200):
            mid = math.sqrt(lo * hi)
            t_mid, b_mid = total(mid)
            if b_mid is not None and abs(t_mid - target) <= rel_tol * target:
                return mid, b_mid, p0
            if t_mid > target:
                lo = mid
            else:
                hi = mid
        raise SolverError("on-off lambda calibration did not converge")
    raise SolverError("on-off power split did not stabilize")


def optimize_onoff(
    params: ModelParams,
    grid: GridSpec | None = None,
    overhead: bool = False,
    max_rounds: int = 20,
    rel_tol: float = 1e-5,
) -> OnOffResult:
    """Jointly optimize the boundary, threshold, and on-power.

    Alternates between (a) re-fitting the threshold by direct scan of the
    rate over grid nodes with the on-power pinned by the power budget, and
    (b) re-solving the boundary for the resulting on-off profile with the
    power price recalibrated.  Starts from the water-filling boundary.
    With ``overhead`` the threshold scan and the reported rate discount the
    training-symbol overhead.
    """
    if params.p_av <= 0:
        raise ValueError("optimization needs p_av > 0")
    grid = grid or GridSpec()
    lam, boundary = calibrate_lambda(params, family="free", grid=grid)
    best = None
    prev_rate = None
    for _round in range(max_rounds):
        pdf = steady_pdf(boundary)
        eps_avg = avg_training_power(boundary)
        if eps_avg >= params.p_av:
            raise InfeasibleError(
                f"training power {eps_avg:g} exceeds the budget {params.p_av:g}"
            )
        mu0, rate = _best_threshold(pdf, eps_avg, params, overhead)
        q = pdf.survival_at(mu0)
        p0 = (params.p_av - eps_avg) / q
        rule = OnOffRule(mu0=mu0, p0=p0)
        if best is None or rate > best.rate:
            best = OnOffResult(boundary=boundary, rule=rule, rate=rate, lam=lam)
        if prev_rate is not None and rate <= prev_rate * (1.0 + rel_tol):
            break
        prev_rate = rate
        lam, boundary, p0 = _calibrate_onoff_lambda(
            mu0, p0, params, grid, overhead=overhead
        )
    return best


def growth_diagnostic(params: ModelParams, n_values, grid: GridSpec | None = None):
    """Optimize the on-off scheme across channel-use scales.

    Returns one row per N: (n, mu0, rate, rate / log N).  The threshold
    should grow like the harmonic mean times log N and the rate like log N.
    """
    if not n_values:
        raise ValueError("n_values must be nonempty")
    rows = []
    for n in n_values:
        p = ModelParams(
            sigma_h2=params.sigma_h2,
            sigma_z2=params.sigma_z2,
            rho=params.rho,
            n_scale=int(n),
            m_block=params.m_block,
            eps_max=params.eps_max,
            p_av=params.p_av,
        )
        res = optimize_onoff(p, grid=grid)
        rows.append(
            {
                "n_scale": int(n),
                "mu0": res.rule.mu0,
                "p0": res.rule.p0,
                "rate": res.rate,
                "rate_per_log_n": res.rate / math.log(n),
            }
        )
    return rows
