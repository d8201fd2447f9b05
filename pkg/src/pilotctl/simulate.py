"""Discrete-time channel simulation: Gauss-Markov fading plus the per-block
Kalman tracker, driven by a pilot/data policy.

One coherence block is one recursion step.  A trained block carries a single
pilot symbol whose energy is the whole block's training budget (the tracker
depends on pilot energy only, so concentrating it in one symbol is optimal);
an untrained block runs the pure prediction update.  Training energy per
block is eps_max * m_block / n_scale, matching the scaled units used by the
analysis, and recorded powers and rates are in those units as well.

Randomness: one unit complex Gaussian per block for the channel innovation
and one for the measurement noise, consumed in a fixed order and drawn
whether or not the block trains, so that traces with the same seed see the
same randomness under any policy (common random numbers).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import ModelParams
from .policy import ConstantTrainingPolicy, OnOffRule, Policy, WaterFilling

_SQRT_HALF = math.sqrt(0.5)


@dataclass(frozen=True)
class KalmanState:
    """Tracker state: complex channel estimate and its error variance."""

    h_hat: complex
    theta: float


def channel_step(h: complex, r: float, sigma_h2: float, noise: complex) -> complex:
    """One Gauss-Markov step r*h + sqrt(1-r^2)*sigma_h*w.

    ``noise`` is a unit circularly-symmetric complex Gaussian draw.
    """
    if not 0.0 <= r <= 1.0:
        raise ValueError(f"correlation r must lie in [0, 1], got {r!r}")
    return r * h + math.sqrt((1.0 - r * r) * sigma_h2) * noise


def kalman_step(
    state: KalmanState,
    eps_block: float,
    h_true: complex,
    params: ModelParams,
    noise: complex,
) -> KalmanState:
    """Predict across one block, then measure one pilot of energy eps_block * M.

    With eps_block = 0 only the prediction runs: h_hat <- r*h_hat and
    theta <- r^2*theta + (1-r^2)*sigma_h2.  ``noise`` is a unit CSCG draw
    for the pilot measurement (ignored when not training).
    """
    if eps_block < 0:
        raise ValueError("training energy must be nonnegative")
    r = params.block_corr
    s2 = params.sigma_h2
    sz2 = params.sigma_z2
    theta_pred = r * r * state.theta + (1.0 - r * r) * s2
    h_pred = r * state.h_hat
    if eps_block == 0.0:
        return KalmanState(h_hat=h_pred, theta=theta_pred)
    energy = eps_block * params.m_block
    theta_new = sz2 * theta_pred / (energy * theta_pred + sz2)
    gain = math.sqrt(energy) * theta_new / sz2
    innovation = h_true - h_pred
    h_new = h_pred + gain * (math.sqrt(energy) * innovation + math.sqrt(sz2) * noise)
    return KalmanState(h_hat=h_new, theta=theta_new)


@dataclass(eq=False)
class Trace:
    """Per-block record of one simulated run (arrays of length n_blocks)."""

    params: ModelParams
    seed: int
    mu_hat: np.ndarray
    theta: np.ndarray
    trained: np.ndarray
    data_power: np.ndarray
    rate: np.ndarray

    @property
    def n_blocks(self) -> int:
        return len(self.mu_hat)

    @property
    def burn_in(self) -> int:
        return burn_in_length(self.n_blocks)


def burn_in_length(n_blocks: int) -> int:
    """Blocks excluded from steady-state statistics: 10%, at least 1e4,
    never more than half the trace."""
    return min(max(n_blocks // 10, 10_000), n_blocks // 2)


def _boundary_lookup_table(boundary, n_cells: int = 4096):
    """Resample the boundary to a uniform grid for O(1) lookup in the loop."""
    u_max = boundary.u_max
    grid = np.linspace(0.0, u_max, n_cells + 1)
    theta = np.interp(grid, boundary.grid, boundary.theta_vals)
    return grid, theta.tolist(), n_cells / u_max


def simulate_trace(params: ModelParams, policy, n_blocks: int, seed: int) -> Trace:
    """Run the block recursion under a policy; deterministic given the seed.

    The policy decides training for a block from the state left by the
    previous block (the decision is fed back before the block starts), and
    data power from the freshly updated state; the recorded rate uses that
    same updated state.  ``policy`` needs ``should_train(mu, theta)`` and
    ``data_power(mu, theta)``; :class:`~pilotctl.policy.Policy` instances
    additionally get a fast inlined path.
    """
    if n_blocks < 1:
        raise ValueError("n_blocks must be positive")
    rng = np.random.default_rng(seed)
    draws = rng.standard_normal(2 + 4 * n_blocks)

    r = params.block_corr
    r2 = r * r
    s2 = params.sigma_h2
    sz2 = params.sigma_z2
    n = params.n_scale
    innov_scale = math.sqrt((1.0 - r2) * s2 * 0.5)
    meas_scale = math.sqrt(sz2 * 0.5)
    # pilot energy per trained block; bang-bang policies train at the peak
    train_power = getattr(policy, "train_power", params.eps_max)
    energy = train_power * params.m_block / n
    sqrt_energy = math.sqrt(energy)
    log1p = math.log1p

    # channel and estimate as component floats
    hr = math.sqrt(s2 * 0.5) * draws[0]
    hj = math.sqrt(s2 * 0.5) * draws[1]
    ehr = 0.0
    ehj = 0.0
    theta = s2 * (1.0 - 1e-12)
    g = draws[2:].tolist()

    # specialize the per-block decision functions
    fast_rule = None
    fast_pilot = None
    if isinstance(policy, (Policy, ConstantTrainingPolicy)):
        if isinstance(policy, Policy):
            bt_grid, bt_theta, bt_scale = _boundary_lookup_table(policy.boundary)
            bt_last = bt_theta[-1]
            bt_n = len(bt_theta) - 1
            fast_pilot = "table"
        else:
            fast_pilot = "always"
        rule = policy.data_rule
        if isinstance(rule, WaterFilling):
            fast_rule = ("wf", rule.lam)
        elif isinstance(rule, OnOffRule):
            fast_rule = ("onoff", rule.mu0, rule.p0)

    mu_out = np.empty(n_blocks)
    th_out = np.empty(n_blocks)
    tr_out = np.empty(n_blocks, dtype=bool)
    pw_out = np.empty(n_blocks)
    rt_out = np.empty(n_blocks)

    j = 0
    for i in range(n_blocks):
        mu = ehr * ehr + ehj * ehj
        if fast_pilot == "table":
            x = mu * bt_scale
            if x >= bt_n:
                th_b = bt_last
            else:
                k = int(x)
                frac = x - k
                th_b = bt_theta[k] * (1.0 - frac) + bt_theta[k + 1] * frac
            train = theta >= th_b
        elif fast_pilot == "always":
            train = True
        else:
            train = policy.should_train(mu, theta)

        wr = g[j]
        wj = g[j + 1]
        zr = g[j + 2]
        zj = g[j + 3]
        j += 4
        hr = r * hr + innov_scale * wr
        hj = r * hj + innov_scale * wj

        theta_pred = r2 * theta + (1.0 - r2) * s2
        if train:
            theta = sz2 * theta_pred / (energy * theta_pred + sz2)
            gain = sqrt_energy * theta / sz2
            pr = r * ehr
            pj = r * ehj
            ehr = pr + gain * (sqrt_energy * (hr - pr) + meas_scale * zr)
            ehj = pj + gain * (sqrt_energy * (hj - pj) + meas_scale * zj)
        else:
            theta = theta_pred
            ehr = r * ehr
            ehj = r * ehj

        mu = ehr * ehr + ehj * ehj
        if fast_rule is None:
            power = policy.data_power(mu, theta)
        elif fast_rule[0] == "wf":
            lam = fast_rule[1]
            if mu > lam * sz2:
                disc = (
                    lam * lam * mu * mu * sz2 * sz2
                    + 4.0 * lam * mu * mu * theta * sz2
                    + 4.0 * lam * mu * theta * theta * sz2
                )
                pd = (-lam * sz2 * (2.0 * theta + mu) + math.sqrt(disc)) / (
                    2.0 * lam * theta * (mu + theta)
                )
                power = n * pd if pd > 0.0 else 0.0
            else:
                power = 0.0
        else:
            power = fast_rule[2] if mu > fast_rule[1] else 0.0

        mu_out[i] = mu
        th_out[i] = theta
        tr_out[i] = train
        pw_out[i] = power
        rt_out[i] = n * log1p(power * mu / (power * theta + n * sz2)) if power > 0.0 else 0.0

    return Trace(
        params=params,
        seed=seed,
        mu_hat=mu_out,
        theta=th_out,
        trained=tr_out,
        data_power=pw_out,
        rate=rt_out,
    )


def theta_recursion(
    params: ModelParams, eps: float, n_blocks: int, theta0: float | None = None
) -> np.ndarray:
    """Deterministic error-variance recursion under a constant training power.

    ``eps`` is in scaled units (energy eps * dt per block).  Returns the
    trajectory including the initial value; used to compare the block
    recursion against its continuous-time limit.
    """
    r2 = params.block_corr**2
    s2 = params.sigma_h2
    sz2 = params.sigma_z2
    energy = eps * params.dt
    th = s2 if theta0 is None else theta0
    out = np.empty(n_blocks + 1)
    out[0] = th
    for i in range(n_blocks):
        th_pred = r2 * th + (1.0 - r2) * s2
        th = sz2 * th_pred / (energy * th_pred + sz2) if energy > 0 else th_pred
        out[i + 1] = th
    return out


def write_trace_csv(trace: Trace, path):
    """Dump per-block records as CSV (block, mu_hat, theta, trained,
    data_power, rate)."""
    with open(path, "w") as fh:
        fh.write("block,mu_hat,theta,trained,data_power,rate\n")
        for i in range(trace.n_blocks):
            fh.write(
                f"{i},{trace.mu_hat[i]:.10g},{trace.theta[i]:.10g},"
                f"{int(trace.trained[i])},{trace.data_power[i]:.10g},{trace.rate[i]:.10g}\n"
            )
