"""Figure rendering for scenario outputs.

Every scenario writes delimited data files; these helpers render the same
data to PNG alongside them.  Rendering is headless (Agg) and deterministic
given the data.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

plt.rcParams.update(
    {
        "figure.figsize": (7.5, 5.0),
        "figure.dpi": 110,
        "savefig.dpi": 150,
        "axes.grid": True,
        "grid.alpha": 0.3,
        "lines.linewidth": 1.8,
        "font.size": 10,
    }
)


def _finish(fig, path):
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_boundaries(curves, path):
    """curves: list of dicts with u, theta_free, theta_vertical, snr_db."""
    fig, ax = plt.subplots()
    for c in curves:
        line, = ax.plot(c["u"], c["theta_free"], label=f"free, {c['snr_db']:g} dB")
        ax.axhline(c["theta_vertical"], color=line.get_color(), linestyle="--", alpha=0.6)
    ax.set_xlabel("channel estimate  $\\hat\\mu$")
    ax.set_ylabel("error variance  $\\theta$")
    ax.set_title("Pilot switching boundaries (dashed: optimized vertical)")
    ax.legend()
    return _finish(fig, path)


def plot_rate_vs_snr(rows, path, ylab="rate (nats / time unit)"):
    fig, ax = plt.subplots()
    snr = [r["snr_db"] for r in rows]
    keys = [k for k in rows[0] if k != "snr_db" and not k.endswith("_se")]
    for k in keys:
        vals = [r[k] for r in rows]
        se_key = k + "_se"
        if se_key in rows[0]:
            ax.errorbar(snr, vals, yerr=[2 * r[se_key] for r in rows], label=k, capsize=3)
        else:
            ax.plot(snr, vals, marker="o", label=k)
    ax.set_xlabel("SNR (dB)")
    ax.set_ylabel(ylab)
    ax.legend()
    return _finish(fig, path)


def plot_eps_vs_m(rows, path):
    fig, ax = plt.subplots()
    m = [r["m_block"] for r in rows]
    ax.plot(m, [r["eps_analytic"] for r in rows], marker="s", label="analysis")
    ax.errorbar(
        m,
        [r["eps_sim"] for r in rows],
        yerr=[2 * r["eps_sim_se"] for r in rows],
        marker="o",
        capsize=3,
        label="simulation",
    )
    ax.set_xlabel("symbols per coherence block  M")
    ax.set_ylabel("average training power")
    ax.legend()
    return _finish(fig, path)


def plot_pdf(u, analytic, hist_edges, hist_density, path):
    fig, ax = plt.subplots()
    centers = 0.5 * (np.asarray(hist_edges[:-1]) + np.asarray(hist_edges[1:]))
    ax.plot(centers, hist_density, drawstyle="steps-mid", label="simulation")
    ax.plot(u, analytic, label="analysis")
    ax.set_xlabel("channel estimate  $\\hat\\mu$")
    ax.set_ylabel("stationary density")
    ax.legend()
    return _finish(fig, path)


def plot_trace(mu, theta, boundary_u, boundary_theta, theta_floor, path, max_points=60000):
    fig, ax = plt.subplots()
    step = max(len(mu) // max_points, 1)
    ax.plot(theta[::step], mu[::step], ".", markersize=1.2, alpha=0.3, label="state")
    ax.plot(boundary_theta, boundary_u, "r-", label="boundary")
    ax.axvline(theta_floor, color="k", linestyle=":", label="error floor")
    ax.set_xlabel("error variance  $\\theta$")
    ax.set_ylabel("channel estimate  $\\hat\\mu$")
    ax.legend()
    return _finish(fig, path)


def plot_growth(rows, path):
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4.2))
    n = [r["n_scale"] for r in rows]
    ax1.semilogx(n, [r["mu0"] for r in rows], marker="o")
    ax1.set_xlabel("channel uses per time unit  N")
    ax1.set_ylabel("optimal threshold  $\\hat\\mu_0$")
    ax2.semilogx(n, [r["rate_per_log_n"] for r in rows], marker="o")
    ax2.set_xlabel("channel uses per time unit  N")
    ax2.set_ylabel("rate / log N")
    return _finish(fig, path)
