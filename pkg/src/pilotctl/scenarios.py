"""Scenario runner: experiment configs to data files and figures.

A scenario config is a JSON object selecting one named experiment plus the
channel constants, sweep lists, and simulation controls it needs.  Each
scenario writes CSV data (with a JSON provenance header line), JSON
summaries where the results are scalars, and a PNG figure rendered from the
same data.  Re-running a scenario with an identical config produces
byte-identical data files.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict

import numpy as np

from . import plots
from .boundary import (
    GridSpec,
    achievable_rate,
    avg_training_power,
    calibrate_lambda,
    save_boundary,
    steady_pdf,
    theta_star,
    optimize_vertical,
    vertical_boundary,
)
from .errors import ConfigError
from .evaluate import evaluate_policy
from .model import ModelParams, training_power
from .onoff import growth_diagnostic, optimize_onoff
from .policy import ConstantTrainingPolicy, Policy, WaterFilling
from .simulate import simulate_trace, write_trace_csv

ARTIFACT_VERSION = "0.1.0"

SCENARIOS = (
    "boundaries",
    "rate-vs-snr",
    "eps-vs-M",
    "pdf",
    "onoff",
    "overhead",
    "trace",
    "growth",
)

_SIM_SCENARIOS = {"pdf", "eps-vs-M", "trace"}

_PARAM_FIELDS = ("sigma_h2", "sigma_z2", "rho", "n_scale", "m_block", "eps_max")


def _params_from_config(config, snr_db=None) -> ModelParams:
    raw = dict(config.get("params", {}))
    raw.setdefault("p_av", 1.0)
    p = ModelParams(**raw)
    if snr_db is not None:
        p = p.with_snr_db(snr_db)
    return p


def _grid_from_config(config) -> GridSpec:
    return GridSpec(**config.get("grid", {}))


def validate(config) -> list[str]:
    """Check a scenario config; returns a list of violations (empty if ok)."""
    out = []
    scenario = config.get("scenario")
    if scenario not in SCENARIOS:
        out.append(f"unknown scenario {scenario!r}; expected one of {', '.join(SCENARIOS)}")
        return out
    try:
        params = _params_from_config(config)
    except (TypeError, ValueError) as err:
        out.append(f"bad params: {err}")
        return out
    if params.eps_max <= 0:
        out.append("peak training power must be positive")
    if params.m_block > params.n_scale:
        out.append("m_block must not exceed n_scale")
    if theta_star(params) >= params.sigma_h2:
        out.append("error floor reaches the prior variance")
    try:
        _grid_from_config(config)
    except (TypeError, ValueError) as err:
        out.append(f"bad grid: {err}")

    needs_snr_list = scenario in ("boundaries", "rate-vs-snr", "onoff", "overhead")
    if needs_snr_list and not config.get("snr_db_list"):
        out.append(f"scenario {scenario} needs a nonempty snr_db_list")
    if scenario in ("pdf", "trace", "eps-vs-M") and "snr_db" not in config:
        out.append(f"scenario {scenario} needs snr_db")
    if scenario == "eps-vs-M" and not config.get("m_list"):
        out.append("scenario eps-vs-M needs a nonempty m_list")
    if scenario == "growth" and not config.get("n_list"):
        out.append("scenario growth needs a nonempty n_list")

    simulates = scenario in _SIM_SCENARIOS or (
        scenario == "rate-vs-snr" and config.get("simulate", False)
    )
    if simulates:
        if not config.get("seeds"):
            out.append(f"scenario {scenario} simulates and needs a nonempty seed list")
        if int(config.get("n_blocks", 0)) < 1:
            out.append("n_blocks must be a positive integer")
    if scenario == "eps-vs-M":
        for m in config.get("m_list", []):
            if m > params.n_scale:
                out.append(f"m_list entry {m} exceeds n_scale")
    return out


def _header_line(config) -> str:
    echo = {"config": config, "version": ARTIFACT_VERSION}
    return "# " + json.dumps(echo, sort_keys=True)


def parse_header(path) -> dict:
    """Recover the config echo from an output file's provenance header."""
    with open(path) as fh:
        first = fh.readline()
    if not first.startswith("# "):
        raise ConfigError(f"{path}: no provenance header")
    return json.loads(first[2:])


def _write_csv(path, config, columns, rows):
    with open(path, "w") as fh:
        fh.write(_header_line(config) + "\n")
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(row[c]) for c in columns) + "\n")
    return path


def _fmt(x):
    if isinstance(x, float):
        return f"{x:.10g}"
    return str(x)


def _write_json(path, config, payload):
    with open(path, "w") as fh:
        json.dump(
            {"config": config, "version": ARTIFACT_VERSION, "results": payload},
            fh,
            sort_keys=True,
            indent=2,
        )
        fh.write("\n")
    return path


# ---------------------------------------------------------------------------
# per-point workers (module-level so a process pool can pickle them)
# ---------------------------------------------------------------------------


def _point_rate_vs_snr(config, snr_db):
    params = _params_from_config(config, snr_db)
    grid = _grid_from_config(config)
    lam, bnd = calibrate_lambda(params, family="free", grid=grid)
    rate_free = achievable_rate(bnd, lam, params)
    theta_v, lam_v, rate_vert = optimize_vertical(params, grid=grid)
    row = {
        "snr_db": snr_db,
        "rate_free": rate_free,
        "rate_vertical": rate_vert,
        "lam_free": lam,
        "theta_v": theta_v,
    }
    if config.get("simulate", False):
        seeds = config["seeds"]
        n_blocks = int(config["n_blocks"])
        st_f = evaluate_policy(
            params, Policy(boundary=bnd, data_rule=WaterFilling(lam=lam)), n_blocks, seeds
        )
        pol_v = ConstantTrainingPolicy(
            eps=training_power(theta_v, params),
            data_rule=WaterFilling(lam=lam_v),
            params=params,
        )
        st_v = evaluate_policy(params, pol_v, n_blocks, seeds)
        row.update(
            rate_free_sim=st_f.avg_rate,
            rate_free_sim_se=st_f.rate_se,
            rate_vertical_sim=st_v.avg_rate,
            rate_vertical_sim_se=st_v.rate_se,
        )
    return row


def _point_boundaries(config, snr_db):
    params = _params_from_config(config, snr_db)
    grid = _grid_from_config(config)
    lam, bnd = calibrate_lambda(params, family="free", grid=grid)
    theta_v, _, _ = optimize_vertical(params, grid=grid)
    return {
        "snr_db": snr_db,
        "u": bnd.grid.tolist(),
        "theta_free": bnd.theta_vals.tolist(),
        "theta_vertical": theta_v,
        "lam": lam,
    }


def _point_eps_vs_m(config, m_block):
    snr_db = config["snr_db"]
    params = _params_from_config(config, snr_db)
    params = ModelParams(**{**asdict(params), "m_block": int(m_block)})
    grid = _grid_from_config(config)
    lam, bnd = calibrate_lambda(params, family="free", grid=grid)
    eps_analytic = avg_training_power(bnd)
    st = evaluate_policy(
        params,
        Policy(boundary=bnd, data_rule=WaterFilling(lam=lam)),
        int(config["n_blocks"]),
        config["seeds"],
    )
    return {
        "m_block": int(m_block),
        "eps_analytic": eps_analytic,
        "eps_sim": st.avg_train_power,
        "eps_sim_se": st.train_power_se,
    }


def _point_onoff(config, snr_db):
    params = _params_from_config(config, snr_db)
    grid = _grid_from_config(config)
    lam, bnd = calibrate_lambda(params, family="free", grid=grid)
    rate_wf = achievable_rate(bnd, lam, params)
    res = optimize_onoff(params, grid=grid)
    return {
        "snr_db": snr_db,
        "rate_onoff": res.rate,
        "rate_waterfilling": rate_wf,
        "mu0": res.rule.mu0,
        "p0": res.rule.p0,
    }


def _point_overhead(config, snr_db):
    params = _params_from_config(config, snr_db)
    grid = _grid_from_config(config)
    plain = optimize_onoff(params, grid=grid)
    discounted = optimize_onoff(params, grid=grid, overhead=True)
    return {
        "snr_db": snr_db,
        "rate": plain.rate,
        "rate_overhead": discounted.rate,
        "reduction": 1.0 - discounted.rate / plain.rate,
    }


_POINT_WORKERS = {
    "rate-vs-snr": _point_rate_vs_snr,
    "boundaries": _point_boundaries,
    "eps-vs-M": _point_eps_vs_m,
    "onoff": _point_onoff,
    "overhead": _point_overhead,
}


def _dispatch(args):
    name, config, point = args
    return _POINT_WORKERS[name](config, point)


def _run_points(name, config, points):
    workers = config.get("workers")
    if workers is None:
        workers = min(len(points), os.cpu_count() or 1)
    if workers <= 1 or len(points) <= 1:
        return [_POINT_WORKERS[name](config, pt) for pt in points]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_dispatch, [(name, config, pt) for pt in points]))


# ---------------------------------------------------------------------------
# scenario runners
# ---------------------------------------------------------------------------


def _run_boundaries(config, outdir):
    curves = _run_points("boundaries", config, list(config["snr_db_list"]))
    files = []
    for c in curves:
        rows = [
            {"u": u, "theta_free": tf, "theta_vertical": c["theta_vertical"]}
            for u, tf in zip(c["u"], c["theta_free"])
        ]
        files.append(
            _write_csv(
                os.path.join(outdir, f"boundaries_snr{c['snr_db']:g}dB.csv"),
                config,
                ["u", "theta_free", "theta_vertical"],
                rows,
            )
        )
    files.append(
        _write_json(
            os.path.join(outdir, "boundaries.json"),
            config,
            [{k: c[k] for k in ("snr_db", "theta_vertical", "lam")} for c in curves],
        )
    )
    files.append(plots.plot_boundaries(curves, os.path.join(outdir, "boundaries.png")))
    return files


def _run_rate_vs_snr(config, outdir):
    rows = _run_points("rate-vs-snr", config, list(config["snr_db_list"]))
    cols = list(rows[0].keys())
    files = [_write_csv(os.path.join(outdir, "rate_vs_snr.csv"), config, cols, rows)]
    plot_rows = [
        {k: v for k, v in r.items() if k not in ("lam_free", "theta_v")} for r in rows
    ]
    files.append(plots.plot_rate_vs_snr(plot_rows, os.path.join(outdir, "rate_vs_snr.png")))
    return files


def _run_eps_vs_m(config, outdir):
    rows = _run_points("eps-vs-M", config, [int(m) for m in config["m_list"]])
    cols = ["m_block", "eps_analytic", "eps_sim", "eps_sim_se"]
    files = [_write_csv(os.path.join(outdir, "eps_vs_m.csv"), config, cols, rows)]
    files.append(plots.plot_eps_vs_m(rows, os.path.join(outdir, "eps_vs_m.png")))
    return files


def _run_pdf(config, outdir):
    params = _params_from_config(config, config["snr_db"])
    grid = _grid_from_config(config)
    lam, bnd = calibrate_lambda(params, family="free", grid=grid)
    pdf = steady_pdf(bnd)
    st = evaluate_policy(
        params,
        Policy(boundary=bnd, data_rule=WaterFilling(lam=lam)),
        int(config["n_blocks"]),
        config["seeds"],
    )
    centers = 0.5 * (st.hist_edges[:-1] + st.hist_edges[1:])
    emp = np.interp(bnd.grid, centers, st.hist_density)
    rows = [
        {"u": float(u), "f_analytic": float(f), "f_empirical": float(e)}
        for u, f, e in zip(bnd.grid, pdf.density, emp)
    ]
    files = [
        _write_csv(
            os.path.join(outdir, "pdf.csv"), config, ["u", "f_analytic", "f_empirical"], rows
        )
    ]
    files.append(
        plots.plot_pdf(
            bnd.grid, pdf.density, st.hist_edges, st.hist_density,
            os.path.join(outdir, "pdf.png"),
        )
    )
    files.append(
        _write_json(
            os.path.join(outdir, "pdf.json"),
            config,
            {"lam": lam, "overflow_mass": st.overflow_mass, "tail_mass": pdf.tail_mass},
        )
    )
    return files


def _run_onoff(config, outdir):
    rows = _run_points("onoff", config, list(config["snr_db_list"]))
    cols = ["snr_db", "rate_onoff", "rate_waterfilling", "mu0", "p0"]
    files = [_write_csv(os.path.join(outdir, "onoff.csv"), config, cols, rows)]
    plot_rows = [
        {k: r[k] for k in ("snr_db", "rate_onoff", "rate_waterfilling")} for r in rows
    ]
    files.append(plots.plot_rate_vs_snr(plot_rows, os.path.join(outdir, "onoff.png")))
    return files


def _run_overhead(config, outdir):
    rows = _run_points("overhead", config, list(config["snr_db_list"]))
    cols = ["snr_db", "rate", "rate_overhead", "reduction"]
    files = [_write_csv(os.path.join(outdir, "overhead.csv"), config, cols, rows)]
    plot_rows = [{k: r[k] for k in ("snr_db", "rate", "rate_overhead")} for r in rows]
    files.append(plots.plot_rate_vs_snr(plot_rows, os.path.join(outdir, "overhead.png")))
    return files


def _run_trace(config, outdir):
    params = _params_from_config(config, config["snr_db"])
    grid = _grid_from_config(config)
    lam, bnd = calibrate_lambda(params, family="free", grid=grid)
    policy = Policy(boundary=bnd, data_rule=WaterFilling(lam=lam))
    trace = simulate_trace(params, policy, int(config["n_blocks"]), int(config["seeds"][0]))
    files = []
    trace_path = os.path.join(outdir, "trace.csv")
    write_trace_csv(trace, trace_path)
    files.append(trace_path)
    bpath = os.path.join(outdir, "trace_boundary.csv")
    save_boundary(bnd, bpath)
    files.append(bpath)
    k = trace.burn_in
    files.append(
        plots.plot_trace(
            trace.mu_hat[k:],
            trace.theta[k:],
            bnd.grid,
            bnd.theta_vals,
            theta_star(params),
            os.path.join(outdir, "trace.png"),
        )
    )
    return files


def _run_growth(config, outdir):
    params = _params_from_config(config, config.get("snr_db"))
    grid = _grid_from_config(config)
    rows = growth_diagnostic(params, [int(n) for n in config["n_list"]], grid=grid)
    cols = ["n_scale", "mu0", "p0", "rate", "rate_per_log_n"]
    files = [_write_csv(os.path.join(outdir, "growth.csv"), config, cols, rows)]
    files.append(plots.plot_growth(rows, os.path.join(outdir, "growth.png")))
    return files


_RUNNERS = {
    "boundaries": _run_boundaries,
    "rate-vs-snr": _run_rate_vs_snr,
    "eps-vs-M": _run_eps_vs_m,
    "pdf": _run_pdf,
    "onoff": _run_onoff,
    "overhead": _run_overhead,
    "trace": _run_trace,
    "growth": _run_growth,
}


def run(config, output_root=None) -> list[str]:
    """Execute a validated scenario config; returns the files written."""
    violations = validate(config)
    if violations:
        raise ConfigError("; ".join(violations))
    root = output_root or os.environ.get("PILOTCTL_OUTPUT_ROOT", ".")
    outdir = os.path.join(root, config.get("output_dir", "out"))
    os.makedirs(outdir, exist_ok=True)
    return _RUNNERS[config["scenario"]](config, outdir)
