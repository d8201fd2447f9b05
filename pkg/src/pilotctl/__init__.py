"""Adaptive pilot/data power control for correlated Rayleigh fading channels."""

from .boundary import (
    Boundary,
    GridSpec,
    SteadyPdf,
    achievable_rate,
    avg_data_power,
    avg_training_power,
    calibrate_lambda,
    check_theta0_identity,
    load_boundary,
    optimize_vertical,
    prob_train,
    save_boundary,
    solve_free_boundary,
    steady_pdf,
    theta_inf,
    theta_star,
    vertical_boundary,
)
from .errors import ConfigError, InfeasibleError, SolverError
from .model import (
    ModelParams,
    SystemState,
    lagrangian,
    lagrangian_dtheta,
    rate,
    scaled_rate,
    training_power,
    waterfill_power,
)

__version__ = "0.1.0"
