"""Bayesian discovery of Gaussian-process time series models.

Inference runs sequential Monte Carlo over growing data prefixes, with
involutive-MCMC rejuvenation over a grammar of symbolic covariance
kernels; forecasts come from the weighted particle ensemble.
"""

from .dataio import TimeSeries, load_csv, normalize, split
from .forecast import Forecast, forecast_intervals, mase, msis, posterior_expectation, smape, structure_probability
from .gp import ModelState
from .kernels import KernelExpr, Kind, cov_matrix, eval_kernel, parse, render
from .moves import MoveConfig
from .prior import PcfgConfig
from .smc import ParticleCollection, ScheduleConfig, SmcConfig, run_smc

__all__ = [
    "TimeSeries",
    "load_csv",
    "normalize",
    "split",
    "Forecast",
    "forecast_intervals",
    "posterior_expectation",
    "structure_probability",
    "smape",
    "mase",
    "msis",
    "ModelState",
    "KernelExpr",
    "Kind",
    "eval_kernel",
    "cov_matrix",
    "parse",
    "render",
    "MoveConfig",
    "PcfgConfig",
    "ParticleCollection",
    "ScheduleConfig",
    "SmcConfig",
    "run_smc",
]

__version__ = "0.1.0"
