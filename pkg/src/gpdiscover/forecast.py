"""Posterior queries over a particle ensemble and forecast-accuracy metrics.

Forecasts are weighted Gaussian mixtures: each particle contributes its
predictive marginal (mean, standard deviation) at every query time, and
interval bounds are equal-tailed quantiles of that mixture found by
bisection on the mixture CDF.  Mixture quantiles preserve genuine
multimodality of the posterior, which a moment-matched Gaussian would
wash out.

Metrics follow the standard econometric-forecasting definitions of
symmetric mean absolute percentage error, mean absolute scaled error,
and mean scaled interval score, with the seasonal period defaulting to
12 (monthly data).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from . import gp
from .dataio import TimeSeries, denormalize_scale, denormalize_values
from .kernels import Kind, contains_kind
from .smc import DegenerateParticlesError, ParticleCollection

logger = logging.getLogger(__name__)

__all__ = [
    "UndefinedMetricError",
    "Forecast",
    "posterior_expectation",
    "structure_probability",
    "mixture_components",
    "mixture_cdf",
    "mixture_quantile",
    "forecast_intervals",
    "exceedance_probability",
    "smape",
    "mase",
    "msis",
]


class UndefinedMetricError(ValueError):
    """A metric denominator (seasonal-naive scale) is zero."""


@dataclass(frozen=True)
class Forecast:
    """Ensemble forecast at query times, in the data's original units.

    ``weights``, ``means`` and ``stds`` are the per-particle mixture
    components (weights normalized; means/stds have shape (M, horizon)).
    """

    times: np.ndarray
    mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    level: float
    weights: np.ndarray
    means: np.ndarray
    stds: np.ndarray


def posterior_expectation(collection: ParticleCollection, test_fn) -> float:
    """Self-normalized weighted average of test_fn over the particles."""
    weights = collection.normalized_weights()
    values = np.array([test_fn(state) for state in collection.states], dtype=np.float64)
    return float(weights @ values)


def structure_probability(collection: ParticleCollection, kind: Kind) -> float:
    """Posterior probability that the kernel contains a base-kernel kind."""
    return posterior_expectation(
        collection, lambda state: 1.0 if contains_kind(state.expr, kind) else 0.0
    )


def mixture_components(
    collection: ParticleCollection,
    data: TimeSeries,
    query_times: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-particle observation-space predictive marginals.

    ``query_times`` are in the data's original encoding when the series
    carries a normalization record (which is applied and then inverted
    here); otherwise they are used as given.  Returns (weights, means,
    stds) with means/stds in original units.
    """
    q = np.asarray(query_times, dtype=np.float64)
    tr = data.transform
    qn = (q - tr.t_offset) / tr.t_scale if tr is not None else q
    weights = collection.normalized_weights()
    means = np.empty((collection.n_particles, q.size))
    stds = np.empty((collection.n_particles, q.size))
    for i, state in enumerate(collection.states):
        summary = gp.predictive(state, data, qn, include_noise=True)
        means[i] = summary.mean
        stds[i] = np.sqrt(summary.var)
    if tr is not None:
        means = denormalize_values(means, tr)
        stds = denormalize_scale(stds, tr)
    return weights, means, stds


def mixture_cdf(x, weights: np.ndarray, means: np.ndarray, stds: np.ndarray):
    """CDF of the weighted Gaussian mixture at x (broadcast over components)."""
    z = (np.asarray(x, dtype=np.float64) - means) / stds
    return weights @ ndtr(z)


def mixture_quantile(
    p: float,
    weights: np.ndarray,
    means: np.ndarray,
    stds: np.ndarray,
    tol: float = 1e-10,
    max_iter: int = 400,
) -> float:
    """p-quantile of a Gaussian mixture by bisection on its CDF.

    Terminates when |CDF(x) - p| < tol; the mixture CDF is continuous and
    strictly increasing, so bisection always converges.
    """
    if not 0.0 < p < 1.0:
        raise ValueError("quantile level must lie strictly inside (0, 1)")
    lo = float(np.min(means - 10.0 * stds))
    hi = float(np.max(means + 10.0 * stds))
    while mixture_cdf(lo, weights, means, stds) > p:
        lo -= 2.0 * (hi - lo)
    while mixture_cdf(hi, weights, means, stds) < p:
        hi += 2.0 * (hi - lo)
    mid = 0.5 * (lo + hi)
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        value = mixture_cdf(mid, weights, means, stds)
        if abs(value - p) < tol:
            return mid
        if value < p:
            lo = mid
        else:
            hi = mid
        if lo == mid or hi == mid:
            break
    return mid


def forecast_intervals(
    collection: ParticleCollection,
    data: TimeSeries,
    query_times: np.ndarray,
    level: float = 0.05,
) -> Forecast:
    """Ensemble mean and equal-tailed (1 - level) mixture intervals.

    ``level`` is the total tail mass a (0.05 gives 95% intervals, a/2 in
    each tail).  Outputs are inverse-transformed to original data units.
    """
    if not 0.0 < level < 1.0:
        raise ValueError("interval level must lie in (0, 1)")
    q = np.asarray(query_times, dtype=np.float64)
    if q.size == 0:
        empty = np.empty(0)
        return Forecast(q, empty, empty.copy(), empty.copy(), level,
                        collection.normalized_weights(),
                        np.empty((collection.n_particles, 0)),
                        np.empty((collection.n_particles, 0)))
    weights, means, stds = mixture_components(collection, data, q)
    mean = weights @ means
    lower = np.array([
        mixture_quantile(level / 2.0, weights, means[:, j], stds[:, j]) for j in range(q.size)
    ])
    upper = np.array([
        mixture_quantile(1.0 - level / 2.0, weights, means[:, j], stds[:, j])
        for j in range(q.size)
    ])
    return Forecast(q, mean, lower, upper, level, weights, means, stds)


def exceedance_probability(
    collection: ParticleCollection,
    data: TimeSeries,
    query_times: np.ndarray,
    thresholds: np.ndarray,
) -> np.ndarray:
    """P(y_* <= threshold) per query time under the mixture predictive.

    Per-time-point marginals are exact Gaussian-mixture CDFs; joint events
    over several time points are out of scope here and handled by Monte
    Carlo over the predictive in user code.
    """
    q = np.asarray(query_times, dtype=np.float64)
    thr = np.broadcast_to(np.asarray(thresholds, dtype=np.float64), q.shape)
    weights, means, stds = mixture_components(collection, data, q)
    return np.array([
        float(mixture_cdf(thr[j], weights, means[:, j], stds[:, j])) for j in range(q.size)
    ])


# ---------------------------------------------------------------------------
# Point and interval forecast metrics
# ---------------------------------------------------------------------------


def smape(actual: np.ndarray, predicted: np.ndarray) -> float:
    """Symmetric mean absolute percentage error, in percent.

    Terms with |x| + |x_hat| = 0 contribute zero (and are logged); they
    still count toward the horizon length.
    """
    x = np.asarray(actual, dtype=np.float64)
    xh = np.asarray(predicted, dtype=np.float64)
    if x.shape != xh.shape or x.ndim != 1 or x.size == 0:
        raise ValueError("actual and predicted must be equal-length nonempty vectors")
    denom = np.abs(x) + np.abs(xh)
    zero = denom == 0
    if np.any(zero):
        logger.warning("smape: %d zero/zero terms counted as 0", int(np.sum(zero)))
    terms = np.zeros_like(denom)
    np.divide(2.0 * np.abs(x - xh), denom, out=terms, where=~zero)
    return float(100.0 * np.mean(terms))


def _seasonal_naive_scale(insample: np.ndarray, m: int) -> float:
    x = np.asarray(insample, dtype=np.float64)
    if m < 1 or x.size <= m:
        raise ValueError(f"insample length {x.size} must exceed the seasonal period {m}")
    scale = float(np.mean(np.abs(x[m:] - x[:-m])))
    if scale == 0.0:
        raise UndefinedMetricError("seasonal-naive scale is zero")
    return scale


def mase(actual, predicted, insample, m: int = 12) -> float:
    """Mean absolute scaled error against the seasonal-naive in-sample scale."""
    x = np.asarray(actual, dtype=np.float64)
    xh = np.asarray(predicted, dtype=np.float64)
    if x.shape != xh.shape or x.ndim != 1 or x.size == 0:
        raise ValueError("actual and predicted must be equal-length nonempty vectors")
    return float(np.mean(np.abs(x - xh)) / _seasonal_naive_scale(insample, m))


def msis(actual, upper, lower, insample, m: int = 12, a: float = 0.05) -> float:
    """Mean scaled interval score of a (1 - a) prediction interval."""
    x = np.asarray(actual, dtype=np.float64)
    u = np.asarray(upper, dtype=np.float64)
    low = np.asarray(lower, dtype=np.float64)
    if not (x.shape == u.shape == low.shape) or x.ndim != 1 or x.size == 0:
        raise ValueError("actual, upper and lower must be equal-length nonempty vectors")
    penalty_low = (2.0 / a) * (low - x) * (x < low)
    penalty_high = (2.0 / a) * (x - u) * (x > u)
    score = np.mean((u - low) + penalty_low + penalty_high)
    return float(score / _seasonal_naive_scale(insample, m))
