"""Dense Gaussian-process numerics for one model hypothesis.

A hypothesis is a kernel expression plus an observation-noise variance.
The latent function is marginalized analytically everywhere, so the
likelihood of values y at times t is N(y; 0, K + eta*I).  This module
provides that likelihood (with cached Cholesky factors), the full log
joint including the priors, predictive posteriors at query times, the
conjugate inverse-gamma noise update, and analytic likelihood gradients
in unconstrained coordinates for HMC and for the greedy baseline's
parameter optimization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from . import linalg, prior
from .dataio import TimeSeries
from .kernels import (
    KernelExpr,
    cov_matrix,
    cov_matrix_with_grads,
    flatten_params,
    param_transforms,
    render,
    with_params,
    _eval_grid,
)

__all__ = [
    "NumericalError",
    "GpCache",
    "ModelState",
    "PredictiveSummary",
    "mvn_logpdf",
    "marginal_cache",
    "ensure_cache",
    "log_lik",
    "log_joint",
    "predictive",
    "conditional_mean",
    "gibbs_params",
    "gibbs_noise",
    "unconstrain",
    "constrain",
    "log_density_and_grad",
    "grad_log_joint_params",
]

_LOG_2PI = math.log(2.0 * math.pi)


class NumericalError(RuntimeError):
    """Factorization failure that survived jitter escalation."""


@dataclass(frozen=True)
class GpCache:
    """Factorization of K + eta*I for a specific training prefix.

    Consistency with (expr, eta, data) is checkable by recomputation; the
    cache is replaced wholesale, never mutated, so sharing after particle
    duplication is safe.
    """

    n: int
    chol: np.ndarray
    alpha: np.ndarray
    log_lik: float


@dataclass
class ModelState:
    """One hypothesis (kernel expression, noise variance) plus its cache."""

    expr: KernelExpr
    eta: float
    cache: GpCache | None = None

    def clone(self) -> "ModelState":
        return ModelState(self.expr, self.eta, self.cache)


@dataclass(frozen=True)
class PredictiveSummary:
    """Gaussian predictive posterior at query times (marginals, optional
    full covariance)."""

    mean: np.ndarray
    var: np.ndarray
    cov: np.ndarray | None = None


def mvn_logpdf(y, mean, cov) -> float:
    """Multivariate-normal log-density (see linalg.mvn_logpdf)."""
    try:
        return linalg.mvn_logpdf(y, mean, cov)
    except linalg.FactorizationError as exc:
        raise NumericalError(str(exc)) from exc


def _factorize(expr: KernelExpr, eta: float, times: np.ndarray) -> np.ndarray:
    cov = cov_matrix(expr, times) + eta * np.eye(times.size)
    try:
        return linalg.chol_with_jitter(cov)
    except linalg.FactorizationError as exc:
        raise NumericalError(f"factorization failed for {render(expr)} (eta={eta})") from exc


def marginal_cache(expr: KernelExpr, eta: float, data: TimeSeries) -> GpCache:
    """Factorize K + eta*I for the data and record the marginal likelihood."""
    n = data.n
    if n == 0:
        return GpCache(0, np.empty((0, 0)), np.empty(0), 0.0)
    lower = _factorize(expr, eta, data.times)
    alpha = linalg.chol_solve(lower, data.values)
    ll = linalg.mvn_logpdf_chol(data.values, lower)
    return GpCache(n, lower, alpha, ll)


def ensure_cache(state: ModelState, data: TimeSeries) -> GpCache:
    if state.cache is None or state.cache.n != data.n:
        state.cache = marginal_cache(state.expr, state.eta, data)
    return state.cache


def log_lik(state: ModelState, data: TimeSeries) -> float:
    """log N(y; 0, K + eta*I); zero for an empty dataset."""
    return ensure_cache(state, data).log_lik


def log_joint(state: ModelState, data: TimeSeries, cfg: prior.PcfgConfig) -> float:
    """log P(k, theta, eta, y) with the latent function marginalized."""
    return (
        prior.log_prior(state.expr, cfg)
        + prior.log_noise_prior(state.eta)
        + log_lik(state, data)
    )


def predictive(
    state: ModelState,
    data: TimeSeries,
    query_times: np.ndarray,
    include_noise: bool = True,
    full_cov: bool = False,
) -> PredictiveSummary:
    """Posterior of the function (or observations) at query times.

    mean = K_*^T (K + eta I)^{-1} y and cov = K_** - K_*^T (K + eta I)^{-1} K_*;
    ``include_noise`` adds eta to the marginal variances for
    observation-space forecasts.
    """
    q = np.asarray(query_times, dtype=np.float64)
    if q.size == 0:
        return PredictiveSummary(np.empty(0), np.empty(0), np.empty((0, 0)) if full_cov else None)
    prior_var, _ = _eval_grid(state.expr, q, q, False)
    prior_var = np.asarray(prior_var, dtype=np.float64)
    if data.n == 0:
        mean = np.zeros(q.size)
        var = prior_var.copy()
        cov = None
        if full_cov:
            cov, _ = _eval_grid(state.expr, q[:, None], q[None, :], False)
    else:
        cache = ensure_cache(state, data)
        cross, _ = _eval_grid(state.expr, data.times[:, None], q[None, :], False)
        v = scipy.linalg.solve_triangular(cache.chol, cross, lower=True, check_finite=False)
        mean = cross.T @ cache.alpha
        var = np.maximum(prior_var - np.sum(v * v, axis=0), 0.0)
        cov = None
        if full_cov:
            kqq, _ = _eval_grid(state.expr, q[:, None], q[None, :], False)
            cov = kqq - v.T @ v
    if include_noise:
        var = var + state.eta
        if cov is not None:
            cov = cov + state.eta * np.eye(q.size)
    return PredictiveSummary(mean, var, cov)


def conditional_mean(state: ModelState, data: TimeSeries) -> np.ndarray:
    """Posterior mean of the latent function at the training points:
    mu = K (K + eta I)^{-1} y."""
    if data.n == 0:
        return np.empty(0)
    cache = ensure_cache(state, data)
    return cov_matrix(state.expr, data.times) @ cache.alpha


def gibbs_params(state: ModelState, data: TimeSeries) -> tuple[float, float]:
    """Shape and scale of the conjugate noise conditional
    InverseGamma(1 + n/2, 1 + sum((y - mu)^2) / 2)."""
    mu = conditional_mean(state, data)
    resid = data.values - mu
    return 1.0 + data.n / 2.0, 1.0 + 0.5 * float(resid @ resid)


def gibbs_noise(state: ModelState, data: TimeSeries, rng: np.random.Generator) -> tuple[float, float]:
    """Draw a fresh noise variance and return (draw, its log-density).

    The density is needed in acceptance ratios because the draw happens
    before the accept/reject decision.
    """
    shape, scale = gibbs_params(state, data)
    draw = prior.sample_inverse_gamma(shape, scale, rng)
    return draw, prior.inverse_gamma_logpdf(draw, shape, scale)


# ---------------------------------------------------------------------------
# Unconstrained coordinates and analytic gradients
# ---------------------------------------------------------------------------


def _to_unconstrained(value: float, transform: str) -> float:
    if transform == "log":
        return math.log(value)
    half = value / 2.0
    return math.log(half / (1.0 - half))


def _from_unconstrained(z: float, transform: str) -> float:
    if transform == "log":
        return math.exp(z)
    return 2.0 / (1.0 + math.exp(-z))


def _jacobian(value: float, transform: str) -> float:
    """d(value)/dz at the constrained value."""
    if transform == "log":
        return value
    return value * (2.0 - value) / 2.0


def unconstrain(expr: KernelExpr, eta: float) -> np.ndarray:
    """Flatten (theta, eta) into unconstrained coordinates; eta is last."""
    values = flatten_params(expr)
    transforms = param_transforms(expr)
    z = [_to_unconstrained(v, t) for v, t in zip(values, transforms)]
    z.append(math.log(eta))
    return np.array(z)


def constrain(template: KernelExpr, z: np.ndarray) -> tuple[KernelExpr, float]:
    """Rebuild (expr, eta) from unconstrained coordinates on a fixed skeleton."""
    transforms = param_transforms(template)
    values = [_from_unconstrained(float(v), t) for v, t in zip(z[:-1], transforms)]
    return with_params(template, values), math.exp(float(z[-1]))


def log_density_and_grad(
    template: KernelExpr,
    z: np.ndarray,
    data: TimeSeries,
    include_prior: bool = True,
) -> tuple[float, np.ndarray]:
    """Log target and gradient in unconstrained (theta, eta) coordinates.

    With ``include_prior`` the target is the joint over parameters and
    noise at fixed structure, expressed in z-space (the LogNormal and
    mapped-logistic priors both become standard normals there, and the
    inverse-gamma prior picks up its log Jacobian).  Without it, the
    target is the marginal likelihood alone, which is what BIC-based
    search optimizes.

    Gradients are analytic: d logN/d theta_i = alpha^T (dK/dtheta_i) alpha / 2
    - tr(Sigma^{-1} dK/dtheta_i) / 2 with alpha = Sigma^{-1} y, chained
    through the transforms.
    """
    transforms = param_transforms(template)
    expr, eta = constrain(template, z)
    d = len(transforms)
    grad = np.zeros(d + 1)

    if data.n == 0:
        value = 0.0
    else:
        kmat, kgrads = cov_matrix_with_grads(expr, data.times)
        sigma = kmat + eta * np.eye(data.n)
        try:
            lower = linalg.chol_with_jitter(sigma)
        except linalg.FactorizationError as exc:
            raise NumericalError(f"factorization failed for {render(expr)} (eta={eta})") from exc
        alpha = linalg.chol_solve(lower, data.values)
        value = linalg.mvn_logpdf_chol(data.values, lower)
        w = linalg.chol_solve(lower, np.eye(data.n))
        theta = flatten_params(expr)
        for i, (dk, tr) in enumerate(zip(kgrads, transforms)):
            g_theta = 0.5 * float(alpha @ dk @ alpha) - 0.5 * float(np.sum(w * dk))
            grad[i] = g_theta * _jacobian(theta[i], tr)
        grad[d] = (0.5 * float(alpha @ alpha) - 0.5 * float(np.trace(w))) * eta

    if include_prior:
        zp = np.asarray(z[:-1], dtype=np.float64)
        value += float(np.sum(-0.5 * zp * zp - 0.5 * _LOG_2PI))
        grad[:-1] += -zp
        z_eta = float(z[-1])
        value += -z_eta - math.exp(-z_eta)
        grad[d] += -1.0 + math.exp(-z_eta)
    return value, grad


def grad_log_joint_params(state: ModelState, data: TimeSeries) -> np.ndarray:
    """Gradient of the log joint w.r.t. unconstrained (theta, eta)."""
    z = unconstrain(state.expr, state.eta)
    _, grad = log_density_and_grad(state.expr, z, data, include_prior=True)
    return grad
