"""Reference structure searchers: greedy BIC search and MCMC-only sampling.

The greedy searcher mirrors the classic compositional-kernel recipe: start
from each base kernel, repeatedly expand the incumbent by one grammar step
(wrap any leaf in an operator with a fresh base kernel, or swap a leaf for
a different base), optimize parameters by quasi-Newton ascent on the
marginal likelihood with random restarts, and keep the expansion only if
it improves the BIC.  Its edit set can only grow or relabel the tree, so
incumbent size never decreases, in contrast to the reversible MCMC moves.

The MCMC-only searcher is the degenerate single-batch SMC run: M
independent chains on the full posterior, returned as equally weighted
particles.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
import scipy.optimize
from scipy.special import logsumexp

from . import gp, prior
from .dataio import TimeSeries
from .gp import NumericalError
from .kernels import (
    BASE_KINDS,
    KernelExpr,
    Kind,
    all_paths,
    param_count,
    render,
    subtree_extract,
    subtree_replace_at,
)
from .smc import ParticleCollection, ScheduleConfig, SmcConfig, StepDiagnostics, run_smc

logger = logging.getLogger(__name__)

__all__ = [
    "SearchConfig",
    "TraceRecord",
    "GreedyResult",
    "bic_score",
    "optimize_params",
    "greedy_search",
    "mcmc_search",
]


@dataclass(frozen=True)
class SearchConfig:
    max_depth: int = 10
    restarts: int = 3
    opt_iters: int = 200
    threads: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.max_depth < 1 or self.restarts < 1 or self.opt_iters < 1 or self.threads < 1:
            raise ValueError("search budgets must be positive")


@dataclass
class TraceRecord:
    kernel: str
    bic: float
    log_lik: float
    wallclock_ms: float
    depth: int


@dataclass
class GreedyResult:
    expr: KernelExpr
    eta: float
    log_lik: float
    bic: float
    trace: list[TraceRecord]


def bic_score(log_lik: float, n_params: int, n: int) -> float:
    """-2 * max log-likelihood + (d(k) + 1) * ln n; eta counts as a parameter.

    Lower is better.
    """
    return -2.0 * log_lik + (n_params + 1) * math.log(n)


def _neg_log_lik(template: KernelExpr, z: np.ndarray, data: TimeSeries):
    try:
        value, grad = gp.log_density_and_grad(template, z, data, include_prior=False)
    except (NumericalError, OverflowError, ValueError):
        return 1e12, np.zeros(z.size)
    if not math.isfinite(value):
        return 1e12, np.zeros(z.size)
    return -value, -grad


def optimize_params(
    expr: KernelExpr,
    data: TimeSeries,
    rng: np.random.Generator,
    restarts: int = 3,
    opt_iters: int = 200,
) -> tuple[KernelExpr, float, float]:
    """Maximize the marginal likelihood over (theta, eta) for a fixed
    structure; the first start keeps the candidate's parameters, later
    restarts draw fresh initializations from the prior."""
    best = None
    for attempt in range(restarts):
        if attempt == 0:
            z0 = gp.unconstrain(expr, prior.sample_noise(rng))
        else:
            z0 = gp.unconstrain(prior.resample_params(expr, rng), prior.sample_noise(rng))
        result = scipy.optimize.minimize(
            lambda z: _neg_log_lik(expr, z, data),
            z0,
            jac=True,
            method="L-BFGS-B",
            options={"maxiter": opt_iters},
        )
        if not math.isfinite(result.fun) or result.fun >= 1e12:
            continue
        if best is None or result.fun < best.fun:
            best = result
    if best is None:
        raise NumericalError(f"optimization failed for {render(expr)}")
    opt_expr, opt_eta = gp.constrain(expr, best.x)
    return opt_expr, opt_eta, -float(best.fun)


def _expansions(incumbent: KernelExpr, max_depth: int) -> list[KernelExpr]:
    """One-step grammar elaborations of every leaf, height-capped."""
    out = []
    placeholder = {
        Kind.LINEAR: (1.0, 1.0, 1.0),
        Kind.PERIODIC: (1.0, 1.0, 1.0),
        Kind.GAMMA_EXP: (1.0, 1.0, 1.0),
    }
    for path in all_paths(incumbent):
        leaf = subtree_extract(incumbent, path)
        if not leaf.is_base:
            continue
        depth = len(path) + 1
        for kind in BASE_KINDS:
            if kind is not leaf.kind:
                out.append(subtree_replace_at(incumbent, path, KernelExpr(kind, placeholder[kind])))
            if depth + 1 > max_depth:
                continue
            fresh = KernelExpr(kind, placeholder[kind])
            out.append(subtree_replace_at(incumbent, path, KernelExpr(Kind.SUM, (), leaf, fresh)))
            out.append(subtree_replace_at(incumbent, path, KernelExpr(Kind.PRODUCT, (), leaf, fresh)))
            out.append(
                subtree_replace_at(incumbent, path, KernelExpr(Kind.CHANGEPOINT, (0.5, 0.1), leaf, fresh))
            )
            out.append(
                subtree_replace_at(incumbent, path, KernelExpr(Kind.CHANGEPOINT, (0.5, 0.1), fresh, leaf))
            )
    return out


def greedy_search(data: TimeSeries, cfg: SearchConfig) -> GreedyResult:
    """Greedy BIC structure search with a full candidate trace."""
    if data.n == 0:
        raise ValueError("greedy search needs data")
    rng = np.random.default_rng([cfg.seed, 17])
    trace: list[TraceRecord] = []
    started = time.perf_counter()

    def score(candidate: KernelExpr, depth: int):
        child_rng = np.random.default_rng([cfg.seed, 29, len(trace), depth])
        try:
            opt_expr, opt_eta, ll = optimize_params(
                candidate, data, child_rng, cfg.restarts, cfg.opt_iters
            )
        except NumericalError as exc:
            logger.warning("candidate skipped: %s", exc)
            return None
        bic = bic_score(ll, param_count(opt_expr), data.n)
        trace.append(
            TraceRecord(
                render(opt_expr), bic, ll,
                (time.perf_counter() - started) * 1e3, depth,
            )
        )
        return opt_expr, opt_eta, ll, bic

    placeholder = (1.0, 1.0, 1.0)
    scored = [
        s for kind in BASE_KINDS
        if (s := score(KernelExpr(kind, placeholder), 1)) is not None
    ]
    if not scored:
        raise NumericalError("all depth-1 candidates failed")
    incumbent = min(scored, key=lambda s: s[3])

    depth = 1
    while depth < cfg.max_depth:
        depth += 1
        candidates = _expansions(incumbent[0], cfg.max_depth)
        scored = []
        if cfg.threads > 1:
            with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
                scored = [s for s in pool.map(lambda c: score(c, depth), candidates) if s]
        else:
            scored = [s for c in candidates if (s := score(c, depth)) is not None]
        if not scored:
            break
        best = min(scored, key=lambda s: s[3])
        if best[3] >= incumbent[3]:
            break
        incumbent = best
    expr, eta, ll, bic = incumbent
    return GreedyResult(expr, eta, ll, bic, trace)


def mcmc_search(
    data: TimeSeries, cfg: SmcConfig
) -> tuple[ParticleCollection, list[StepDiagnostics]]:
    """M independent MCMC chains on the full posterior.

    Delegates to the SMC driver with a single-batch schedule (so no
    resampling ever fires and chains never interact), then equalizes the
    weights: the chains are returned as equally weighted posterior
    samples, with the marginal-likelihood estimate preserved exactly.
    """
    single = replace(cfg, schedule=ScheduleConfig(kind="linear", fraction=1.0))
    collection, diags = run_smc(data, single)
    mean_log_weight = logsumexp(collection.log_weights) - math.log(collection.n_particles)
    collection.log_weights = np.full(collection.n_particles, mean_log_weight)
    return collection, diags
