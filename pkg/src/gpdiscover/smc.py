"""Sequential Monte Carlo over growing data prefixes.

The sampler targets the sequence of posteriors conditioned on time-ordered
prefixes of the training set.  Each step reweights particles by the
marginal-likelihood increment of the new batch, resamples systematically
when the normalized effective sample size drops below threshold (never on
the final step), and rejuvenates each particle with involutive-MCMC
structure moves plus HMC.

Weights are held in log space throughout.  Resampling resets every weight
to the mean weight, which preserves the running marginal-likelihood
estimate: log Z is always logsumexp(log_weights) - log M.

Per-particle RNG streams derive deterministically from (master seed,
particle seed, stage tag, step), so results are bitwise independent of
the worker-thread count.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import gp, linalg, moves, prior
from .dataio import TimeSeries
from .gp import ModelState, NumericalError
from .moves import MoveConfig
from .prior import PcfgConfig

logger = logging.getLogger(__name__)

__all__ = [
    "DegenerateParticlesError",
    "ScheduleConfig",
    "SmcConfig",
    "ParticleCollection",
    "StepDiagnostics",
    "make_schedule",
    "ess",
    "systematic_resample_indices",
    "maybe_resample",
    "reweight",
    "run_smc",
    "log_marginal",
]

_TAG_INIT = 1
_TAG_REJUV = 2
_TAG_RESAMPLE = 3


class DegenerateParticlesError(RuntimeError):
    """Every particle weight collapsed to zero."""


@dataclass(frozen=True)
class ScheduleConfig:
    """Data-annealing schedule: 'linear' introduces ceil(fraction * n) new
    points per step; 'logarithmic' doubles the prefix (2, 4, 8, ..., n)."""

    kind: str = "linear"
    fraction: float = 0.05

    def __post_init__(self):
        if self.kind not in ("linear", "logarithmic"):
            raise ValueError("schedule kind must be 'linear' or 'logarithmic'")
        if not 0.0 < self.fraction <= 1.0:
            raise ValueError("fraction must lie in (0, 1]")


@dataclass(frozen=True)
class SmcConfig:
    n_particles: int = 48
    n_rejuv: int = 100
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    ess_threshold: float = 0.5
    seed: int = 0
    threads: int = 1
    pcfg: PcfgConfig = field(default_factory=PcfgConfig)
    moves: MoveConfig = field(default_factory=MoveConfig)
    particle_seeds: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.n_particles < 1:
            raise ValueError("need at least one particle")
        if self.n_rejuv < 0:
            raise ValueError("n_rejuv must be >= 0")
        if not 0.0 < self.ess_threshold <= 1.0:
            raise ValueError("ess_threshold must lie in (0, 1]")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        if self.particle_seeds is not None and len(self.particle_seeds) != self.n_particles:
            raise ValueError("particle_seeds must have one entry per particle")

    def seeds(self) -> tuple[int, ...]:
        return self.particle_seeds or tuple(range(self.n_particles))


@dataclass
class ParticleCollection:
    """M weighted hypotheses approximating the current posterior."""

    states: list[ModelState]
    log_weights: np.ndarray
    step: int
    particle_seeds: tuple[int, ...]

    @property
    def n_particles(self) -> int:
        return len(self.states)

    def normalized_weights(self) -> np.ndarray:
        lw = np.asarray(self.log_weights, dtype=np.float64)
        if not np.any(np.isfinite(lw)):
            raise DegenerateParticlesError("all particle weights are zero")
        return np.exp(lw - logsumexp(lw))


@dataclass
class StepDiagnostics:
    step: int
    n_cum: int
    ess: float
    resampled: bool
    log_marginal: float
    acceptance: dict
    rejuv_flops: int


def make_schedule(n: int, cfg: ScheduleConfig) -> tuple[int, ...]:
    """Cumulative prefix sizes for the annealing steps (empty for n = 0)."""
    if n < 0:
        raise ValueError("n must be >= 0")
    if n == 0:
        return ()
    if cfg.kind == "linear":
        step = max(1, math.ceil(cfg.fraction * n))
        sizes = list(range(step, n + 1, step))
        if sizes[-1] != n:
            sizes.append(n)
        return tuple(sizes)
    sizes = []
    size = 2
    while size < n:
        sizes.append(size)
        size *= 2
    sizes.append(n)
    if n == 1:
        sizes = [1]
    return tuple(sizes)


def ess(log_weights: np.ndarray) -> float:
    """Normalized effective sample size (sum w)^2 / (M sum w^2) in (0, 1]."""
    lw = np.asarray(log_weights, dtype=np.float64)
    if not np.any(np.isfinite(lw)):
        raise DegenerateParticlesError("all particle weights are zero")
    m = lw.size
    return float(np.exp(2.0 * logsumexp(lw) - math.log(m) - logsumexp(2.0 * lw)))


def systematic_resample_indices(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Systematic resampling: offspring counts are within 1 of M * prob."""
    m = probs.size
    positions = (rng.uniform() + np.arange(m)) / m
    return np.clip(np.searchsorted(np.cumsum(probs), positions), 0, m - 1)


def maybe_resample(
    collection: ParticleCollection,
    rng: np.random.Generator,
    threshold: float = 0.5,
    final_step: bool = False,
) -> bool:
    """Resample in place when ESS drops below threshold (skipped on the
    final step); every weight becomes the pre-resample mean weight."""
    if final_step:
        return False
    if ess(collection.log_weights) >= threshold:
        return False
    probs = collection.normalized_weights()
    idx = systematic_resample_indices(probs, rng)
    collection.states = [collection.states[i].clone() for i in idx]
    mean_log_weight = logsumexp(collection.log_weights) - math.log(collection.n_particles)
    collection.log_weights = np.full(collection.n_particles, mean_log_weight)
    return True


def reweight(collection: ParticleCollection, prefix: TimeSeries) -> None:
    """Multiply each weight by the marginal likelihood of the new batch.

    Particle caches advance to the given prefix; a factorization failure
    kills the particle (weight zero) with a logged warning.
    """
    for i, state in enumerate(collection.states):
        old_ll = state.cache.log_lik if state.cache is not None else 0.0
        try:
            cache = gp.marginal_cache(state.expr, state.eta, prefix)
        except NumericalError as exc:
            logger.warning("particle %d killed during reweight: %s", i, exc)
            collection.log_weights[i] = -math.inf
            state.cache = None
            continue
        state.cache = cache
        collection.log_weights[i] += cache.log_lik - old_ll


def log_marginal(collection: ParticleCollection) -> float:
    """Log of the mean unnormalized weight: the marginal-likelihood estimate."""
    return float(logsumexp(collection.log_weights) - math.log(collection.n_particles))


def _default_init(pcfg: PcfgConfig):
    def init(rng: np.random.Generator) -> ModelState:
        expr = prior.sample_structure(pcfg, rng)
        eta = prior.sample_noise(rng)
        return ModelState(expr, eta)

    return init


def _default_rejuvenator(pcfg: PcfgConfig, mcfg: MoveConfig):
    def rejuv(state: ModelState, data: TimeSeries, rng: np.random.Generator, steps: int):
        return moves.rejuvenate(state, data, pcfg, mcfg, rng, steps)

    return rejuv


def _merge_counters(total: dict, part: dict) -> None:
    for key, (att, acc) in part.items():
        slot = total.setdefault(key, [0, 0])
        slot[0] += att
        slot[1] += acc


def run_smc(
    data: TimeSeries,
    cfg: SmcConfig,
    rejuvenate_fn=None,
    init_fn=None,
) -> tuple[ParticleCollection, list[StepDiagnostics]]:
    """Run the full reweight-resample-rejuvenate sampler.

    ``rejuvenate_fn(state, prefix, rng, steps) -> (state, counters)`` and
    ``init_fn(rng) -> ModelState`` default to the grammar prior and the
    standard move mixture; tests substitute restricted kernels here.
    Fully reproducible given the seed; thread count never changes results.
    """
    init_fn = init_fn or _default_init(cfg.pcfg)
    rejuvenate_fn = rejuvenate_fn or _default_rejuvenator(cfg.pcfg, cfg.moves)
    seeds = cfg.seeds()
    states = [
        init_fn(np.random.default_rng([cfg.seed, seeds[i], _TAG_INIT]))
        for i in range(cfg.n_particles)
    ]
    collection = ParticleCollection(
        states, np.zeros(cfg.n_particles), 0, tuple(seeds)
    )
    schedule = make_schedule(data.n, cfg.schedule)
    diagnostics: list[StepDiagnostics] = []
    total_steps = len(schedule)

    for j, size in enumerate(schedule, start=1):
        prefix = data.prefix(size)
        reweight(collection, prefix)
        step_ess = ess(collection.log_weights)
        resampled = maybe_resample(
            collection,
            np.random.default_rng([cfg.seed, _TAG_RESAMPLE, j]),
            cfg.ess_threshold,
            final_step=(j == total_steps),
        )

        counters: dict = {}
        flops_before = linalg.flop_total()

        def rejuvenate_one(i: int):
            state = collection.states[i]
            if not math.isfinite(collection.log_weights[i]):
                return state, {}
            rng = np.random.default_rng([cfg.seed, seeds[i], _TAG_REJUV, j])
            return rejuvenate_fn(state, prefix, rng, cfg.n_rejuv)

        if cfg.threads > 1:
            with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
                results = list(pool.map(rejuvenate_one, range(cfg.n_particles)))
        else:
            results = [rejuvenate_one(i) for i in range(cfg.n_particles)]
        for i, (state, part) in enumerate(results):
            collection.states[i] = state
            _merge_counters(counters, part)

        collection.step = j
        diagnostics.append(
            StepDiagnostics(
                step=j,
                n_cum=size,
                ess=step_ess,
                resampled=resampled,
                log_marginal=log_marginal(collection),
                acceptance=counters,
                rejuv_flops=linalg.flop_total() - flops_before,
            )
        )
    return collection, diagnostics
