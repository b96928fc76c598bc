"""Generative prior over kernel expressions, parameters, and noise.

Structures come from a probabilistic context-free grammar: at each node the
leaf rule fires with probability ``p_leaf`` (choosing one of the three base
kernels), otherwise one of the operators fires and recursion continues on
two children.  A depth cap forces the leaf rule at the deepest level, and
the log-density accounts for that renormalization exactly.

Continuous parameters are LogNormal(0, 1) i.i.d., except the GE exponent,
which must lie in (0, 2]: it is generated as 2*sigmoid(z) with z standard
normal, and its density carries the change-of-variables term.  Observation
noise (a variance) has an InverseGamma(1, 1) prior.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .kernels import (
    BASE_KINDS,
    KernelExpr,
    Kind,
    PARAM_COUNTS,
)

__all__ = [
    "PcfgConfig",
    "sample_structure",
    "sample_param",
    "param_log_pdf",
    "log_prior",
    "structure_log_prior",
    "params_log_prior",
    "sample_noise",
    "log_noise_prior",
    "inverse_gamma_logpdf",
    "sample_inverse_gamma",
]

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class PcfgConfig:
    """Production probabilities and depth cap for the structure grammar.

    ``p_leaf + p_sum + p_prod + p_cp`` must equal 1.  With ``max_depth``
    disabled (None) the branching process must be subcritical, which
    requires ``p_leaf > 0.5``; the defaults give an expected size of
    1 / (2 * 0.7 - 1) = 2.5 nodes.
    """

    p_leaf: float = 0.7
    p_sum: float = 0.1
    p_prod: float = 0.1
    p_cp: float = 0.1
    base_probs: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    max_depth: int | None = 10

    def __post_init__(self):
        probs = (self.p_leaf, self.p_sum, self.p_prod, self.p_cp)
        if any(p <= 0 for p in probs):
            raise ValueError("all production probabilities must be positive")
        if abs(sum(probs) - 1.0) > 1e-12:
            raise ValueError("production probabilities must sum to 1")
        if any(p <= 0 for p in self.base_probs) or abs(sum(self.base_probs) - 1.0) > 1e-12:
            raise ValueError("base-kernel probabilities must be positive and sum to 1")
        if self.max_depth is None and self.p_leaf <= 0.5:
            raise ValueError("uncapped grammar needs p_leaf > 0.5 for finite trees")
        if self.max_depth is not None and self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")

    @property
    def operator_probs(self) -> tuple[float, float, float]:
        """Probabilities of (SUM, PRODUCT, CHANGEPOINT), summing to 1 - p_leaf."""
        return (self.p_sum, self.p_prod, self.p_cp)


_OPERATOR_ORDER = (Kind.SUM, Kind.PRODUCT, Kind.CHANGEPOINT)


def _op_prob(cfg: PcfgConfig, kind: Kind) -> float:
    return cfg.operator_probs[_OPERATOR_ORDER.index(kind)]


def _base_prob(cfg: PcfgConfig, kind: Kind) -> float:
    return cfg.base_probs[BASE_KINDS.index(kind)]


# ---------------------------------------------------------------------------
# Parameter priors (per transform kind, see kernels.param_transforms)
# ---------------------------------------------------------------------------


def sample_param(transform: str, rng: np.random.Generator) -> float:
    z = rng.standard_normal()
    if transform == "log":
        return math.exp(z)
    if transform == "logit2":
        return 2.0 / (1.0 + math.exp(-z))
    raise ValueError(f"unknown transform {transform!r}")


def param_log_pdf(value: float, transform: str) -> float:
    """Log prior density of one parameter in its constrained coordinates."""
    if transform == "log":
        if value <= 0:
            return -math.inf
        z = math.log(value)
        return -0.5 * z * z - 0.5 * _LOG_2PI - z
    if transform == "logit2":
        if not 0.0 < value < 2.0:
            return -math.inf
        half = value / 2.0
        z = math.log(half / (1.0 - half))
        # |dz/dvalue| = 2 / (value * (2 - value))
        return -0.5 * z * z - 0.5 * _LOG_2PI + math.log(2.0) - math.log(value * (2.0 - value))
    raise ValueError(f"unknown transform {transform!r}")


def _node_param_transforms(kind: Kind) -> tuple[str, ...]:
    if kind is Kind.GAMMA_EXP:
        return ("log", "log", "logit2")
    return ("log",) * PARAM_COUNTS[kind]


def _sample_node_params(kind: Kind, rng: np.random.Generator) -> tuple[float, ...]:
    return tuple(sample_param(t, rng) for t in _node_param_transforms(kind))


# ---------------------------------------------------------------------------
# Structure sampling and density
# ---------------------------------------------------------------------------


def sample_structure(cfg: PcfgConfig, rng: np.random.Generator, depth: int = 1) -> KernelExpr:
    """Draw a kernel expression (with parameters) from the grammar.

    ``depth`` is the level of the generated root: pass the depth of the
    node being replaced to draw from the conditional prior at that
    position.  At ``max_depth`` the leaf rule is forced.
    """
    if cfg.max_depth is not None and depth > cfg.max_depth:
        raise ValueError(f"depth {depth} exceeds the grammar cap {cfg.max_depth}")
    forced_leaf = cfg.max_depth is not None and depth == cfg.max_depth
    if forced_leaf or rng.uniform() < cfg.p_leaf:
        kind = BASE_KINDS[rng.choice(3, p=np.asarray(cfg.base_probs))]
        return KernelExpr(kind, _sample_node_params(kind, rng))
    ops = np.asarray(cfg.operator_probs)
    kind = _OPERATOR_ORDER[rng.choice(3, p=ops / ops.sum())]
    params = _sample_node_params(kind, rng)
    left = sample_structure(cfg, rng, depth + 1)
    right = sample_structure(cfg, rng, depth + 1)
    return KernelExpr(kind, params, left, right)


def resample_params(expr: KernelExpr, rng: np.random.Generator) -> KernelExpr:
    """Same skeleton, all parameters redrawn from the prior."""
    from .kernels import param_transforms, with_params

    return with_params(expr, [sample_param(t, rng) for t in param_transforms(expr)])


def structure_log_prior(expr: KernelExpr, cfg: PcfgConfig, depth: int = 1) -> float:
    """Log probability of the tree skeleton alone (no parameter densities).

    Returns -inf for trees that violate the depth cap.
    """
    at_cap = cfg.max_depth is not None and depth == cfg.max_depth
    if expr.is_base:
        rule = 0.0 if at_cap else math.log(cfg.p_leaf)
        return rule + math.log(_base_prob(cfg, expr.kind))
    if at_cap or (cfg.max_depth is not None and depth > cfg.max_depth):
        return -math.inf
    return (
        math.log(_op_prob(cfg, expr.kind))
        + structure_log_prior(expr.left, cfg, depth + 1)
        + structure_log_prior(expr.right, cfg, depth + 1)
    )


def params_log_prior(expr: KernelExpr) -> float:
    """Sum of per-slot parameter log-densities over the whole tree."""
    total = sum(
        param_log_pdf(v, t) for v, t in zip(expr.params, _node_param_transforms(expr.kind))
    )
    if not expr.is_base:
        total += params_log_prior(expr.left) + params_log_prior(expr.right)
    return total


def log_prior(expr: KernelExpr, cfg: PcfgConfig, depth: int = 1) -> float:
    """Exact log of structure probability times parameter prior density.

    Context-freeness means this factorizes over nodes, so the log prior of
    a subtree swap differs only in the subtree terms (at equal depth).
    """
    return structure_log_prior(expr, cfg, depth) + params_log_prior(expr)


# ---------------------------------------------------------------------------
# Noise prior: InverseGamma(1, 1) on the observation variance
# ---------------------------------------------------------------------------


def inverse_gamma_logpdf(x: float, shape: float, scale: float) -> float:
    if x <= 0:
        return -math.inf
    return shape * math.log(scale) - math.lgamma(shape) - (shape + 1.0) * math.log(x) - scale / x


def sample_inverse_gamma(shape: float, scale: float, rng: np.random.Generator) -> float:
    return float(scale / rng.gamma(shape))


def sample_noise(rng: np.random.Generator) -> float:
    return sample_inverse_gamma(1.0, 1.0, rng)


def log_noise_prior(eta: float) -> float:
    if eta <= 0:
        raise ValueError("noise variance must be positive")
    return inverse_gamma_logpdf(eta, 1.0, 1.0)
