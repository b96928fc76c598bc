"""Involutive MCMC kernels over kernel structures and parameters.

Two structure moves are provided, each formulated as (simulate trace,
apply involution, accept with an exact density ratio):

* Subtree-Replace: pick a node uniformly, regenerate the subtree below it
  from the grammar, and refresh the noise with a conjugate inverse-gamma
  draw.  Applying the involution twice restores the input bitwise.
* Detach-Attach: a pair of mutually inverse submoves.  Detach hoists a
  descendant subtree up to replace its ancestor, discarding the
  surrounding scaffold; Attach wraps the current subtree in a freshly
  generated scaffold.  The direction is a Bernoulli(xi) coin; structurally
  inapplicable draws are proposed-and-rejected.

Both moves run a pseudo-marginal multi-try parameter proposal: U candidate
parameter vectors are drawn (log-normal random walk on surviving slots,
prior draws on fresh slots), weighted by importance weights, and one is
selected; U-1 auxiliary reverse candidates make the move a valid
involutive MCMC step on the extended space.  With U = 1 and zero walk
spread the acceptance ratio reduces to the plain single-try ratio.

Acceptance ratios are assembled from exact forward and reverse trace
densities (no hand cancellation), so recomputing the ratio from the
reverse trace yields the reciprocal bitwise.

A standard leapfrog HMC kernel over unconstrained (theta, eta) handles
the continuous parameters between structure moves.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import gp, prior
from .dataio import TimeSeries
from .gp import ModelState, NumericalError
from .kernels import (
    KernelExpr,
    TreePath,
    all_paths,
    cov_matrix,
    flatten_params,
    node_count,
    param_count,
    param_slot_range,
    param_transforms,
    subtree_extract,
    subtree_replace_at,
    with_params,
)
from .prior import PcfgConfig

logger = logging.getLogger(__name__)

__all__ = [
    "MoveConfig",
    "MoveInfo",
    "ReplaceTrace",
    "DetachAttachTrace",
    "involution_subtree_replace",
    "involution_detach_attach",
    "simulate_replace_trace",
    "simulate_detach_attach_trace",
    "replace_trace_log_density",
    "detach_attach_trace_log_density",
    "move_log_ratio",
    "prop1_replace_log_ratio",
    "propose_subtree_replace",
    "propose_detach_attach",
    "hmc_params",
    "rejuvenate",
]


@dataclass(frozen=True)
class MoveConfig:
    """Tuning knobs for the rejuvenation move mixture.

    ``delta`` is the variance of the log-space random walk on surviving
    parameters; zero means copy them unchanged.  ``u_policy`` is 'dim'
    (U = max(1, d(k), d(k')), symmetric in the two structures so forward
    and reverse moves agree on U) or 'fixed' (U = u_fixed).
    """

    xi: float = 0.5
    u_policy: str = "dim"
    u_fixed: int = 1
    delta: float = 0.1
    hmc_steps: int = 10
    hmc_step_size: float = 0.02
    p_subtree_replace: float = 0.5
    da_multi_try: bool = True

    def __post_init__(self):
        if not 0.0 < self.xi < 1.0:
            raise ValueError("xi must lie in (0, 1)")
        if self.u_fixed < 1:
            raise ValueError("u_fixed must be >= 1")
        if self.delta < 0:
            raise ValueError("delta must be >= 0")
        if self.u_policy not in ("dim", "fixed"):
            raise ValueError("u_policy must be 'dim' or 'fixed'")


@dataclass
class MoveInfo:
    kind: str
    accepted: bool
    log_ratio: float = -math.inf
    inapplicable: bool = False
    trace: object | None = None


ParamVec = tuple[float, ...]


@dataclass(frozen=True)
class ReplaceTrace:
    """Auxiliary variables of one Subtree-Replace proposal.

    ``fwd_candidates`` holds U full parameter vectors for the proposed
    tree (fresh slots filled per candidate); ``rev_candidates`` holds the
    U-1 auxiliary vectors for the current tree.  ``fresh`` carries the
    selected candidate's values on its own slots so the involution round
    trips bitwise.
    """

    path: TreePath
    fresh: KernelExpr
    fwd_candidates: tuple[ParamVec, ...]
    sel_index: int
    rev_candidates: tuple[ParamVec, ...]
    rev_index: int
    eta_new: float


@dataclass(frozen=True)
class DetachAttachTrace:
    """Auxiliary variables of one Detach or Attach proposal.

    For Detach, ``b`` addresses the kept subtree below ``a`` and
    ``scaffold`` is None.  For Attach, ``scaffold`` is the full new
    subtree (with the current subtree embedded at ``b``), materialized
    with the selected candidate's parameter values.
    """

    detach: bool
    a: TreePath
    b: TreePath
    scaffold: KernelExpr | None
    fwd_candidates: tuple[ParamVec, ...]
    sel_index: int
    rev_candidates: tuple[ParamVec, ...]
    rev_index: int
    eta_new: float


# ---------------------------------------------------------------------------
# Shared / discarded / fresh slot bookkeeping
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _SlotMaps:
    shared_old: tuple[int, ...]
    shared_new: tuple[int, ...]
    discarded: tuple[int, ...]  # slots of the old tree with no counterpart
    fresh: tuple[int, ...]      # slots of the new tree with no counterpart


def _replace_maps(old: KernelExpr, new: KernelExpr, path: TreePath) -> _SlotMaps:
    d_old, d_new = param_count(old), param_count(new)
    o0, o1 = param_slot_range(old, path)
    n0, n1 = param_slot_range(new, path)
    shared_old = tuple(range(0, o0)) + tuple(range(o1, d_old))
    shared_new = tuple(range(0, n0)) + tuple(range(n1, d_new))
    return _SlotMaps(shared_old, shared_new, tuple(range(o0, o1)), tuple(range(n0, n1)))


def _detach_maps(old: KernelExpr, new: KernelExpr, a: TreePath, b: TreePath) -> _SlotMaps:
    d_old, d_new = param_count(old), param_count(new)
    a0, a1 = param_slot_range(old, a)
    t0, t1 = param_slot_range(old, a + b)
    n0, n1 = param_slot_range(new, a)
    shared_old = tuple(range(0, a0)) + tuple(range(t0, t1)) + tuple(range(a1, d_old))
    shared_new = tuple(range(0, n0)) + tuple(range(n0, n1)) + tuple(range(n1, d_new))
    discarded = tuple(range(a0, t0)) + tuple(range(t1, a1))
    return _SlotMaps(shared_old, shared_new, discarded, ())


def _attach_maps(old: KernelExpr, new: KernelExpr, a: TreePath, b: TreePath) -> _SlotMaps:
    inv = _detach_maps(new, old, a, b)
    return _SlotMaps(inv.shared_new, inv.shared_old, (), inv.discarded)


# ---------------------------------------------------------------------------
# Candidate proposals: random walks and prior draws per slot
# ---------------------------------------------------------------------------

_LOG_2PI = math.log(2.0 * math.pi)


def _walk_sample(value: float, transform: str, delta: float, rng: np.random.Generator) -> float:
    if delta == 0.0:
        return value
    sd = math.sqrt(delta)
    if transform == "log":
        return math.exp(math.log(value) - delta / 2.0 + sd * rng.standard_normal())
    half = value / 2.0
    z = math.log(half / (1.0 - half)) + sd * rng.standard_normal()
    return 2.0 / (1.0 + math.exp(-z))


def _walk_log_pdf(new: float, center: float, transform: str, delta: float) -> float:
    """Density of the random walk in constrained coordinates; a zero-spread
    walk is a point mass and contributes zero by convention."""
    if delta == 0.0:
        return 0.0
    if transform == "log":
        if new <= 0:
            return -math.inf
        mean = math.log(center) - delta / 2.0
        z = math.log(new)
        return -0.5 * (z - mean) ** 2 / delta - 0.5 * math.log(delta) - 0.5 * _LOG_2PI - z
    if not 0.0 < new < 2.0:
        return -math.inf
    mean = math.log(center / (2.0 - center))
    z = math.log(new / (2.0 - new))
    jac = math.log(2.0) - math.log(new * (2.0 - new))
    return -0.5 * (z - mean) ** 2 / delta - 0.5 * math.log(delta) - 0.5 * _LOG_2PI + jac


def _sample_candidate(
    theta_center: ParamVec,
    maps_shared_from: tuple[int, ...],
    maps_shared_to: tuple[int, ...],
    fresh_slots: tuple[int, ...],
    transforms_to: tuple[str, ...],
    size: int,
    delta: float,
    rng: np.random.Generator,
) -> ParamVec:
    out = [0.0] * size
    for i_from, i_to in zip(maps_shared_from, maps_shared_to):
        out[i_to] = _walk_sample(theta_center[i_from], transforms_to[i_to], delta, rng)
    for i in fresh_slots:
        out[i] = prior.sample_param(transforms_to[i], rng)
    return tuple(out)


def _candidate_log_pdf(
    cand: ParamVec,
    theta_center: ParamVec,
    maps_shared_from: tuple[int, ...],
    maps_shared_to: tuple[int, ...],
    fresh_slots: tuple[int, ...],
    transforms_to: tuple[str, ...],
    delta: float,
) -> float:
    total = 0.0
    for i_from, i_to in zip(maps_shared_from, maps_shared_to):
        total += _walk_log_pdf(cand[i_to], theta_center[i_from], transforms_to[i_to], delta)
    for i in fresh_slots:
        total += prior.param_log_pdf(cand[i], transforms_to[i])
    return total


def _omega(skeleton: KernelExpr, cand: ParamVec, eta: float, data: TimeSeries, q_log: float) -> float:
    """Importance weight log(prior * likelihood / proposal) of one candidate.

    Terms constant across candidates (structure and noise priors) are
    omitted; they cancel in both the selection probabilities and the
    acceptance ratio.
    """
    expr = with_params(skeleton, cand)
    lp = prior.params_log_prior(expr)
    if not math.isfinite(lp):
        return -math.inf
    try:
        ll = gp.marginal_cache(expr, eta, data).log_lik
    except NumericalError:
        return -math.inf
    return lp + ll - q_log


def _pick_u(cfg: MoveConfig, d_old: int, d_new: int) -> int:
    if cfg.u_policy == "fixed":
        return cfg.u_fixed
    return max(1, d_old, d_new)


def _gibbs_log_pdf_at(expr: KernelExpr, eta_for_mean: float, eta_eval: float, data: TimeSeries) -> float:
    """Log-density of the conjugate noise proposal evaluated at ``eta_eval``,
    with the conditional mean computed under (expr, eta_for_mean)."""
    state = ModelState(expr, eta_for_mean)
    shape, scale = gp.gibbs_params(state, data)
    return prior.inverse_gamma_logpdf(eta_eval, shape, scale)


# ---------------------------------------------------------------------------
# Involutions (pure functions; applying twice restores the input bitwise)
# ---------------------------------------------------------------------------


def _swap_candidates(
    theta_old: ParamVec,
    fwd: tuple[ParamVec, ...],
    sel: int,
    rev: tuple[ParamVec, ...],
    rev_index: int,
):
    new_fwd = rev[:rev_index] + (theta_old,) + rev[rev_index:]
    new_rev = fwd[:sel] + fwd[sel + 1 :]
    return new_fwd, new_rev


def involution_subtree_replace(
    expr: KernelExpr, eta: float, trace: ReplaceTrace
) -> tuple[KernelExpr, float, ReplaceTrace]:
    """The Subtree-Replace involution on the extended space."""
    skeleton = subtree_replace_at(expr, trace.path, trace.fresh)
    theta_new = trace.fwd_candidates[trace.sel_index]
    if len(theta_new) != param_count(skeleton):
        raise ValueError("trace inconsistent: candidate length mismatch")
    f0, f1 = param_slot_range(skeleton, trace.path)
    if tuple(theta_new[f0:f1]) != flatten_params(trace.fresh):
        raise ValueError("trace inconsistent: fresh subtree parameters disagree")
    new_expr = with_params(skeleton, theta_new)
    discarded = subtree_extract(expr, trace.path)
    new_fwd, new_rev = _swap_candidates(
        flatten_params(expr),
        trace.fwd_candidates,
        trace.sel_index,
        trace.rev_candidates,
        trace.rev_index,
    )
    new_trace = ReplaceTrace(
        trace.path, discarded, new_fwd, trace.rev_index, new_rev, trace.sel_index, eta
    )
    return new_expr, trace.eta_new, new_trace


def involution_detach_attach(
    expr: KernelExpr, eta: float, trace: DetachAttachTrace
) -> tuple[KernelExpr, float, DetachAttachTrace]:
    """The Detach/Attach involution pair (f_A inverts f_D and vice versa)."""
    if not trace.b:
        raise ValueError("trace inconsistent: empty scaffold path")
    sub = subtree_extract(expr, trace.a)
    if trace.detach:
        if sub.is_base:
            raise ValueError("trace inconsistent: cannot detach below a leaf")
        kept = subtree_extract(sub, trace.b)
        skeleton = subtree_replace_at(expr, trace.a, kept)
    else:
        if trace.scaffold is None:
            raise ValueError("trace inconsistent: attach needs a scaffold")
        new_sub = subtree_replace_at(trace.scaffold, trace.b, sub)
        skeleton = subtree_replace_at(expr, trace.a, new_sub)
    theta_new = trace.fwd_candidates[trace.sel_index]
    if len(theta_new) != param_count(skeleton):
        raise ValueError("trace inconsistent: candidate length mismatch")
    new_expr = with_params(skeleton, theta_new)
    new_fwd, new_rev = _swap_candidates(
        flatten_params(expr),
        trace.fwd_candidates,
        trace.sel_index,
        trace.rev_candidates,
        trace.rev_index,
    )
    new_scaffold = subtree_extract(expr, trace.a) if trace.detach else None
    new_trace = DetachAttachTrace(
        not trace.detach,
        trace.a,
        trace.b,
        new_scaffold,
        new_fwd,
        trace.rev_index,
        new_rev,
        trace.sel_index,
        eta,
    )
    return new_expr, trace.eta_new, new_trace


# ---------------------------------------------------------------------------
# Attach scaffold generation
# ---------------------------------------------------------------------------

_P_EMBED = 0.5


def _sample_scaffold(cfg: PcfgConfig, rng: np.random.Generator, depth: int):
    """Sample (hole path, builder steps) for an Attach scaffold.

    At each level an operator node is created (kind from the grammar's
    operator distribution, placeholder parameters from the prior), the
    embedded side is chosen uniformly, and the sibling subtree is drawn
    from the grammar at its own depth; generation then stops with
    probability p_embed, or is forced to stop at the depth cap.  The
    first extension is unconditional so the scaffold is never empty: an
    empty scaffold would be a no-op whose reversal (Detach with b at the
    root) has zero density.  Returns None when the tree is already at the
    cap, making Attach structurally inapplicable there.
    """
    steps = []
    hole: list[int] = []
    d = depth
    while True:
        at_cap = cfg.max_depth is not None and d == cfg.max_depth
        if steps and (at_cap or rng.uniform() < _P_EMBED):
            break
        if at_cap:
            return None
        ops = np.asarray(cfg.operator_probs)
        kind_idx = rng.choice(3, p=ops / ops.sum())
        kind = (prior._OPERATOR_ORDER)[kind_idx]
        params = prior._sample_node_params(kind, rng)
        side = int(rng.integers(2))
        sibling = prior.sample_structure(cfg, rng, d + 1)
        steps.append((kind, params, side, sibling))
        hole.append(side)
        d += 1
    return tuple(hole), steps


def _build_scaffold(steps, content: KernelExpr) -> KernelExpr:
    node = content
    for kind, params, side, sibling in reversed(steps):
        if side == 0:
            node = KernelExpr(kind, params, node, sibling)
        else:
            node = KernelExpr(kind, params, sibling, node)
    return node


def _scaffold_struct_log_density(
    scaffold: KernelExpr, b: TreePath, cfg: PcfgConfig, depth: int
) -> float:
    """Structure-only log-density of generating (b, scaffold skeleton).

    Mirrors _sample_scaffold exactly: the first extension is free, later
    ones cost log(1 - p_embed), the final stop costs log(p_embed) unless
    forced by the depth cap.
    """
    if not b:
        return -math.inf
    ops = cfg.operator_probs
    total_op = sum(ops)
    total = 0.0
    node = scaffold
    d = depth
    for i, side in enumerate(b):
        at_cap = cfg.max_depth is not None and d == cfg.max_depth
        if at_cap or node.is_base:
            return -math.inf
        if i > 0:
            total += math.log(1.0 - _P_EMBED)
        total += math.log(prior._op_prob(cfg, node.kind) / total_op)
        total += math.log(0.5)
        sibling = node.right if side == 0 else node.left
        total += prior.structure_log_prior(sibling, cfg, d + 1)
        node = node.left if side == 0 else node.right
        d += 1
    if cfg.max_depth is None or d < cfg.max_depth:
        total += math.log(_P_EMBED)
    return total


# ---------------------------------------------------------------------------
# Trace simulation
# ---------------------------------------------------------------------------


def _simulate_candidates(
    old_expr: KernelExpr,
    skeleton: KernelExpr,
    maps: _SlotMaps,
    eta: float,
    data: TimeSeries,
    n_cand: int,
    delta: float,
    rng: np.random.Generator,
):
    """Draw U candidates for the new tree, select one by importance weight,
    then draw the Gibbs noise and the reverse auxiliaries."""
    theta_old = flatten_params(old_expr)
    tf_old = param_transforms(old_expr)
    tf_new = param_transforms(skeleton)
    d_new = param_count(skeleton)
    cands = []
    omegas = np.empty(n_cand)
    for u in range(n_cand):
        cand = _sample_candidate(
            theta_old, maps.shared_old, maps.shared_new, maps.fresh, tf_new, d_new, delta, rng
        )
        q_log = _candidate_log_pdf(
            cand, theta_old, maps.shared_old, maps.shared_new, maps.fresh, tf_new, delta
        )
        cands.append(cand)
        omegas[u] = _omega(skeleton, cand, eta, data, q_log)
    if not np.any(np.isfinite(omegas)):
        return None
    log_total = logsumexp(omegas)
    probs = np.exp(omegas - log_total)
    probs = probs / probs.sum()
    sel = int(rng.choice(n_cand, p=probs))

    selected_expr = with_params(skeleton, cands[sel])
    eta_new, _ = gp.gibbs_noise(ModelState(selected_expr, eta), data, rng)

    theta_sel = cands[sel]
    rev = tuple(
        _sample_candidate(
            theta_sel, maps.shared_new, maps.shared_old, maps.discarded, tf_old,
            len(theta_old), delta, rng,
        )
        for _ in range(n_cand - 1)
    )
    rev_index = int(rng.integers(n_cand))
    return tuple(cands), sel, rev, rev_index, eta_new


def simulate_replace_trace(
    state: ModelState,
    data: TimeSeries,
    pcfg: PcfgConfig,
    mcfg: MoveConfig,
    rng: np.random.Generator,
) -> ReplaceTrace | None:
    """Simulate the auxiliary randomness of one Subtree-Replace proposal."""
    paths = all_paths(state.expr)
    path = paths[int(rng.integers(len(paths)))]
    fresh0 = prior.sample_structure(pcfg, rng, depth=len(path) + 1)
    skeleton = subtree_replace_at(state.expr, path, fresh0)
    maps = _replace_maps(state.expr, skeleton, path)
    n_cand = _pick_u(mcfg, param_count(state.expr), param_count(skeleton))
    sim = _simulate_candidates(
        state.expr, skeleton, maps, state.eta, data, n_cand, mcfg.delta, rng
    )
    if sim is None:
        return None
    cands, sel, rev, rev_index, eta_new = sim
    f0, f1 = param_slot_range(skeleton, path)
    fresh = with_params(fresh0, cands[sel][f0:f1])
    return ReplaceTrace(path, fresh, cands, sel, rev, rev_index, eta_new)


def simulate_detach_attach_trace(
    state: ModelState,
    data: TimeSeries,
    pcfg: PcfgConfig,
    mcfg: MoveConfig,
    rng: np.random.Generator,
) -> DetachAttachTrace | str | None:
    """Simulate one Detach or Attach proposal; returns 'inapplicable' when
    the drawn direction cannot act on the current tree."""
    expr = state.expr
    detach = rng.uniform() < mcfg.xi
    paths = all_paths(expr)
    a = paths[int(rng.integers(len(paths)))]
    sub = subtree_extract(expr, a)
    if detach:
        if sub.is_base:
            return "inapplicable"
        rel = all_paths(sub)[1:]
        b = rel[int(rng.integers(len(rel)))]
        kept = subtree_extract(sub, b)
        skeleton = subtree_replace_at(expr, a, kept)
        maps = _detach_maps(expr, skeleton, a, b)
        scaffold = None
    else:
        drawn = _sample_scaffold(pcfg, rng, len(a) + 1)
        if drawn is None:
            return "inapplicable"
        b, steps = drawn
        new_sub = _build_scaffold(steps, sub)
        skeleton = subtree_replace_at(expr, a, new_sub)
        maps = _attach_maps(expr, skeleton, a, b)
        scaffold = None  # materialized after candidate selection below
    delta = mcfg.delta if mcfg.da_multi_try else 0.0
    n_cand = (
        _pick_u(mcfg, param_count(expr), param_count(skeleton)) if mcfg.da_multi_try else 1
    )
    sim = _simulate_candidates(expr, skeleton, maps, state.eta, data, n_cand, delta, rng)
    if sim is None:
        return None
    cands, sel, rev, rev_index, eta_new = sim
    if not detach:
        materialized = with_params(skeleton, cands[sel])
        scaffold = subtree_extract(materialized, a)
    return DetachAttachTrace(detach, a, b, scaffold, cands, sel, rev, rev_index, eta_new)


# ---------------------------------------------------------------------------
# Trace densities and acceptance ratios
# ---------------------------------------------------------------------------


def _candidate_block_log_density(
    old_expr: KernelExpr,
    skeleton: KernelExpr,
    maps: _SlotMaps,
    eta: float,
    data: TimeSeries,
    cands: tuple[ParamVec, ...],
    sel: int,
    rev: tuple[ParamVec, ...],
    delta: float,
    eta_new: float,
) -> float:
    """Log-density of the candidate stage of a trace: U forward draws, the
    importance selection, the Gibbs noise draw, the U-1 reverse draws, and
    the uniform reverse index."""
    theta_old = flatten_params(old_expr)
    tf_old = param_transforms(old_expr)
    tf_new = param_transforms(skeleton)
    n_cand = len(cands)
    total = 0.0
    omegas = np.empty(n_cand)
    for u, cand in enumerate(cands):
        q_log = _candidate_log_pdf(
            cand, theta_old, maps.shared_old, maps.shared_new, maps.fresh, tf_new, delta
        )
        total += q_log
        omegas[u] = _omega(skeleton, cand, eta, data, q_log)
    if not math.isfinite(omegas[sel]):
        return -math.inf
    total += omegas[sel] - logsumexp(omegas)

    selected_expr = with_params(skeleton, cands[sel])
    total += _gibbs_log_pdf_at(selected_expr, eta, eta_new, data)

    theta_sel = cands[sel]
    for vec in rev:
        total += _candidate_log_pdf(
            vec, theta_sel, maps.shared_new, maps.shared_old, maps.discarded, tf_old, delta
        )
    total -= math.log(n_cand)
    return total


def replace_trace_log_density(
    expr: KernelExpr,
    eta: float,
    trace: ReplaceTrace,
    data: TimeSeries,
    pcfg: PcfgConfig,
    mcfg: MoveConfig,
) -> float:
    """Exact log-density of a Subtree-Replace trace from (expr, eta)."""
    skeleton = subtree_replace_at(expr, trace.path, trace.fresh)
    maps = _replace_maps(expr, skeleton, trace.path)
    total = -math.log(node_count(expr))
    total += prior.structure_log_prior(trace.fresh, pcfg, depth=len(trace.path) + 1)
    total += _candidate_block_log_density(
        expr, skeleton, maps, eta, data,
        trace.fwd_candidates, trace.sel_index, trace.rev_candidates,
        mcfg.delta, trace.eta_new,
    )
    return total


def detach_attach_trace_log_density(
    expr: KernelExpr,
    eta: float,
    trace: DetachAttachTrace,
    data: TimeSeries,
    pcfg: PcfgConfig,
    mcfg: MoveConfig,
) -> float:
    """Exact log-density of a Detach/Attach trace from (expr, eta)."""
    sub = subtree_extract(expr, trace.a)
    if trace.detach:
        if sub.is_base or not trace.b:
            return -math.inf
        total = math.log(mcfg.xi)
        total += -math.log(node_count(expr))
        total += -math.log(node_count(sub) - 1)
        kept = subtree_extract(sub, trace.b)
        skeleton = subtree_replace_at(expr, trace.a, kept)
        maps = _detach_maps(expr, skeleton, trace.a, trace.b)
    else:
        total = math.log(1.0 - mcfg.xi)
        total += -math.log(node_count(expr))
        total += _scaffold_struct_log_density(trace.scaffold, trace.b, pcfg, len(trace.a) + 1)
        if not math.isfinite(total):
            return -math.inf
        new_sub = subtree_replace_at(trace.scaffold, trace.b, sub)
        skeleton = subtree_replace_at(expr, trace.a, new_sub)
        maps = _attach_maps(expr, skeleton, trace.a, trace.b)
    delta = mcfg.delta if mcfg.da_multi_try else 0.0
    total += _candidate_block_log_density(
        expr, skeleton, maps, eta, data,
        trace.fwd_candidates, trace.sel_index, trace.rev_candidates,
        delta, trace.eta_new,
    )
    return total


def move_log_ratio(
    state: ModelState,
    trace,
    data: TimeSeries,
    pcfg: PcfgConfig,
    mcfg: MoveConfig,
) -> tuple[float, ModelState]:
    """Acceptance log-ratio of a move and the proposed state.

    Assembled as [log joint(x') - log joint(x)] + [log q(trace'|x') -
    log q(trace|x)], with the reverse trace produced by the involution."""
    if isinstance(trace, ReplaceTrace):
        new_expr, new_eta, rev_trace = involution_subtree_replace(state.expr, state.eta, trace)
        density = lambda e, h, t: replace_trace_log_density(e, h, t, data, pcfg, mcfg)
    else:
        new_expr, new_eta, rev_trace = involution_detach_attach(state.expr, state.eta, trace)
        density = lambda e, h, t: detach_attach_trace_log_density(e, h, t, data, pcfg, mcfg)
    new_state = ModelState(new_expr, new_eta)
    log_joint_new = _safe_log_joint(new_state, data, pcfg)
    log_joint_old = _safe_log_joint(state, data, pcfg)
    if not math.isfinite(log_joint_new):
        return -math.inf, new_state
    log_r = (
        log_joint_new
        - log_joint_old
        + density(new_expr, new_eta, rev_trace)
        - density(state.expr, state.eta, trace)
    )
    return log_r, new_state


def _safe_log_joint(state: ModelState, data: TimeSeries, pcfg: PcfgConfig) -> float:
    try:
        return gp.log_joint(state, data, pcfg)
    except NumericalError:
        return -math.inf


def prop1_replace_log_ratio(
    state: ModelState, trace: ReplaceTrace, data: TimeSeries, pcfg: PcfgConfig
) -> float:
    """Single-try Subtree-Replace acceptance ratio, computed directly:

    r = [P(eta')/P(eta)] [L(y|k',theta',eta')/L(y|k,theta,eta)]
        [(1/|k'|)/(1/|k|)] [Gibbs(eta; mu, y)/Gibbs(eta'; mu', y)]

    Used as an independent check that the multi-try machinery degenerates
    correctly at U = 1, delta = 0.
    """
    new_expr, new_eta, _ = involution_subtree_replace(state.expr, state.eta, trace)
    ll_old = gp.marginal_cache(state.expr, state.eta, data).log_lik
    ll_new = gp.marginal_cache(new_expr, new_eta, data).log_lik
    log_r = prior.log_noise_prior(new_eta) - prior.log_noise_prior(state.eta)
    log_r += ll_new - ll_old
    log_r += math.log(node_count(state.expr)) - math.log(node_count(new_expr))
    # Reverse Gibbs: old noise under (old structure, new eta); forward
    # Gibbs: new noise under (new structure, old eta).
    log_r += _gibbs_log_pdf_at(state.expr, new_eta, state.eta, data)
    log_r -= _gibbs_log_pdf_at(new_expr, state.eta, new_eta, data)
    return log_r


# ---------------------------------------------------------------------------
# Metropolis-Hastings drivers
# ---------------------------------------------------------------------------


def _mh_step(state, trace, data, pcfg, mcfg, rng) -> tuple[ModelState, MoveInfo]:
    kind = "replace" if isinstance(trace, ReplaceTrace) else "detach_attach"
    try:
        log_r, new_state = move_log_ratio(state, trace, data, pcfg, mcfg)
    except NumericalError as exc:
        logger.warning("move rejected after numerical error: %s", exc)
        return state, MoveInfo(kind, False)
    if math.isnan(log_r):
        logger.warning("move rejected: acceptance ratio is NaN")
        return state, MoveInfo(kind, False, trace=trace)
    if math.log(rng.uniform()) < log_r:
        gp.ensure_cache(new_state, data)
        return new_state, MoveInfo(kind, True, log_r, trace=trace)
    return state, MoveInfo(kind, False, log_r, trace=trace)


def propose_subtree_replace(
    state: ModelState,
    data: TimeSeries,
    pcfg: PcfgConfig,
    mcfg: MoveConfig,
    rng: np.random.Generator,
) -> tuple[ModelState, MoveInfo]:
    """One Subtree-Replace MH step; returns the (possibly unchanged) state."""
    trace = simulate_replace_trace(state, data, pcfg, mcfg, rng)
    if trace is None:
        logger.warning("replace move rejected: no finite candidate weight")
        return state, MoveInfo("replace", False)
    return _mh_step(state, trace, data, pcfg, mcfg, rng)


def propose_detach_attach(
    state: ModelState,
    data: TimeSeries,
    pcfg: PcfgConfig,
    mcfg: MoveConfig,
    rng: np.random.Generator,
) -> tuple[ModelState, MoveInfo]:
    """One Detach-Attach MH step; inapplicable directions count as rejections."""
    trace = simulate_detach_attach_trace(state, data, pcfg, mcfg, rng)
    if trace == "inapplicable":
        return state, MoveInfo("detach_attach", False, inapplicable=True)
    if trace is None:
        logger.warning("detach-attach move rejected: no finite candidate weight")
        return state, MoveInfo("detach_attach", False)
    return _mh_step(state, trace, data, pcfg, mcfg, rng)


# ---------------------------------------------------------------------------
# Hamiltonian Monte Carlo over continuous parameters
# ---------------------------------------------------------------------------


def hmc_params(
    state: ModelState,
    data: TimeSeries,
    pcfg: PcfgConfig,
    mcfg: MoveConfig,
    rng: np.random.Generator,
) -> tuple[ModelState, MoveInfo]:
    """One leapfrog HMC trajectory over unconstrained (theta, eta) with the
    structure held fixed; identity mass matrix, MH-corrected."""
    if mcfg.hmc_steps == 0:
        return state, MoveInfo("hmc", True, 0.0)
    template = state.expr
    z = gp.unconstrain(state.expr, state.eta)
    momentum = rng.standard_normal(z.size)

    def eval_at(zv):
        return gp.log_density_and_grad(template, zv, data, include_prior=True)

    try:
        logp0, grad = eval_at(z)
    except (NumericalError, OverflowError, ValueError):
        return state, MoveInfo("hmc", False)
    h0 = -logp0 + 0.5 * float(momentum @ momentum)
    eps = mcfg.hmc_step_size
    z_new = z.copy()
    p_new = momentum.copy()
    try:
        p_new = p_new + 0.5 * eps * grad
        for step in range(mcfg.hmc_steps):
            z_new = z_new + eps * p_new
            logp, grad = eval_at(z_new)
            if step < mcfg.hmc_steps - 1:
                p_new = p_new + eps * grad
        p_new = p_new + 0.5 * eps * grad
    except (NumericalError, OverflowError, ValueError):
        return state, MoveInfo("hmc", False)
    h1 = -logp + 0.5 * float(p_new @ p_new)
    if not (math.isfinite(h0) and math.isfinite(h1)):
        return state, MoveInfo("hmc", False)
    log_r = h0 - h1
    if math.log(rng.uniform()) < log_r:
        try:
            expr_new, eta_new = gp.constrain(template, z_new)
        except (OverflowError, ValueError):
            return state, MoveInfo("hmc", False, log_r)
        new_state = ModelState(expr_new, eta_new)
        gp.ensure_cache(new_state, data)
        return new_state, MoveInfo("hmc", True, log_r)
    return state, MoveInfo("hmc", False, log_r)


# ---------------------------------------------------------------------------
# Rejuvenation driver
# ---------------------------------------------------------------------------


def rejuvenate(
    state: ModelState,
    data: TimeSeries,
    pcfg: PcfgConfig,
    mcfg: MoveConfig,
    rng: np.random.Generator,
    steps: int,
) -> tuple[ModelState, dict]:
    """Apply ``steps`` rejuvenation iterations (one structure move followed
    by one HMC call each); the particle weight is untouched by design."""
    counters = {
        "replace": [0, 0],
        "detach_attach": [0, 0],
        "hmc": [0, 0],
    }
    for _ in range(steps):
        if rng.uniform() < mcfg.p_subtree_replace:
            state, info = propose_subtree_replace(state, data, pcfg, mcfg, rng)
        else:
            state, info = propose_detach_attach(state, data, pcfg, mcfg, rng)
        counters[info.kind][0] += 1
        counters[info.kind][1] += int(info.accepted)
        state, info = hmc_params(state, data, pcfg, mcfg, rng)
        counters["hmc"][0] += 1
        counters["hmc"][1] += int(info.accepted)
    return state, counters
