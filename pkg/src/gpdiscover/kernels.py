"""Symbolic covariance-kernel expressions for temporal Gaussian processes.

A kernel expression is a finite binary tree.  Leaves are base kernels
(``LIN``, ``PER``, ``GE``), each carrying three positive parameters;
internal nodes are the binary operators ``+``, ``*`` and ``CP``
(changepoint, carrying a location and a transition width).  Trees are
immutable: every edit returns a new tree, so expressions can be shared
freely across threads and particles.

Kernel forms (t, t' are real time points, typically normalized to [0, 1]):

    LIN{a,b,c}   a + b * (t - c) * (t' - c)
    GE{a,b,c}    a * exp(-(|t - t'| / b)^c),            c in (0, 2]
    PER{a,b,c}   a * exp(-(2 / b^2) * sin^2(pi |t - t'| / c))
    CP{l,w}      k1 * s(t) s(t') + k2 * (1 - s(t))(1 - s(t')),
                 s(t) = (1 + tanh((t - l) / w)) / 2

The module also provides the tree-edit operators (extract / replace at a
path), canonical depth-first parameter flattening, and a text grammar
with a full-precision ``render``/``parse`` round trip.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

__all__ = [
    "Kind",
    "KernelExpr",
    "TreePath",
    "PathError",
    "ParseError",
    "BASE_KINDS",
    "OPERATOR_KINDS",
    "lin",
    "per",
    "ge",
    "ksum",
    "kprod",
    "cp",
    "eval_kernel",
    "cov_matrix",
    "cov_matrix_with_grads",
    "node_count",
    "param_count",
    "tree_height",
    "all_paths",
    "subtree_extract",
    "subtree_replace_at",
    "flatten_params",
    "with_params",
    "param_transforms",
    "param_slot_range",
    "contains_kind",
    "structure_signature",
    "render",
    "parse",
]


class Kind(Enum):
    """Node kinds: three base kernels and three binary operators."""

    LINEAR = "LIN"
    PERIODIC = "PER"
    GAMMA_EXP = "GE"
    SUM = "+"
    PRODUCT = "*"
    CHANGEPOINT = "CP"


BASE_KINDS = (Kind.LINEAR, Kind.PERIODIC, Kind.GAMMA_EXP)
OPERATOR_KINDS = (Kind.SUM, Kind.PRODUCT, Kind.CHANGEPOINT)

#: Number of continuous parameters stored on a node of each kind.
PARAM_COUNTS = {
    Kind.LINEAR: 3,
    Kind.PERIODIC: 3,
    Kind.GAMMA_EXP: 3,
    Kind.SUM: 0,
    Kind.PRODUCT: 0,
    Kind.CHANGEPOINT: 2,
}

#: Path into a tree: () is the root, 0 descends left, 1 descends right.
TreePath = tuple[int, ...]


class PathError(ValueError):
    """A tree path does not resolve to a node of the given expression."""


class ParseError(ValueError):
    """Kernel text is malformed; ``position`` is the offending index."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


@dataclass(frozen=True)
class KernelExpr:
    """One node of a covariance expression tree.

    Base-kernel amplitudes may be zero but scale-like parameters in
    denominators (GE/PER lengthscales and periods, CP widths) must be
    strictly positive, and the GE exponent must lie in (0, 2].  The prior
    and all proposals only ever produce strictly positive parameters; the
    weaker check here admits hand-built edge cases such as LIN{0,1,0}.
    """

    kind: Kind
    params: tuple[float, ...]
    left: "KernelExpr | None" = None
    right: "KernelExpr | None" = None

    def __post_init__(self):
        expected = PARAM_COUNTS[self.kind]
        if len(self.params) != expected:
            raise ValueError(
                f"{self.kind.value} expects {expected} parameters, got {len(self.params)}"
            )
        if not all(math.isfinite(p) for p in self.params):
            raise ValueError(f"non-finite parameter in {self.kind.value}{self.params}")
        if self.is_base:
            if self.left is not None or self.right is not None:
                raise ValueError("base kernel node cannot have children")
            if self.params[0] < 0:
                raise ValueError(f"{self.kind.value} amplitude must be >= 0")
            if self.kind in (Kind.PERIODIC, Kind.GAMMA_EXP):
                if self.params[1] <= 0 or self.params[2] <= 0:
                    raise ValueError(f"{self.kind.value} scale parameters must be > 0")
            if self.kind is Kind.LINEAR and self.params[1] < 0:
                raise ValueError("LIN slope variance must be >= 0")
            if self.kind is Kind.GAMMA_EXP and self.params[2] > 2:
                raise ValueError("GE exponent must lie in (0, 2]")
        else:
            if self.left is None or self.right is None:
                raise ValueError("operator node needs exactly two children")
            if self.kind is Kind.CHANGEPOINT and self.params[1] <= 0:
                raise ValueError("CP transition width must be > 0")

    @property
    def is_base(self) -> bool:
        return self.kind in BASE_KINDS


def lin(a: float, b: float, c: float) -> KernelExpr:
    return KernelExpr(Kind.LINEAR, (float(a), float(b), float(c)))


def per(a: float, b: float, c: float) -> KernelExpr:
    return KernelExpr(Kind.PERIODIC, (float(a), float(b), float(c)))


def ge(a: float, b: float, c: float) -> KernelExpr:
    return KernelExpr(Kind.GAMMA_EXP, (float(a), float(b), float(c)))


def ksum(left: KernelExpr, right: KernelExpr) -> KernelExpr:
    return KernelExpr(Kind.SUM, (), left, right)


def kprod(left: KernelExpr, right: KernelExpr) -> KernelExpr:
    return KernelExpr(Kind.PRODUCT, (), left, right)


def cp(location: float, width: float, left: KernelExpr, right: KernelExpr) -> KernelExpr:
    return KernelExpr(Kind.CHANGEPOINT, (float(location), float(width)), left, right)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def _eval_grid(expr: KernelExpr, ta: np.ndarray, tb: np.ndarray, want_grad: bool):
    """Evaluate ``expr`` on broadcast grids, optionally with parameter partials.

    Returns ``(K, grads)`` where ``grads`` is a list of arrays, one per
    parameter slot of ``expr`` in canonical depth-first order (node
    parameters first, then left subtree, then right subtree), or ``None``
    when ``want_grad`` is false.

    Every arithmetic form below is symmetric under the (ta, tb) swap at
    floating-point level, so cov_matrix is exactly symmetric.
    """
    kind = expr.kind
    if kind is Kind.LINEAR:
        a, b, c = expr.params
        da = ta - c
        db = tb - c
        prod = da * db
        k = a + b * prod
        if not want_grad:
            return k, None
        return k, [np.ones_like(prod), prod, b * (2.0 * c - ta - tb)]
    if kind is Kind.GAMMA_EXP:
        a, b, c = expr.params
        r = np.abs(ta - tb) / b
        g = np.power(r, c)
        e = np.exp(-g)
        k = a * e
        if not want_grad:
            return k, None
        ae = a * e
        d_b = ae * (c / b) * g
        with np.errstate(divide="ignore", invalid="ignore"):
            logr = np.where(r > 0, np.log(np.where(r > 0, r, 1.0)), 0.0)
        d_c = -ae * g * logr
        return k, [e, d_b, d_c]
    if kind is Kind.PERIODIC:
        a, b, c = expr.params
        absd = np.abs(ta - tb)
        s = np.sin(np.pi * absd / c)
        e = np.exp((-2.0 / (b * b)) * s * s)
        k = a * e
        if not want_grad:
            return k, None
        ae = a * e
        d_b = ae * (4.0 * s * s) / (b * b * b)
        d_c = ae * (4.0 * np.pi * absd * s * np.cos(np.pi * absd / c)) / (b * b * c * c)
        return k, [e, d_b, d_c]

    k1, g1 = _eval_grid(expr.left, ta, tb, want_grad)
    k2, g2 = _eval_grid(expr.right, ta, tb, want_grad)
    if kind is Kind.SUM:
        k = k1 + k2
        return k, (g1 + g2 if want_grad else None)
    if kind is Kind.PRODUCT:
        k = k1 * k2
        if not want_grad:
            return k, None
        return k, [d * k2 for d in g1] + [k1 * d for d in g2]
    # Changepoint: k1 * (sa * sb) + k2 * ((1 - sa)(1 - sb)); the products
    # sa*sb and (1-sa)(1-sb) swap into themselves, preserving exact symmetry.
    loc, width = expr.params
    ua = (ta - loc) / width
    ub = (tb - loc) / width
    sa = 0.5 * (1.0 + np.tanh(ua))
    sb = 0.5 * (1.0 + np.tanh(ub))
    w1 = sa * sb
    w2 = (1.0 - sa) * (1.0 - sb)
    k = k1 * w1 + k2 * w2
    if not want_grad:
        return k, None
    with np.errstate(over="ignore"):
        sech2a = 1.0 / np.cosh(ua) ** 2
        sech2b = 1.0 / np.cosh(ub) ** 2
    dsa_dloc = -sech2a / (2.0 * width)
    dsb_dloc = -sech2b / (2.0 * width)
    dsa_dw = -ua * sech2a / (2.0 * width)
    dsb_dw = -ub * sech2b / (2.0 * width)

    def _dk(dsa, dsb):
        dw1 = dsa * sb + sa * dsb
        dw2 = -dsa * (1.0 - sb) - (1.0 - sa) * dsb
        return k1 * dw1 + k2 * dw2

    grads = [_dk(dsa_dloc, dsb_dloc), _dk(dsa_dw, dsb_dw)]
    grads += [d * w1 for d in g1] + [d * w2 for d in g2]
    return k, grads


def eval_kernel(expr: KernelExpr, t: float, t2: float) -> float:
    """Evaluate the covariance k(t, t2); exactly symmetric in (t, t2)."""
    if not (math.isfinite(t) and math.isfinite(t2)):
        raise ValueError("time inputs must be finite")
    k, _ = _eval_grid(expr, np.float64(t), np.float64(t2), False)
    return float(k)


def cov_matrix(expr: KernelExpr, times: np.ndarray) -> np.ndarray:
    """Dense covariance matrix K[i, j] = k(times[i], times[j]).

    The result is exactly symmetric; positive semidefiniteness holds up to
    the jitter added by the factorization layer.
    """
    t = np.asarray(times, dtype=np.float64)
    if t.ndim != 1 or t.size == 0:
        raise ValueError("times must be a nonempty 1-d array")
    k, _ = _eval_grid(expr, t[:, None], t[None, :], False)
    return k


def cov_matrix_with_grads(expr: KernelExpr, times: np.ndarray):
    """Covariance matrix plus one partial-derivative matrix per parameter slot.

    Slot order matches :func:`flatten_params`.
    """
    t = np.asarray(times, dtype=np.float64)
    k, grads = _eval_grid(expr, t[:, None], t[None, :], True)
    return k, grads


# ---------------------------------------------------------------------------
# Tree edits
# ---------------------------------------------------------------------------


def node_count(expr: KernelExpr) -> int:
    """Total number of AST nodes, operators and leaves alike."""
    if expr.is_base:
        return 1
    return 1 + node_count(expr.left) + node_count(expr.right)


def param_count(expr: KernelExpr) -> int:
    """Total number of continuous parameters in the tree."""
    n = len(expr.params)
    if not expr.is_base:
        n += param_count(expr.left) + param_count(expr.right)
    return n


def tree_height(expr: KernelExpr) -> int:
    """Height in levels; a single leaf has height 1."""
    if expr.is_base:
        return 1
    return 1 + max(tree_height(expr.left), tree_height(expr.right))


def all_paths(expr: KernelExpr) -> list[TreePath]:
    """Every node path in pre-order; index 0 is the root ()."""
    out: list[TreePath] = []

    def walk(node: KernelExpr, prefix: TreePath):
        out.append(prefix)
        if not node.is_base:
            walk(node.left, prefix + (0,))
            walk(node.right, prefix + (1,))

    walk(expr, ())
    return out


def subtree_extract(expr: KernelExpr, path: TreePath) -> KernelExpr:
    """Subtree rooted at ``path`` (trees are immutable, so this is by value)."""
    node = expr
    for i, step in enumerate(path):
        if node.is_base:
            raise PathError(f"path {path} descends past a leaf at step {i}")
        node = node.left if step == 0 else node.right
    return node


def subtree_replace_at(expr: KernelExpr, path: TreePath, sub: KernelExpr) -> KernelExpr:
    """New tree with the subtree at ``path`` replaced by ``sub``."""
    if not path:
        return sub
    if expr.is_base:
        raise PathError(f"path {path} descends past a leaf")
    step, rest = path[0], path[1:]
    if step == 0:
        return KernelExpr(expr.kind, expr.params, subtree_replace_at(expr.left, rest, sub), expr.right)
    return KernelExpr(expr.kind, expr.params, expr.left, subtree_replace_at(expr.right, rest, sub))


def contains_kind(expr: KernelExpr, kind: Kind) -> bool:
    if expr.kind is kind:
        return True
    if expr.is_base:
        return False
    return contains_kind(expr.left, kind) or contains_kind(expr.right, kind)


def structure_signature(expr: KernelExpr) -> str:
    """Parameter-free rendering, used to group particles by structure."""
    if expr.is_base:
        return expr.kind.value
    if expr.kind is Kind.CHANGEPOINT:
        return f"CP({structure_signature(expr.left)}; {structure_signature(expr.right)})"
    return f"({structure_signature(expr.left)} {expr.kind.value} {structure_signature(expr.right)})"


# ---------------------------------------------------------------------------
# Canonical parameter flattening
# ---------------------------------------------------------------------------


def flatten_params(expr: KernelExpr) -> tuple[float, ...]:
    """Parameters in canonical depth-first order (node, left, right)."""
    out: list[float] = []

    def walk(node: KernelExpr):
        out.extend(node.params)
        if not node.is_base:
            walk(node.left)
            walk(node.right)

    walk(expr)
    return tuple(out)


def with_params(expr: KernelExpr, values) -> KernelExpr:
    """Rebuild the tree with parameters taken from a flat vector."""
    vals = [float(v) for v in values]
    if len(vals) != param_count(expr):
        raise ValueError(f"expected {param_count(expr)} parameters, got {len(vals)}")
    pos = 0

    def walk(node: KernelExpr) -> KernelExpr:
        nonlocal pos
        k = len(node.params)
        p = tuple(vals[pos : pos + k])
        pos += k
        if node.is_base:
            return KernelExpr(node.kind, p)
        return KernelExpr(node.kind, p, walk(node.left), walk(node.right))

    return walk(expr)


def param_transforms(expr: KernelExpr) -> tuple[str, ...]:
    """Unconstraining transform per slot: 'log' (positives) or 'logit2'
    for the GE exponent constrained to (0, 2]."""
    out: list[str] = []

    def walk(node: KernelExpr):
        if node.kind is Kind.GAMMA_EXP:
            out.extend(("log", "log", "logit2"))
        else:
            out.extend(["log"] * len(node.params))
        if not node.is_base:
            walk(node.left)
            walk(node.right)

    walk(expr)
    return tuple(out)


def param_slot_range(expr: KernelExpr, path: TreePath) -> tuple[int, int]:
    """Half-open range of flat-vector slots occupied by the subtree at ``path``."""
    start = 0
    node = expr
    for step in path:
        if node.is_base:
            raise PathError(f"path {path} descends past a leaf")
        start += len(node.params)
        if step == 0:
            node = node.left
        else:
            start += param_count(node.left)
            node = node.right
    return start, start + param_count(node)


# ---------------------------------------------------------------------------
# Text grammar
# ---------------------------------------------------------------------------

_KIND_BY_TOKEN = {"LIN": Kind.LINEAR, "PER": Kind.PERIODIC, "GE": Kind.GAMMA_EXP}


def _fmt(x: float) -> str:
    return format(x, ".17g")


def render(expr: KernelExpr) -> str:
    """Text form: LIN{a,b,c}, (k + k), (k * k), CP{l,w}(k; k).

    Parameters are written with 17 significant digits so parse(render(e))
    reproduces e exactly.
    """
    if expr.is_base:
        return f"{expr.kind.value}{{{','.join(_fmt(p) for p in expr.params)}}}"
    if expr.kind is Kind.CHANGEPOINT:
        l, w = expr.params
        return f"CP{{{_fmt(l)},{_fmt(w)}}}({render(expr.left)}; {render(expr.right)})"
    return f"({render(expr.left)} {expr.kind.value} {render(expr.right)})"


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def error(self, message: str) -> ParseError:
        return ParseError(message, self.pos)

    def skip_ws(self):
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1

    def expect(self, ch: str):
        self.skip_ws()
        if self.pos >= len(self.text) or self.text[self.pos] != ch:
            raise self.error(f"expected {ch!r}")
        self.pos += 1

    def parse_number(self) -> float:
        self.skip_ws()
        start = self.pos
        allowed = "+-0123456789.eE"
        while self.pos < len(self.text) and self.text[self.pos] in allowed:
            self.pos += 1
        token = self.text[start : self.pos]
        try:
            return float(token)
        except ValueError:
            self.pos = start
            raise self.error("expected a number") from None

    def parse_params(self, count: int) -> tuple[float, ...]:
        self.expect("{")
        vals = []
        for i in range(count):
            if i:
                self.expect(",")
            vals.append(self.parse_number())
        self.expect("}")
        return tuple(vals)

    def parse_expr(self) -> KernelExpr:
        self.skip_ws()
        if self.pos >= len(self.text):
            raise self.error("unexpected end of input")
        ch = self.text[self.pos]
        if ch == "(":
            self.pos += 1
            left = self.parse_expr()
            self.skip_ws()
            if self.pos >= len(self.text) or self.text[self.pos] not in "+*":
                raise self.error("expected '+' or '*'")
            op = Kind.SUM if self.text[self.pos] == "+" else Kind.PRODUCT
            self.pos += 1
            right = self.parse_expr()
            self.expect(")")
            return KernelExpr(op, (), left, right)
        if self.text.startswith("CP", self.pos):
            self.pos += 2
            params = self.parse_params(2)
            self.expect("(")
            left = self.parse_expr()
            self.expect(";")
            right = self.parse_expr()
            self.expect(")")
            try:
                return KernelExpr(Kind.CHANGEPOINT, params, left, right)
            except ValueError as exc:
                raise self.error(str(exc)) from None
        for token, kind in _KIND_BY_TOKEN.items():
            if self.text.startswith(token, self.pos):
                self.pos += len(token)
                params = self.parse_params(3)
                try:
                    return KernelExpr(kind, params)
                except ValueError as exc:
                    raise self.error(str(exc)) from None
        raise self.error("expected a kernel expression")


def parse(text: str) -> KernelExpr:
    """Parse the grammar emitted by :func:`render`.

    Raises :class:`ParseError` with the offending position on bad syntax or
    out-of-range parameters.
    """
    p = _Parser(text)
    expr = p.parse_expr()
    p.skip_ws()
    if p.pos != len(text):
        raise p.error("trailing input after expression")
    return expr
