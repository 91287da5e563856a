"""Symbolic weak forms.

A deliberately small expression language covering the Poisson problem:
scalar expressions built from constants, spatial coordinates, the trial and
test functions and their first derivatives, combined with ``+``, ``*``,
integer powers and a few elementary functions.  Integrating an expression
against ``dx`` yields a :class:`FormIntegral` which the kernel compiler
consumes.

Example
-------
>>> u, v = TrialFunction(), TestFunction()
>>> a = dot(grad(u), grad(v)) * dx
>>> a.rank
2
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from numbers import Real

import numpy as np

from .errors import MalformedForm, UnboundConstant, UnsupportedDegree

__all__ = [
    "FormExpr", "FormIntegral", "SpaceSpec", "BcSpec",
    "Constant", "SpatialCoordinate", "TrialFunction", "TestFunction",
    "grad", "dot", "sin", "cos", "tan", "dx", "pi",
    "infer_rank", "evaluate_pointwise",
    "manufactured_rhs", "manufactured_solution",
]

#: node kinds
CONSTANT = "constant"
COORDINATE = "coordinate"
TRIAL = "trial"
TEST = "test"
GRAD = "grad"            # vector valued, only legal as an operand of dot
GRAD_COMPONENT = "grad_component"
SUM = "sum"
PRODUCT = "product"
NEGATE = "negate"
POWER = "power"
UNARY = "unary"
DOT = "dot"

_UNARY_FUNCS = {"sin": np.sin, "cos": np.cos, "tan": np.tan}
_GRADABLE = (TRIAL, TEST, COORDINATE)


@dataclass(frozen=True, eq=False)
class FormExpr:
    """One node of a weak-form expression tree.

    Only ``kind`` and ``children`` are meaningful for every node; the other
    fields are used by the leaf kinds that need them (``axis`` for
    coordinates and gradient components, ``value``/``name`` for constants,
    ``fn`` for unary functions, ``exponent`` for powers).
    """

    kind: str
    children: tuple = ()
    axis: int | None = None
    value: float | None = None
    name: str | None = None
    fn: str | None = None
    exponent: int | None = None

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return FormExpr(SUM, (self, as_expr(other)))

    def __radd__(self, other):
        return FormExpr(SUM, (as_expr(other), self))

    def __sub__(self, other):
        return FormExpr(SUM, (self, FormExpr(NEGATE, (as_expr(other),))))

    def __rsub__(self, other):
        return FormExpr(SUM, (as_expr(other), FormExpr(NEGATE, (self,))))

    def __mul__(self, other):
        if isinstance(other, _Measure):
            return NotImplemented
        return FormExpr(PRODUCT, (self, as_expr(other)))

    def __rmul__(self, other):
        return FormExpr(PRODUCT, (as_expr(other), self))

    def __truediv__(self, other):
        if isinstance(other, Real):
            return FormExpr(PRODUCT, (self, Constant(1.0 / float(other))))
        return FormExpr(PRODUCT, (self, FormExpr(POWER, (as_expr(other),), exponent=-1)))

    def __rtruediv__(self, other):
        return FormExpr(PRODUCT, (as_expr(other), FormExpr(POWER, (self,), exponent=-1)))

    def __neg__(self):
        return FormExpr(NEGATE, (self,))

    def __pos__(self):
        return self

    def __pow__(self, n):
        if isinstance(n, Real) and float(n).is_integer():
            return FormExpr(POWER, (self,), exponent=int(n))
        raise MalformedForm(f"only integer exponents are supported, got {n!r}")

    def __getitem__(self, i):
        if self.kind != GRAD:
            raise MalformedForm("only gradients can be indexed")
        return FormExpr(GRAD_COMPONENT, self.children, axis=int(i))

    def __repr__(self):
        return to_string(self)


def as_expr(obj) -> FormExpr:
    if isinstance(obj, FormExpr):
        return obj
    if isinstance(obj, Real):
        return FormExpr(CONSTANT, value=float(obj))
    raise MalformedForm(f"cannot use {type(obj).__name__} in a form expression")


def Constant(value=None, name=None) -> FormExpr:
    """A constant. Named constants may be rebound at evaluation time."""
    if value is None and name is None:
        raise MalformedForm("a constant needs a value or a name")
    return FormExpr(CONSTANT, value=None if value is None else float(value), name=name)


def SpatialCoordinate(dim: int):
    return tuple(FormExpr(COORDINATE, axis=i) for i in range(dim))


def TrialFunction() -> FormExpr:
    return FormExpr(TRIAL)


def TestFunction() -> FormExpr:
    return FormExpr(TEST)


def grad(expr: FormExpr) -> FormExpr:
    expr = as_expr(expr)
    if expr.kind not in _GRADABLE:
        raise MalformedForm(f"grad of a {expr.kind} node is not representable")
    return FormExpr(GRAD, (expr,))


def dot(a: FormExpr, b: FormExpr) -> FormExpr:
    return FormExpr(DOT, (a, b))


def _unary(name):
    def f(arg):
        arg = as_expr(arg)
        return FormExpr(UNARY, (arg,), fn=name)
    f.__name__ = name
    return f


sin = _unary("sin")
cos = _unary("cos")
tan = _unary("tan")
pi = math.pi


def to_string(e: FormExpr) -> str:
    k = e.kind
    if k == CONSTANT:
        return e.name if e.name is not None else repr(e.value)
    if k == COORDINATE:
        return "xyz"[e.axis]
    if k in (TRIAL, TEST):
        return {TRIAL: "u", TEST: "v"}[k]
    if k == GRAD:
        return f"grad({to_string(e.children[0])})"
    if k == GRAD_COMPONENT:
        return f"grad({to_string(e.children[0])})[{e.axis}]"
    if k == SUM:
        return "(" + " + ".join(to_string(c) for c in e.children) + ")"
    if k == PRODUCT:
        return "*".join(to_string(c) for c in e.children)
    if k == NEGATE:
        return f"-({to_string(e.children[0])})"
    if k == POWER:
        return f"({to_string(e.children[0])})**{e.exponent}"
    if k == UNARY:
        return f"{e.fn}({to_string(e.children[0])})"
    if k == DOT:
        return f"dot({to_string(e.children[0])}, {to_string(e.children[1])})"
    return f"<{k}>"


# -- rank inference --------------------------------------------------------

def _signature(e: FormExpr):
    """Return (arguments, is_vector) for a node, validating as we go."""
    k = e.kind
    if k in (CONSTANT, COORDINATE):
        return frozenset(), False
    if k in (TRIAL, TEST):
        return frozenset((k,)), False
    if k == GRAD:
        base = e.children[0]
        if base.kind not in _GRADABLE:
            raise MalformedForm(f"grad of a {base.kind} node is not representable")
        return _signature(base)[0], True
    if k == GRAD_COMPONENT:
        base = e.children[0]
        if base.kind not in _GRADABLE:
            raise MalformedForm(f"grad of a {base.kind} node is not representable")
        return _signature(base)[0], False
    if k == DOT:
        (a, va), (b, vb) = (_signature(c) for c in e.children)
        if not (va and vb):
            raise MalformedForm("dot needs two vector (gradient) operands")
        if a & b:
            raise MalformedForm(f"non-bilinear product: {sorted(a & b)} appears twice")
        return a | b, False
    if k == SUM:
        sigs = [_signature(c) for c in e.children]
        if any(v for _, v in sigs):
            raise MalformedForm("vector expressions may only appear inside dot")
        args = {s for s, _ in sigs}
        if len(args) != 1:
            raise MalformedForm("sum of terms with different arguments")
        return args.pop(), False
    if k == PRODUCT:
        acc = frozenset()
        for c in e.children:
            s, v = _signature(c)
            if v:
                raise MalformedForm("vector expressions may only appear inside dot")
            if acc & s:
                raise MalformedForm(f"non-bilinear product: {sorted(acc & s)} appears twice")
            acc = acc | s
        return acc, False
    if k == NEGATE:
        return _signature(e.children[0])
    if k in (POWER, UNARY):
        s, v = _signature(e.children[0])
        if s or v:
            raise MalformedForm(f"{k} applied to a non-scalar-coefficient expression")
        if k == UNARY and e.fn not in _UNARY_FUNCS:
            raise MalformedForm(f"unknown function {e.fn!r}")
        return s, False
    raise MalformedForm(f"unknown node kind {k!r}")


def arguments(expr: FormExpr) -> frozenset:
    return _signature(expr)[0]


def infer_rank(expr: FormExpr) -> int:
    """0 for coefficient expressions, 1 for linear forms, 2 for bilinear forms."""
    args, is_vector = _signature(expr)
    if is_vector:
        raise MalformedForm("a form integrand must be scalar")
    if TRIAL in args and TEST not in args:
        raise MalformedForm("trial function without a test function")
    return len(args)


# -- integrals and spaces --------------------------------------------------

class _Measure:
    """Cell integration measure; ``expr * dx`` builds a FormIntegral."""

    def __rmul__(self, expr):
        return FormIntegral(as_expr(expr))

    def __repr__(self):
        return "dx"


dx = _Measure()


@dataclass(frozen=True, eq=False)
class FormIntegral:
    integrand: FormExpr
    measure: str = "cell"
    rank: int = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "rank", infer_rank(self.integrand))


@dataclass(frozen=True)
class SpaceSpec:
    """Continuous Lagrange space of degree ``degree`` on a ``dim``-dimensional mesh."""

    degree: int
    dim: int
    family: str = "CG"

    def __post_init__(self):
        if self.family != "CG":
            raise UnsupportedDegree(f"only continuous Lagrange is supported, not {self.family}")
        if not 1 <= self.degree <= 4:
            raise UnsupportedDegree(f"degree {self.degree} outside [1, 4]")
        if self.dim not in (2, 3):
            raise UnsupportedDegree(f"dimension {self.dim} not supported")


@dataclass(frozen=True)
class BcSpec:
    markers: tuple
    value: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "markers", tuple(int(m) for m in self.markers))


# -- evaluation ------------------------------------------------------------

def evaluate_pointwise(expr: FormExpr, point, bindings=None):
    """Evaluate a rank-0 expression at one point or an ``(n, d)`` array of points."""
    if infer_rank(expr) != 0:
        raise MalformedForm("only rank-0 expressions can be evaluated pointwise")
    pts = np.asarray(point, dtype=float)
    scalar = pts.ndim == 1
    val = _eval(expr, np.atleast_2d(pts), bindings or {})
    val = np.broadcast_to(val, (np.atleast_2d(pts).shape[0],)).astype(float)
    return float(val[0]) if scalar else val.copy()


def _eval(e, pts, bindings):
    k = e.kind
    if k == CONSTANT:
        if e.name is not None and e.name in bindings:
            return float(bindings[e.name])
        if e.value is None:
            raise UnboundConstant(f"constant {e.name!r} has no binding")
        return e.value
    if k == COORDINATE:
        if e.axis >= pts.shape[1]:
            raise MalformedForm(f"coordinate axis {e.axis} on a {pts.shape[1]}-d point")
        return pts[:, e.axis]
    if k == SUM:
        out = _eval(e.children[0], pts, bindings)
        for c in e.children[1:]:
            out = out + _eval(c, pts, bindings)
        return out
    if k == PRODUCT:
        out = _eval(e.children[0], pts, bindings)
        for c in e.children[1:]:
            out = out * _eval(c, pts, bindings)
        return out
    if k == NEGATE:
        return -_eval(e.children[0], pts, bindings)
    if k == POWER:
        base = _eval(e.children[0], pts, bindings)
        return np.asarray(base, dtype=float) ** e.exponent
    if k == UNARY:
        return _UNARY_FUNCS[e.fn](_eval(e.children[0], pts, bindings))
    raise MalformedForm(f"cannot evaluate a {k} node pointwise")


# -- the manufactured Poisson problem -------------------------------------

def manufactured_solution(a=1.0, b=2.0, dim=3) -> FormExpr:
    """u = sin(pi x) tan(pi x/4) sin(a pi y) [sin(b pi z)]."""
    X = SpatialCoordinate(dim)
    ca = Constant(a, "a")
    u = sin(pi * X[0]) * tan(pi * X[0] / 4) * sin(ca * pi * X[1])
    if dim == 3:
        u = u * sin(Constant(b, "b") * pi * X[2])
    return u


def manufactured_rhs(a=1.0, b=2.0, dim=3) -> FormExpr:
    """Forcing f = -laplace(u) for :func:`manufactured_solution`.

    Grouped as ``-pi**2/2 * (2 cos(pi x) - cos(pi x/2)
    - 2 (a**2 + b**2) sin(pi x) tan(pi x/4)) * sin(a pi y) sin(b pi z)``;
    in 2D the ``b`` terms and the z factor are dropped.
    """
    X = SpatialCoordinate(dim)
    x, y = X[0], X[1]
    ca = Constant(a, "a")
    wave = ca ** 2
    if dim == 3:
        cb = Constant(b, "b")
        wave = ca ** 2 + cb ** 2
    f = as_expr(-pi ** 2 / 2)
    f = f * (2 * cos(pi * x) - cos(pi * x / 2) - 2 * wave * sin(pi * x) * tan(pi * x / 4))
    f = f * sin(ca * pi * y)
    if dim == 3:
        f = f * sin(cb * pi * X[2])
    return f
