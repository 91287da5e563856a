"""Form compiler: weak-form integrals to executable element kernels.

:func:`compile_form` expands an integrand into blocks
``coefficient * test_slot * trial_slot`` where a slot is either the basis
value or one physical derivative.  The resulting :class:`KernelIR` holds the
tabulated basis, the geometry plan and an ordered list of contraction
operations.  Blocks whose coefficients do not depend on position are also
lowered to precomputed reference tensors (the *fused* path), so that their
element tensor is a short sum of reference tensors weighted by geometric
factors.

Kernels run on batches of cells.  All contractions are written as
elementwise array updates in a fixed order, so each cell's tensor is
bitwise independent of which other cells share its batch.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import forms as F
from .errors import DegenerateCell, MalformedForm, UnsupportedIntegrand
from .fe import lagrange_element, simplex_quadrature, tabulate

VALUE = "v"


@dataclass(frozen=True)
class _Term:
    scale: float
    factors: tuple          # rank-0 FormExpr factors
    test: object = None     # None | VALUE | axis
    trial: object = None


def _mul(t1: _Term, t2: _Term) -> _Term:
    if (t1.test is not None and t2.test is not None) or (t1.trial is not None and t2.trial is not None):
        raise MalformedForm("non-bilinear product")
    return _Term(t1.scale * t2.scale, t1.factors + t2.factors,
                 t1.test if t1.test is not None else t2.test,
                 t1.trial if t1.trial is not None else t2.trial)


def _expand(e, dim):
    k = e.kind
    if not F.arguments(e) and k not in (F.GRAD, F.GRAD_COMPONENT, F.DOT):
        return [_Term(1.0, (e,))]
    if k == F.TRIAL:
        return [_Term(1.0, (), trial=VALUE)]
    if k == F.TEST:
        return [_Term(1.0, (), test=VALUE)]
    if k == F.GRAD_COMPONENT:
        base = e.children[0]
        if e.axis >= dim:
            raise MalformedForm(f"derivative along axis {e.axis} in {dim}D")
        if base.kind == F.TRIAL:
            return [_Term(1.0, (), trial=e.axis)]
        if base.kind == F.TEST:
            return [_Term(1.0, (), test=e.axis)]
        if base.kind == F.COORDINATE:
            return [_Term(1.0 if base.axis == e.axis else 0.0, ())]
        raise UnsupportedIntegrand(f"derivative of {base.kind}")
    if k == F.SUM:
        return [t for c in e.children for t in _expand(c, dim)]
    if k == F.NEGATE:
        return [_Term(-t.scale, t.factors, t.test, t.trial) for t in _expand(e.children[0], dim)]
    if k == F.PRODUCT:
        terms = [_Term(1.0, ())]
        for c in e.children:
            terms = [_mul(a, b) for a in terms for b in _expand(c, dim)]
        return terms
    if k == F.DOT:
        g1, g2 = e.children
        if g1.kind != F.GRAD or g2.kind != F.GRAD:
            raise UnsupportedIntegrand("dot is only supported between gradients")
        out = []
        for m in range(dim):
            c1 = F.FormExpr(F.GRAD_COMPONENT, g1.children, axis=m)
            c2 = F.FormExpr(F.GRAD_COMPONENT, g2.children, axis=m)
            out += [_mul(a, b) for a in _expand(c1, dim) for b in _expand(c2, dim)]
        return out
    raise UnsupportedIntegrand(f"cannot compile a {k} node")


def _depends_on_position(e) -> bool:
    if e.kind == F.COORDINATE:
        return True
    return any(_depends_on_position(c) for c in e.children)


@dataclass(eq=False)
class Block:
    test: object
    trial: object
    scale: float
    factors: tuple
    constant: bool

    def describe(self):
        coef = "*".join(F.to_string(f) for f in self.factors) or "1"
        slot = lambda s: "-" if s is None else ("val" if s == VALUE else f"d{s}")
        kind = "const" if self.constant else "x-dependent"
        return f"test={slot(self.test)} trial={slot(self.trial)} coef={self.scale!r}*{coef} [{kind}]"


@dataclass(eq=False)
class KernelIR:
    rank: int
    dim: int
    degree: int
    quad_degree: int
    element: object
    rule: object
    tab: object
    blocks: list
    fused: dict | None              # (test_comp, trial_comp) -> reference tensor
    ops: list = field(default_factory=list)

    @property
    def ndofs(self):
        return self.element.ndofs

    def to_text(self) -> str:
        head = (f"kernel rank={self.rank} dim={self.dim} CG{self.degree} "
                f"quadrature degree={self.quad_degree} points={len(self.rule)} "
                f"path={'fused' if self.fused is not None else 'quadrature'}")
        return "\n".join([head] + [f"  {i:3d}  {op}" for i, op in enumerate(self.ops)])


def default_quadrature_degree(integral: F.FormIntegral, degree: int) -> int:
    variable = _depends_on_position(integral.integrand)
    if integral.rank == 2:
        return 2 * degree + (2 if variable else 0)
    return 2 * degree + 2 if variable else degree


def compile_form(integral: F.FormIntegral, space: F.SpaceSpec, quadrature_degree: int | None = None,
                 fuse: bool = True) -> KernelIR:
    if not isinstance(integral, F.FormIntegral):
        raise MalformedForm("compile_form expects a FormIntegral")
    rank = integral.rank
    if rank not in (1, 2):
        raise MalformedForm(f"only rank 1 and 2 forms compile, got rank {rank}")
    d, k = space.dim, space.degree
    q = default_quadrature_degree(integral, k) if quadrature_degree is None else int(quadrature_degree)
    element = lagrange_element(d, k)
    rule = simplex_quadrature(d, q)
    tab = tabulate(element, rule)

    grouped = {}
    for t in _expand(integral.integrand, d):
        if t.scale == 0.0:
            continue
        if t.test is None or (rank == 2 and t.trial is None):
            raise MalformedForm("every term must contain the test (and trial) function")
        key = (t.test, t.trial)
        grouped.setdefault(key, []).append(t)
    blocks = []
    for (test, trial), terms in grouped.items():
        for t in terms:
            const = not any(_depends_on_position(f) for f in t.factors)
            blocks.append(Block(test, trial, t.scale, t.factors, const))

    ops = [f"geometry: J[:, :, i] = X[i+1] - X[0]; detJ; K = inv(J); |detJ| > 1e-14 h^{d}"]
    all_const = all(b.constant for b in blocks)
    fused = None
    if fuse and all_const:
        fused = {}
        comps = lambda s: [None] if s == VALUE else list(range(d))
        w = rule.weights
        for b in blocks:
            for a in comps(b.test):
                for c in (comps(b.trial) if rank == 2 else [None]):
                    key = (a, c)
                    if key in fused:
                        continue
                    T = tab.values if a is None else tab.gradients[:, :, a]
                    if rank == 2:
                        U = tab.values if c is None else tab.gradients[:, :, c]
                        fused[key] = np.einsum("q,qi,qj->ij", w, T, U)
                    else:
                        fused[key] = np.einsum("q,qi->i", w, T)
                    ops.append(f"reference tensor R{key} = sum_q w_q {_slotname(a)}_i {_slotname(c) if rank == 2 else ''}")
        for i, b in enumerate(blocks):
            ops.append(f"block {i}: {b.describe()} -> G[a,b] += coef * geom(test) * geom(trial)")
        ops.append("contract: A += |detJ| * G[a,b] * R[a,b] over keys in order")
    else:
        ops.append("map quadrature points: x_q = X[0] + J xi_q")
        ops.append("physical gradients: dphi[c,q,i,m] = sum_a K[c,a,m] dphi_ref[q,i,a]")
        for i, b in enumerate(blocks):
            ops.append(f"block {i}: {b.describe()} -> A += sum_q w_q |detJ| coef(x_q) test_i trial_j")
    return KernelIR(rank, d, k, q, element, rule, tab, blocks, fused, ops)


def _slotname(c):
    return "phi" if c is None else f"dphi/dxi{c}"


# -- execution -------------------------------------------------------------

def geometry(X):
    """Affine geometry of a batch of simplices ``X`` (nc, d+1, d)."""
    X = np.asarray(X, dtype=float)
    d = X.shape[-1]
    J = np.swapaxes(X[:, 1:, :] - X[:, :1, :], 1, 2)      # J[c, a, i]
    if d == 2:
        det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
        adj = np.empty_like(J)
        adj[:, 0, 0] = J[:, 1, 1]
        adj[:, 0, 1] = -J[:, 0, 1]
        adj[:, 1, 0] = -J[:, 1, 0]
        adj[:, 1, 1] = J[:, 0, 0]
    else:
        a, b, c = J[:, 0], J[:, 1], J[:, 2]
        det = (a[:, 0] * (b[:, 1] * c[:, 2] - b[:, 2] * c[:, 1])
               - a[:, 1] * (b[:, 0] * c[:, 2] - b[:, 2] * c[:, 0])
               + a[:, 2] * (b[:, 0] * c[:, 1] - b[:, 1] * c[:, 0]))
        adj = np.empty_like(J)
        for i in range(3):
            for j in range(3):
                rows = [r for r in range(3) if r != j]
                cols = [s for s in range(3) if s != i]
                minor = (J[:, rows[0], cols[0]] * J[:, rows[1], cols[1]]
                         - J[:, rows[0], cols[1]] * J[:, rows[1], cols[0]])
                adj[:, i, j] = (-1) ** (i + j) * minor
    edges = X[:, :, None, :] - X[:, None, :, :]
    h = np.sqrt((edges ** 2).sum(-1)).max(axis=(1, 2))
    bad = np.abs(det) <= 1e-14 * h ** d
    if np.any(bad):
        raise DegenerateCell(f"{int(bad.sum())} degenerate cell(s); first |detJ| = {abs(det[bad][0]):.3e}")
    K = adj / det[:, None, None]
    return J, det, K


def _geom_pieces(slot, K, d):
    """(reference component, factor) pairs for one slot."""
    if slot == VALUE or slot is None:
        return [(None, None)]
    return [(a, K[:, a, slot]) for a in range(d)]


def _coef_values(block, pts, bindings):
    """Coefficient at points ``pts`` (nc, nq, d) -> (nc, nq) or scalar."""
    val = block.scale
    if not block.factors:
        return val
    nc, nq, d = pts.shape
    flat = pts.reshape(-1, d)
    for f in block.factors:
        val = val * F.evaluate_pointwise(f, flat, bindings)
    return np.asarray(val).reshape(nc, nq)


def execute_kernel(ir: KernelIR, coords, bindings=None, path: str | None = None):
    """Element tensor(s) for one cell ``(d+1, d)`` or a batch ``(nc, d+1, d)``."""
    coords = np.asarray(coords, dtype=float)
    single = coords.ndim == 2
    X = coords[None] if single else coords
    if X.shape[1:] != (ir.dim + 1, ir.dim):
        raise ValueError(f"cell coordinates have shape {coords.shape}")
    use = path or ("fused" if ir.fused is not None else "quadrature")
    if use == "fused" and ir.fused is None:
        raise ValueError("this kernel has no fused path")
    J, det, K = geometry(X)
    absdet = np.abs(det)
    out = _run_fused(ir, X, absdet, K, bindings or {}) if use == "fused" else \
        _run_quadrature(ir, X, J, absdet, K, bindings or {})
    return out[0] if single else out


def _run_fused(ir, X, absdet, K, bindings):
    nc, n, d = X.shape[0], ir.ndofs, ir.dim
    G = {}
    for b in ir.blocks:
        coef = float(np.asarray(_coef_values(b, np.zeros((1, 1, d)), bindings)).reshape(-1)[0])
        trial_pieces = _geom_pieces(b.trial, K, d) if ir.rank == 2 else [(None, None)]
        for a, ga in _geom_pieces(b.test, K, d):
            for c, gc in trial_pieces:
                g = np.full(nc, coef)
                if ga is not None:
                    g = g * ga
                if gc is not None:
                    g = g * gc
                key = (a, c)
                G[key] = G[key] + g if key in G else g
    shape = (nc, n, n) if ir.rank == 2 else (nc, n)
    A = np.zeros(shape)
    for key in sorted(G, key=lambda t: tuple(-1 if v is None else v for v in t)):
        s = absdet * G[key]
        R = ir.fused[key]
        A += s[:, None, None] * R[None] if ir.rank == 2 else s[:, None] * R[None]
    return A


def _run_quadrature(ir, X, J, absdet, K, bindings):
    nc, n, d = X.shape[0], ir.ndofs, ir.dim
    tab, rule = ir.tab, ir.rule
    nq = len(rule)
    pts = np.repeat(X[:, None, 0, :], nq, axis=1)
    for i in range(d):
        pts = pts + J[:, None, :, i] * rule.points[None, :, i, None]
    dphys = None
    if any(s not in (VALUE, None) for b in ir.blocks for s in (b.test, b.trial)):
        # physical gradients, explicit sum over reference directions
        dphys = np.zeros((nc, nq, n, d))
        for m in range(d):
            for a in range(d):
                dphys[:, :, :, m] += K[:, a, m][:, None, None] * tab.gradients[None, :, :, a]

    def slot_table(slot):
        if slot == VALUE:
            return np.broadcast_to(tab.values[None], (nc, nq, n))
        return dphys[:, :, :, slot]

    shape = (nc, n, n) if ir.rank == 2 else (nc, n)
    A = np.zeros(shape)
    for b in ir.blocks:
        coef = np.broadcast_to(_coef_values(b, pts, bindings), (nc, nq))
        T = slot_table(b.test)
        U = slot_table(b.trial) if ir.rank == 2 else None
        for q in range(nq):
            s = rule.weights[q] * absdet * coef[:, q]
            if ir.rank == 2:
                A += s[:, None, None] * T[:, q, :, None] * U[:, q, None, :]
            else:
                A += s[:, None] * T[:, q, :]
    return A

