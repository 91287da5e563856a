"""Solver trees: Krylov nodes, preconditioners and multigrid.

A tree is built from an :class:`~mgforge.solver.options.OptionTree` by
walking option prefixes: the node at prefix ``P`` reads ``P + "ksp_type"``,
``P + "pc_type"`` and so on, and multigrid or telescope preconditioners
build their children under ``P + "mg_levels_"``, ``P + "mg_coarse_"`` or
``P + "telescope_"``.  Every rank of a team builds the same tree; all
communication stays inside the team.

Vectors inside the tree are plain owned slices (``numpy`` arrays); ghost
values are refreshed inside each matrix product.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from ..errors import (BadTelescopeFactor, CoarseProblemTooLarge, DivergedMaxIts, IndefiniteOperator,
                      InvalidValue, MissingHierarchy, SingularMatrix, UnknownOption)
from ..la import CsrMatrix, Layout, RankVector, dense_lu_factor, dense_lu_solve, dot
from .options import OptionTree, parse_options
from .patch import PatchSmoother

logger = logging.getLogger(__name__)

DEFAULT_LU_MAX_DOFS = 20000
EIG_SEED = 20240817


@dataclass(eq=False)
class LevelOperator:
    """One level of an operator stack: the BC-applied matrix and its transfers."""

    A: CsrMatrix
    dofmap: object = None
    P: CsrMatrix | None = None        # prolongation from the next coarser level
    R: CsrMatrix | None = None        # restriction onto the next coarser level
    cache: dict = field(default_factory=dict)   # setup shared by solvers on this level

    @property
    def layout(self) -> Layout:
        return self.A.row_layout


@dataclass(eq=False)
class OperatorStack:
    levels: list                      # coarse -> fine
    hierarchy: bool = True

    @property
    def fine(self) -> LevelOperator:
        return self.levels[-1]


def build_stack(comm, operators, dofmaps, transfers=None) -> OperatorStack:
    """Collective: attach distributed transfers to per-level operators."""
    levels = [LevelOperator(A, dm) for A, dm in zip(operators, dofmaps)]
    for l in range(1, len(levels)):
        if transfers is None:
            raise MissingHierarchy("multi-level stack needs transfer operators")
        levels[l].P, levels[l].R = transfers.distribute(comm, l - 1, dofmaps[l], dofmaps[l - 1])
    return OperatorStack(levels)


@dataclass
class SolveStats:
    iterations: int = 0
    residual_history: list = field(default_factory=list)
    converged: bool = True
    reason: str = ""
    timings: dict = field(default_factory=dict)


@dataclass(eq=False)
class _Ctx:
    comm: object
    opts: OptionTree
    stack: OperatorStack


def _lookup(ctx, prefix, defaults):
    def get(leaf, fallback=None):
        return ctx.opts.get(prefix + leaf, defaults.get(leaf, fallback))
    return get


# -- preconditioners -------------------------------------------------------

class IdentityPC:
    kind = "none"

    def __init__(self, ctx, level, prefix, get):
        pass

    def apply(self, r):
        return r.copy()

    def describe(self, indent=0):
        return " " * indent + "pc: none"


class JacobiPC:
    kind = "jacobi"

    def __init__(self, ctx, level, prefix, get):
        d = ctx.stack.levels[level].A.diagonal()
        if np.any(d == 0):
            raise SingularMatrix("zero diagonal entry; Jacobi undefined")
        self.inv = 1.0 / d

    def apply(self, r):
        return r * self.inv

    def describe(self, indent=0):
        return " " * indent + "pc: jacobi"


def _decoupled(G):
    """Rows/columns that only hold a nonzero diagonal (eliminated dofs)."""
    G = G.copy()
    G.eliminate_zeros()
    n = G.shape[0]
    rows = np.diff(G.indptr)
    cols = np.bincount(G.indices, minlength=n)
    diag = G.diagonal()
    return (rows == 1) & (cols == 1) & (diag != 0), diag


class LUPC:
    """Dense LU of the whole operator on rank 0; solution broadcast to all."""

    kind = "lu"

    def __init__(self, ctx, level, prefix, get):
        self.comm = ctx.comm
        A = ctx.stack.levels[level].A
        self.layout = A.row_layout
        n = A.shape[0]
        cap = get("pc_lu_max_dofs", DEFAULT_LU_MAX_DOFS)
        if n > cap:
            raise CoarseProblemTooLarge(
                f"coarse problem has {n} dofs, dense LU limit is {cap}; add multigrid levels "
                f"or raise {prefix}pc_lu_max_dofs")
        self.n = n
        # every rank caches (rank 0 the factor, others a marker), so the
        # decision to skip the gather is the same on all ranks
        cache = ctx.stack.levels[level].cache
        if "lu" not in cache:
            blocks = self.comm.gather(A.global_rows())
            cache["lu"] = _CoarseFactor(sp.vstack(blocks, format="csr")) if self.comm.rank == 0 else True
        self.factor = cache["lu"] if self.comm.rank == 0 else None

    def apply(self, r):
        parts = self.comm.gather(r)
        x = self.factor.solve(np.concatenate(parts)) if self.comm.rank == 0 else None
        x = self.comm.bcast(x)
        lo, hi = self.layout.range(self.comm.rank)
        return x[lo:hi]

    def describe(self, indent=0):
        return " " * indent + f"pc: lu (dense, {self.n} dofs)"


class _CoarseFactor:
    """Dense LU restricted to the coupled block; eliminated dofs are diagonal."""

    def __init__(self, G):
        self.n = G.shape[0]
        self.dec, self.diag = _decoupled(G)
        self.inner = np.flatnonzero(~self.dec)
        dense = G[self.inner][:, self.inner].toarray(order="F")   # LAPACK order: factored in place
        self.lu = dense_lu_factor(dense, overwrite=True)

    def solve(self, rhs):
        x = np.empty(self.n)
        x[self.dec] = rhs[self.dec] / self.diag[self.dec]
        x[self.inner] = dense_lu_solve(self.lu, rhs[self.inner])
        return x


class TelescopePC:
    """Redundant coarse solve: contiguous groups of ``r`` ranks each solve the full problem."""

    kind = "telescope"

    def __init__(self, ctx, level, prefix, get):
        comm = self.comm = ctx.comm
        r = get("pc_telescope_reduction_factor", 1)
        get("pc_telescope_subcomm_type", "contiguous")
        if comm.size % r:
            raise BadTelescopeFactor(f"reduction factor {r} does not divide the team size {comm.size}")
        self.r = r
        A = ctx.stack.levels[level].A
        self.layout = A.row_layout
        self.roots = list(range(0, comm.size, r))
        self.group = comm.split(comm.rank // r)
        self.is_root = self.group.rank == 0
        rows = A.global_rows()
        got = comm.alltoall({q: rows for q in self.roots})
        self.inner = None
        inner_ctx = ctx
        if self.is_root:
            G = sp.vstack(got, format="csr")
            selfc = comm.self_comm()
            full = Layout(G.shape[0], [0, G.shape[0]])
            Aself = CsrMatrix.from_rows(selfc, G, full, full)
            inner_ctx = _Ctx(selfc, ctx.opts, OperatorStack([LevelOperator(Aself)], hierarchy=False))
            self.inner = KSP(inner_ctx, 0, prefix + "telescope_", {"ksp_type": "preonly", "pc_type": "lu"})
        else:
            # consume the same keys as the roots do so option hygiene is rank independent
            _mark_consumed(ctx.opts, prefix + "telescope_")

    def apply(self, r):
        comm = self.comm
        got = comm.alltoall({q: r for q in self.roots})
        x = None
        if self.is_root:
            x, _ = self.inner.solve(np.concatenate(got))
        x = self.group.bcast(x)
        lo, hi = self.layout.range(comm.rank)
        return x[lo:hi]

    def describe(self, indent=0):
        pad = " " * indent
        inner = self.inner.describe(indent + 2) if self.inner is not None else pad + "  (group member)"
        return f"{pad}pc: telescope (reduction factor {self.r}, contiguous)\n{inner}"


def _mark_consumed(opts, prefix):
    for key in opts.values:
        if key.startswith(prefix):
            opts.consumed.add(key)


class PatchPC:
    kind = "patch"

    def __init__(self, ctx, level, prefix, get):
        get("patch_pc_patch_construct_type", "star")
        get("patch_pc_patch_construct_dim", "0")
        op = ctx.stack.levels[level]
        if op.dofmap is None:
            raise InvalidValue("pc_type patch needs a discretised operator (dof map)")
        self.smoother = PatchSmoother(ctx.comm, op.A, op.dofmap)

    def apply(self, r):
        return self.smoother.apply(r)

    def describe(self, indent=0):
        s = self.smoother
        return " " * indent + f"pc: patch (vertex star, {s.num_patches} local patches, max size {s.max_size})"


class MGPC:
    """Geometric multigrid over levels ``0..level`` of the stack."""

    kind = "mg"

    def __init__(self, ctx, level, prefix, get):
        if not ctx.stack.hierarchy:
            raise MissingHierarchy("pc_type mg needs a mesh hierarchy")
        self.comm = ctx.comm
        self.mode = get("pc_mg_type", "multiplicative")
        self.log = get("pc_mg_log", False)
        self.ops = ctx.stack.levels[:level + 1]
        for l in range(1, len(self.ops)):
            if self.ops[l].P is None:
                raise MissingHierarchy(f"level {l} has no transfer operators")
        defaults = {"ksp_type": "chebyshev", "ksp_max_it": 2, "ksp_norm_type": "none",
                    "ksp_convergence_test": "skip", "pc_type": "jacobi"}
        self.smoothers = [None] + [KSP(ctx, l, prefix + "mg_levels_", defaults)
                                   for l in range(1, len(self.ops))]
        if len(self.ops) == 1:
            # smoother keys configure an empty set of levels
            _mark_consumed(ctx.opts, prefix + "mg_levels_")
        self.coarse = KSP(ctx, 0, prefix + "mg_coarse_", {"ksp_type": "preonly", "pc_type": "lu"})
        self.cycles = 0

    @property
    def nlevels(self):
        return len(self.ops)

    def _smooth(self, l, b, x):
        with self.comm.timer.stage(f"mg_level_{l}_smooth"):
            x, _ = self.smoothers[l].solve(b, x)
        return x

    def _coarse(self, b):
        with self.comm.timer.stage("mg_coarse_solve"):
            x, _ = self.coarse.solve(b)
        return x

    def vcycle(self, l, b, x=None):
        if l == 0:
            return self._coarse(b)
        op = self.ops[l]
        x = self._smooth(l, b, x)
        res = b - op.A.mult(self.comm, x)
        e = self.vcycle(l - 1, op.R.mult(self.comm, res))
        x = x + op.P.mult(self.comm, e)
        return self._smooth(l, b, x)

    def full(self, b):
        rhs = [None] * self.nlevels
        rhs[-1] = b
        for l in range(self.nlevels - 1, 0, -1):
            rhs[l - 1] = self.ops[l].R.mult(self.comm, rhs[l])
        x = self._coarse(rhs[0])
        for l in range(1, self.nlevels):
            x = self.ops[l].P.mult(self.comm, x)
            x = self.vcycle(l, rhs[l], x)
        return x

    def apply(self, r):
        self.cycles += 1
        x = self.full(r) if self.mode == "full" else self.vcycle(self.nlevels - 1, r)
        if self.log:
            logger.info("mg %s cycle %d over %d levels", self.mode, self.cycles, self.nlevels)
        return x

    def describe(self, indent=0):
        pad = " " * indent
        lines = [f"{pad}pc: mg ({self.mode}, {self.nlevels} levels)"]
        for l in range(self.nlevels - 1, 0, -1):
            lines.append(f"{pad}  level {l} smoother:")
            lines.append(self.smoothers[l].describe(indent + 4))
        lines.append(f"{pad}  coarse solver:")
        lines.append(self.coarse.describe(indent + 4))
        return "\n".join(lines)


_PCS = {"none": IdentityPC, "jacobi": JacobiPC, "lu": LUPC, "mg": MGPC, "patch": PatchPC,
        "telescope": TelescopePC}


def build_pc(ctx, level, prefix, defaults):
    get = _lookup(ctx, prefix, defaults)
    kind = get("pc_type", "none")
    try:
        cls = _PCS[kind]
    except KeyError:
        raise UnknownOption(f"{prefix}pc_type: unknown value {kind!r}") from None
    return cls(ctx, level, prefix, get)


# -- Krylov nodes ----------------------------------------------------------

class KSP:
    """One Krylov node (``preonly``, ``cg``, ``richardson`` or ``chebyshev``)."""

    def __init__(self, ctx, level, prefix="", defaults=None):
        defaults = defaults or {}
        get = _lookup(ctx, prefix, defaults)
        self.comm = ctx.comm
        self.prefix = prefix
        self.op = ctx.stack.levels[level]
        self.level = level
        self.type = get("ksp_type", "cg")
        if self.type not in ("preonly", "cg", "richardson", "chebyshev"):
            raise UnknownOption(f"{prefix}ksp_type: unknown value {self.type!r}")
        self.max_it = get("ksp_max_it", 10000)
        self.rtol = get("ksp_rtol", 1e-8)
        self.atol = get("ksp_atol", 1e-50)
        self.norm_type = get("ksp_norm_type", "none" if self.type == "preonly" else "unpreconditioned")
        self.test = get("ksp_convergence_test", "standard")
        if self.norm_type == "none" and self.test == "standard" and self.type != "preonly":
            self.test = "skip"
        self.scale = get("ksp_richardson_scale", 1.0) if self.type == "richardson" else 1.0
        if self.type == "chebyshev":
            self.eig_factors = (get("chebyshev_esteig_min_factor", 0.1),
                                get("chebyshev_esteig_max_factor", 1.1))
            self.eig_steps = get("chebyshev_esteig_steps", 20)
            if self.eig_factors[0] > self.eig_factors[1]:
                raise InvalidValue(f"{prefix}chebyshev_esteig_min_factor exceeds the max factor")
        self.pc = build_pc(ctx, level, prefix, defaults)
        self.bounds = None
        self.lambda_max = None
        if self.type == "chebyshev":
            self.estimate_bounds()
        self.last = SolveStats()

    # helpers
    @property
    def layout(self):
        return self.op.layout

    def _A(self, x):
        return self.op.A.mult(self.comm, x)

    def _dot(self, x, y):
        return dot(self.comm, self.layout, x, y)

    def _norm(self, x):
        return float(np.sqrt(self._dot(x, x)))

    def estimate_bounds(self):
        """Power iteration on ``M^-1 A`` from a seeded global start vector."""
        lo, hi = self.layout.range(self.comm.rank)
        v = np.random.default_rng(EIG_SEED).standard_normal(self.layout.n)[lo:hi]
        v = v / self._norm(v)
        lam = 0.0
        for _ in range(self.eig_steps):
            w = self.pc.apply(self._A(v))
            lam = self._norm(w)
            if lam == 0.0:
                break
            v = w / lam
        if not lam > 0:
            raise IndefiniteOperator("power iteration found no positive spectrum for the Chebyshev bounds")
        self.lambda_max = lam
        self.set_bounds(self.eig_factors[0] * lam, self.eig_factors[1] * lam)

    def set_bounds(self, lmin, lmax):
        if not 0 < lmin <= lmax:
            raise InvalidValue(f"Chebyshev bounds must satisfy 0 < min <= max, got [{lmin}, {lmax}]")
        self.bounds = (float(lmin), float(lmax))

    def _converged(self, rn, target, stats):
        stats.residual_history.append(rn)
        return rn <= target

    def _monitor_norm(self, r, z=None):
        if self.norm_type == "preconditioned":
            return self._norm(self.pc.apply(r) if z is None else z)
        return self._norm(r)

    def solve(self, b, x0=None):
        """Approximate ``A x = b`` (owned slices). Returns ``(x, SolveStats)``."""
        stats = SolveStats()
        b = np.asarray(b, dtype=float)
        x = self._dispatch(b, None if x0 is None else np.array(x0, dtype=float), stats)
        self.last = stats
        return x, stats

    def _dispatch(self, b, x, stats):
        if self.type == "preonly":
            stats.iterations = 1
            if x is None:
                return self.pc.apply(b)
            return x + self.pc.apply(b - self._A(x))
        return getattr(self, f"_solve_{self.type}")(b, x, stats)

    def _target(self, b):
        if self.test == "skip":
            return None
        bn = self._monitor_norm(b)
        return max(self.rtol * bn, self.atol)

    def _finish(self, stats, target, it):
        stats.iterations = it
        if target is not None and not stats.converged:
            raise DivergedMaxIts(f"{self.prefix or ''}{self.type}: no convergence in {self.max_it} "
                                 f"iterations (last residual {stats.residual_history[-1]:.3e}, "
                                 f"target {target:.3e})")

    def _solve_cg(self, b, x, stats):
        target = self._target(b)
        if x is None:
            x, r = np.zeros_like(b), b.copy()
        else:
            r = b - self._A(x)
        z = self.pc.apply(r)
        if target is not None and self._converged(self._monitor_norm(r, z), target, stats):
            return x
        p = z.copy()
        rz = self._dot(r, z)
        stats.converged = target is None
        it = 0
        while it < self.max_it:
            it += 1
            q = self._A(p)
            pq = self._dot(p, q)
            if not pq > 0:
                raise IndefiniteOperator(f"cg breakdown: p.Ap = {pq:.3e} at iteration {it}")
            alpha = rz / pq
            x = x + alpha * p
            r = r - alpha * q
            z = self.pc.apply(r)
            rz_new = self._dot(r, z)
            if rz_new < 0:
                raise IndefiniteOperator(f"cg breakdown: preconditioner not positive (r.z = {rz_new:.3e})")
            if target is not None and self._converged(self._monitor_norm(r, z), target, stats):
                stats.converged = True
                break
            p = z + (rz_new / rz) * p
            rz = rz_new
        self._finish(stats, target, it)
        return x

    def _solve_richardson(self, b, x, stats):
        target = self._target(b)
        if x is None:
            x, r = np.zeros_like(b), b.copy()
        else:
            r = b - self._A(x)
        stats.converged = target is None
        it = 0
        for it in range(1, self.max_it + 1):
            x = x + self.scale * self.pc.apply(r)
            r = b - self._A(x)
            if target is not None and self._converged(self._monitor_norm(r), target, stats):
                stats.converged = True
                break
        self._finish(stats, target, it)
        return x

    def _solve_chebyshev(self, b, x, stats):
        lmin, lmax = self.bounds
        theta, delta = 0.5 * (lmax + lmin), 0.5 * (lmax - lmin)
        target = self._target(b)
        if x is None:
            x, r = np.zeros_like(b), b.copy()
        else:
            r = b - self._A(x)
        stats.converged = target is None
        if self.max_it == 0:
            return x
        d = self.pc.apply(r) / theta
        rho = delta / theta
        it = 0
        for it in range(1, self.max_it + 1):
            x = x + d
            r = r - self._A(d)
            if target is not None and self._converged(self._monitor_norm(r), target, stats):
                stats.converged = True
                break
            if it == self.max_it:
                break
            z = self.pc.apply(r)
            if delta == 0.0:
                d = z / theta
                continue
            rho_new = 1.0 / (2.0 * theta / delta - rho)
            d = (rho_new * rho) * d + (2.0 * rho_new / delta) * z
            rho = rho_new
        self._finish(stats, target, it)
        return x

    def describe(self, indent=0):
        pad = " " * indent
        head = f"{pad}ksp: {self.type}"
        if self.type != "preonly":
            head += f" (max_it {self.max_it}, norm {self.norm_type}, test {self.test}"
            if self.bounds is not None:
                head += f", bounds [{self.bounds[0]:.4g}, {self.bounds[1]:.4g}]"
            head += ")"
        return head + "\n" + self.pc.describe(indent + 2)


# -- public API ------------------------------------------------------------

def build_solver(options, operators, comm, strict: bool = True) -> KSP:
    """Collective: build the solver tree for the finest operator of ``operators``.

    ``operators`` is an :class:`OperatorStack`, a single :class:`CsrMatrix`
    or a :class:`LevelOperator`.  With ``strict`` every option must be used.
    """
    opts = parse_options(options)
    if isinstance(operators, CsrMatrix):
        operators = OperatorStack([LevelOperator(operators)], hierarchy=False)
    elif isinstance(operators, LevelOperator):
        operators = OperatorStack([operators], hierarchy=False)
    ctx = _Ctx(comm, opts, operators)
    node = KSP(ctx, len(operators.levels) - 1, "", {})
    unused = opts.unused()
    if unused and strict:
        raise UnknownOption(f"options not used by the solver: {', '.join(unused)}")
    node.unused_options = unused
    return node


def solve(node: KSP, b, x0=None):
    """Collective. Returns ``(x, SolveStats)`` with ``x`` a :class:`RankVector`."""
    comm = node.comm
    before = comm.timer.snapshot()
    b_owned = b.owned if isinstance(b, RankVector) else np.asarray(b, dtype=float)
    x_owned = x0.owned if isinstance(x0, RankVector) else x0
    with comm.timer.stage("total_solve"):
        x, stats = node.solve(b_owned, x_owned)
    after = comm.timer.snapshot()
    stats.timings = {k: (v[0] - before.get(k, (0.0, 0))[0], v[1] - before.get(k, (0.0, 0))[1])
                     for k, v in after.items()}
    return RankVector(node.layout, comm.rank, x), stats
