"""The Poisson benchmark: manufactured solution, multigrid solve, error norms."""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from ..assembly import apply_dirichlet, assemble, build_dofmap, cell_plan, dof_count
from ..errors import BadTelescopeFactor, InvalidValue
from ..fe import lagrange_element, simplex_quadrature, tabulate
from ..forms import (BcSpec, Constant, FormExpr, SpaceSpec, TestFunction, TrialFunction, dot, dx,
                     evaluate_pointwise, grad, manufactured_rhs, manufactured_solution)
from ..kernel import compile_form, geometry
from ..la import RankVector
from ..mesh import build_hierarchy, partition_mesh, unit_simplex_mesh
from ..runtime import halo_exchange, reduce_stage_times, spmd_run
from ..solver import build_solver, build_stack, build_transfer, read_options_file, solve
from ..solver.options import OptionTree, parse_options
from .parameters import native_fmg_options, native_telescope_options
from .report import TimingReport

_ERROR_CHUNK = 2048

CG_MG_OPTIONS = {
    "ksp_type": "cg",
    "ksp_rtol": 1e-10,
    "pc_type": "mg",
    "pc_mg_type": "multiplicative",
    "mg_levels_ksp_type": "chebyshev",
    "mg_levels_ksp_max_it": 2,
    "mg_levels_ksp_norm_type": "unpreconditioned",
    "mg_levels_ksp_convergence_test": "skip",
    "mg_levels_pc_type": "patch",
    "mg_levels_patch_pc_patch_construct_type": "star",
    "mg_levels_patch_pc_patch_construct_dim": 0,
    "mg_coarse_pc_type": "lu",
}


def dofs_per_rank(dim: int, N: int, degree: int, ranks: int) -> float:
    return dof_count(dim, N, degree) / float(ranks)


@dataclass
class BenchConfig:
    dim: int = 3
    size: int = 4                 # coarse resolution N
    refine: int = 2               # refinements L (hierarchy has L+1 levels)
    degree: int = 3
    a: float = 1.0
    b: float = 2.0
    ranks: int = 1
    telescope_factor: int | None = None
    options: object = None        # path, text or map; None selects FMG + patch smoothing
    csv: str | None = None
    reps: int = 1
    cg_reference: bool = False
    keep_solution: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.dim not in (2, 3):
            raise InvalidValue(f"dimension must be 2 or 3, got {self.dim}")
        if self.size < 1:
            raise InvalidValue(f"coarse resolution must be >= 1, got {self.size}")
        if self.refine < 0:
            raise InvalidValue(f"refinements must be >= 0, got {self.refine}")
        if not 1 <= self.degree <= 4:
            raise InvalidValue(f"degree must be in [1, 4], got {self.degree}")
        if self.ranks < 1:
            raise InvalidValue(f"rank count must be >= 1, got {self.ranks}")
        if self.reps < 1:
            raise InvalidValue(f"repetitions must be >= 1, got {self.reps}")
        if self.telescope_factor is not None:
            if self.telescope_factor < 1 or self.ranks % self.telescope_factor:
                raise BadTelescopeFactor(
                    f"telescope factor {self.telescope_factor} does not divide {self.ranks} ranks")

    @property
    def fine_size(self):
        return self.size * 2 ** self.refine

    @property
    def ndofs(self):
        return dof_count(self.dim, self.fine_size, self.degree)

    def solver_options(self) -> OptionTree:
        if self.options is None:
            opts = native_telescope_options(self.telescope_factor) if self.telescope_factor \
                else native_fmg_options()
            return parse_options(opts)
        if isinstance(self.options, (str, os.PathLike)) and os.path.isfile(self.options):
            return read_options_file(self.options)
        return parse_options(self.options)

    def describe(self):
        return {"dim": self.dim, "N": self.size, "L": self.refine, "k": self.degree, "ranks": self.ranks,
                "dofs": self.ndofs}


@dataclass
class Problem:
    config: BenchConfig
    hierarchy: object
    space: SpaceSpec
    dofmaps: list
    transfers: object
    a_ir: object
    L_ir: object
    exact: FormExpr
    bindings: dict


def prepare(config: BenchConfig) -> Problem:
    """Serial setup shared (read only) by all ranks."""
    d = config.dim
    H = build_hierarchy(unit_simplex_mesh(d, config.size), config.refine)
    space = SpaceSpec(config.degree, d)
    dms = [build_dofmap(m, space, [BcSpec(m.markers)], partition_mesh(m, config.ranks)) for m in H.levels]
    transfers = build_transfer(H, space, dms)
    u, v = TrialFunction(), TestFunction()
    a_ir = compile_form(dot(grad(u), grad(v)) * dx, space)
    f = manufactured_rhs(config.a, config.b, dim=d)
    L_ir = compile_form(f * v * dx, space)
    exact = manufactured_solution(config.a, config.b, dim=d)
    return Problem(config, H, space, dms, transfers, a_ir, L_ir, exact, {"a": config.a, "b": config.b})


@dataclass
class PoissonResult:
    l2_error: float
    max_error: float
    iterations: int
    report: TimingReport
    ndofs: int
    dofs_per_rank: float
    residual_history: list = field(default_factory=list)
    solution: np.ndarray | None = None
    cg_iterations: int | None = None
    cg_l2_error: float | None = None


# -- error norms -----------------------------------------------------------

def _owned(x):
    return x.owned if isinstance(x, RankVector) else np.asarray(x, dtype=float)


def l2_error(comm, x, exact, dofmap, bindings=None, quadrature_degree=None) -> float:
    """Collective ``||u_h - u||_L2`` with quadrature of degree ``2k + 2``.

    Per-cell integrals are summed per grid layer, and the layer sums are
    combined exactly, so the value does not depend on the rank count.
    """
    if not isinstance(exact, FormExpr):
        exact = Constant(float(exact))
    mesh, k, d = dofmap.mesh, dofmap.space.degree, dofmap.mesh.dim
    q = 2 * k + 2 if quadrature_degree is None else quadrature_degree
    elem = lagrange_element(d, k)
    rule = simplex_quadrature(d, q)
    phi = tabulate(elem, rule).values                     # (nq, nd)
    plan = cell_plan(comm, dofmap)
    vec = RankVector(dofmap.layout, comm.rank, _owned(x), plan)
    halo_exchange(comm, vec)
    ext = vec.ext()
    a, b = dofmap.partition.cell_ranges[comm.rank]
    per_cell = np.zeros(b - a)
    for s in range(a, b, _ERROR_CHUNK):
        cells = np.arange(s, min(s + _ERROR_CHUNK, b))
        U = ext[plan.to_ext(dofmap.cell_dofs[cells])]      # (nc, nd)
        X = mesh.vertices[mesh.cells[cells]]
        J, det, _ = geometry(X)
        uh = np.zeros((len(cells), len(rule)))
        for i in range(elem.ndofs):
            uh += U[:, i:i + 1] * phi[None, :, i]
        pts = np.repeat(X[:, None, 0, :], len(rule), axis=1)
        for i in range(d):
            pts = pts + J[:, None, :, i] * rule.points[None, :, i, None]
        ue = np.broadcast_to(evaluate_pointwise(exact, pts.reshape(-1, d), bindings),
                             (pts.shape[0] * pts.shape[1],)).reshape(uh.shape)
        err2 = (uh - ue) ** 2
        acc = np.zeros(len(cells))
        for j in range(len(rule)):
            acc += rule.weights[j] * err2[:, j]
        per_cell[cells - a] = acc * np.abs(det)
    per_layer = mesh.cells_per_layer
    starts = np.arange(0, b - a, per_layer)
    partial = np.add.reduceat(per_cell, starts) if len(starts) else np.zeros(0)
    return math.sqrt(math.fsum(np.concatenate(comm.allgather(partial))))


def max_node_error(comm, x, exact, dofmap, bindings=None) -> float:
    """Collective max over lattice nodes of ``|u_h - u|``."""
    lo, hi = dofmap.layout.range(comm.rank)
    vals = evaluate_pointwise(exact, dofmap.dof_coordinates(np.arange(lo, hi)), bindings)
    local = float(np.max(np.abs(_owned(x) - vals))) if hi > lo else 0.0
    return comm.allreduce(local, op="max")


# -- driver ----------------------------------------------------------------

def _stage_rows(times, problem: Problem, R: int) -> TimingReport:
    dms = problem.dofmaps
    fine = dms[-1].ndofs
    rep = TimingReport(meta=problem.config.describe())
    nlev = len(dms)

    def add(name, level, dofs):
        if name in times:
            t = times[name]
            rep.add(name, level, t["max"], t["calls"], dofs, R)

    add("assemble", -1, fine)
    add("matmult", -1, fine)
    for l in range(nlev - 1, 0, -1):
        add(f"mg_level_{l}_smooth", l, dms[l].ndofs)
    add("mg_coarse_solve", 0, dms[0].ndofs)
    add("total_solve", -1, fine)
    return rep


def _program(comm, problem: Problem, options: dict):
    cfg = problem.config
    dms = problem.dofmaps
    ops = []
    for dm in dms:
        A = assemble(comm, problem.a_ir, dm)
        A, _ = apply_dirichlet(A, None, dm)
        ops.append(A)
    b = assemble(comm, problem.L_ir, dms[-1], problem.bindings)
    _, b = apply_dirichlet(None, b, dms[-1])
    stack = build_stack(comm, ops, dms, problem.transfers)
    node = build_solver(options, stack, comm)
    x, stats = solve(node, b)
    l2 = l2_error(comm, x, problem.exact, dms[-1], problem.bindings)
    mx = max_node_error(comm, x, problem.exact, dms[-1], problem.bindings)
    times = reduce_stage_times(comm)
    out = {"l2": l2, "max": mx, "its": stats.iterations, "hist": stats.residual_history, "times": times}
    if cfg.cg_reference:
        ref = build_solver(CG_MG_OPTIONS, stack, comm)
        xr, sr = solve(ref, b)
        out["cg_its"] = sr.iterations
        out["cg_l2"] = l2_error(comm, xr, problem.exact, dms[-1], problem.bindings)
    if cfg.keep_solution:
        parts = comm.gather(x.owned)
        out["solution"] = np.concatenate(parts) if comm.rank == 0 else None
    return out


def run_poisson(config: BenchConfig, problem: Problem | None = None) -> PoissonResult:
    """Solve the benchmark on ``config.ranks`` ranks (all solver keys must be used)."""
    problem = problem or prepare(config)
    if problem.config is not config:
        problem = replace(problem, config=config)
    raw = config.solver_options().raw
    res = spmd_run(config.ranks, _program, problem, raw)[0]
    report = _stage_rows(res["times"], problem, config.ranks)
    return PoissonResult(res["l2"], res["max"], res["its"], report, config.ndofs,
                         config.ndofs / float(config.ranks), res["hist"], res.get("solution"),
                         res.get("cg_its"), res.get("cg_l2"))
