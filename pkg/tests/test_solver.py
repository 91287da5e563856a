"""Krylov methods, transfers, patch smoothing, multigrid and telescoping."""
import numpy as np
import pytest
import scipy.sparse as sp
from numpy.polynomial import chebyshev as C

from conftest import gather, mass_ir, stiffness_ir
from mgforge.assembly import apply_dirichlet, assemble, build_dofmap, interpolate
from mgforge.errors import (BadTelescopeFactor, CoarseProblemTooLarge, DivergedMaxIts, IndefiniteOperator,
                            InvalidValue, MissingHierarchy, SingularPatch, TeamAborted, UnknownOption)
from mgforge.forms import BcSpec, SpaceSpec, SpatialCoordinate, TestFunction, dx, manufactured_rhs
from mgforge.kernel import compile_form
from mgforge.la import CsrMatrix, Layout
from mgforge.mesh import build_hierarchy, partition_mesh, unit_simplex_mesh
from mgforge.runtime import spmd_run
from mgforge.solver import PatchSmoother, build_solver, build_stack, build_transfer, mg_cycle, solve


def cause(exc_info):
    return exc_info.value.__cause__


def matrix_program(A, body, R=1):
    A = sp.csr_matrix(np.asarray(A) if isinstance(A, list) else A)
    layout = Layout.uniform(A.shape[0], R)

    def prog(comm):
        M = CsrMatrix.from_global(comm, A, layout, layout)
        return body(comm, M, slice(*layout.range(comm.rank)))

    return spmd_run(R, prog)


# -- problem stacks --------------------------------------------------------

class Setup:
    def __init__(self, d, Nc, L, k, R=1, bc=True):
        self.H = build_hierarchy(unit_simplex_mesh(d, Nc), L)
        self.space = SpaceSpec(k, d)
        self.R = R
        self.bc = bc
        self.dms = [build_dofmap(m, self.space, [BcSpec(m.markers)] if bc else [], partition_mesh(m, R))
                    for m in self.H.levels]
        self.transfers = build_transfer(self.H, self.space, self.dms)
        self.a_ir = stiffness_ir(d, k)
        self.L_ir = compile_form(manufactured_rhs(1.0, 2.0, d) * TestFunction() * dx, self.space)

    def stack(self, comm):
        ops = [apply_dirichlet(assemble(comm, self.a_ir, dm), None, dm)[0] for dm in self.dms]
        b = apply_dirichlet(None, assemble(comm, self.L_ir, self.dms[-1]), self.dms[-1])[1]
        return build_stack(comm, ops, self.dms, self.transfers), b

    def run(self, body, R=None):
        return spmd_run(self.R if R is None else R, lambda comm: body(comm, *self.stack(comm)))


MG = {"ksp_type": "cg", "ksp_rtol": 1e-10, "pc_type": "mg", "mg_levels_ksp_type": "chebyshev",
      "mg_levels_ksp_max_it": 2, "mg_levels_pc_type": "patch"}


# -- Krylov oracles --------------------------------------------------------

def test_cg_two_by_two():
    def body(comm, M, s):
        x, st = solve(build_solver({"ksp_type": "cg", "ksp_rtol": 1e-14, "pc_type": "none"}, M, comm),
                      np.array([1.0, 2.0]))
        return x.owned, st.iterations

    x, its = matrix_program([[4.0, 1.0], [1.0, 3.0]], body)[0]
    np.testing.assert_allclose(x, [1 / 11, 7 / 11], rtol=1e-14)
    assert its <= 2


def test_cg_jacobi_matches_direct_and_is_rank_invariant():
    n = 40
    A = sp.diags([-np.ones(n - 1), np.linspace(2.5, 6, n), -np.ones(n - 1)], [-1, 0, 1]).tocsr()
    b = np.sin(np.arange(n))

    def body(comm, M, s):
        x, st = solve(build_solver({"ksp_type": "cg", "ksp_rtol": 1e-12, "pc_type": "jacobi"}, M, comm), b[s])
        return gather(comm, x.owned), st.iterations

    ref = matrix_program(A, body, 1)[0]
    np.testing.assert_allclose(ref[0], sp.linalg.spsolve(A.tocsc(), b), rtol=1e-10)
    for R in (2, 4):
        out = matrix_program(A, body, R)[0]
        np.testing.assert_array_equal(out[0], ref[0])
        assert out[1] == ref[1]


def test_chebyshev_degenerate_interval_is_one_step():
    def body(comm, M, s):
        node = build_solver({"ksp_type": "chebyshev", "ksp_max_it": 1, "pc_type": "none"}, M, comm)
        node.set_bounds(2.0, 2.0)
        return solve(node, np.array([1.0, 4.0, -2.0]))[0].owned

    np.testing.assert_allclose(matrix_program(2 * np.eye(3), body)[0], [0.5, 2.0, -1.0], rtol=1e-15)


@pytest.mark.parametrize("m", [1, 2, 3, 5])
def test_chebyshev_polynomial_oracle(m):
    lam = np.array([1.0, 2.0, 3.0, 4.0])
    b = np.array([1.0, -1.0, 2.0, 0.5])

    def body(comm, M, s):
        node = build_solver({"ksp_type": "chebyshev", "ksp_max_it": m, "ksp_norm_type": "none",
                             "pc_type": "none"}, M, comm)
        node.set_bounds(1.0, 4.0)
        return solve(node, b)[0].owned

    x = matrix_program(np.diag(lam), body)[0]
    theta, delta = 2.5, 1.5
    Tm = C.Chebyshev.basis(m)
    resid_poly = Tm((theta - lam) / delta) / Tm(theta / delta)     # residual polynomial, p(0) = 1
    np.testing.assert_allclose(x, (1 - resid_poly) * b / lam, rtol=1e-13, atol=1e-15)


def test_chebyshev_bounds_estimate():
    lam = np.linspace(1, 10, 30)

    def body(comm, M, s):
        node = build_solver({"ksp_type": "chebyshev", "pc_type": "none", "chebyshev_esteig_steps": 200}, M, comm)
        return node.lambda_max, node.bounds

    lmax, (lo, hi) = matrix_program(np.diag(lam), body)[0]
    assert lmax == pytest.approx(10, rel=1e-3)
    assert lo == pytest.approx(0.1 * lmax) and hi == pytest.approx(1.1 * lmax)
    with pytest.raises(TeamAborted) as info:
        matrix_program(np.diag(lam), lambda comm, M, s: build_solver(
            {"ksp_type": "chebyshev", "chebyshev_esteig_min_factor": 2.0}, M, comm))
    assert isinstance(cause(info), InvalidValue)


def test_indefinite_operator_detected():
    def body(comm, M, s):
        return solve(build_solver({"ksp_type": "cg", "pc_type": "none"}, M, comm), np.array([1.0, 1.0]))

    with pytest.raises(TeamAborted) as info:
        matrix_program(np.diag([1.0, -1.0]), body)
    assert isinstance(cause(info), IndefiniteOperator)


def test_diverged_max_its():
    n = 100
    A = sp.diags([-np.ones(n - 1), 2 * np.ones(n), -np.ones(n - 1)], [-1, 0, 1]).tocsr()

    def body(comm, M, s):
        return solve(build_solver({"ksp_type": "cg", "ksp_max_it": 3, "pc_type": "jacobi"}, M, comm), np.ones(n))

    with pytest.raises(TeamAborted) as info:
        matrix_program(A, body)
    assert isinstance(cause(info), DivergedMaxIts)


def test_richardson_converges_with_lu():
    A = np.array([[3.0, 1.0], [1.0, 2.0]])

    def body(comm, M, s):
        x, st = solve(build_solver({"ksp_type": "richardson", "ksp_rtol": 1e-12, "pc_type": "lu"}, M, comm),
                      np.array([1.0, 1.0]))
        return x.owned, st.iterations

    x, its = matrix_program(A, body)[0]
    np.testing.assert_allclose(x, np.linalg.solve(A, [1.0, 1.0]), rtol=1e-14)
    assert its == 1


def test_strict_options_and_unknown_keys():
    def body(comm, M, s):
        with pytest.raises(UnknownOption):
            build_solver({"ksp_type": "cg", "pc_type": "jacobi", "pc_mg_type": "full"}, M, comm)
        node = build_solver({"ksp_type": "cg", "pc_type": "jacobi", "pc_mg_type": "full"}, M, comm, strict=False)
        return node.unused_options

    assert matrix_program(np.eye(2), body)[0] == ["pc_mg_type"]


def test_missing_hierarchy():
    with pytest.raises(TeamAborted) as info:
        matrix_program(np.eye(3), lambda comm, M, s: build_solver({"pc_type": "mg"}, M, comm))
    assert isinstance(cause(info), MissingHierarchy)


# -- transfers -------------------------------------------------------------

@pytest.mark.parametrize("d,Nc,k", [(3, 2, 2), (2, 2, 3), (2, 1, 1)])
def test_galerkin_identity(d, Nc, k):
    S = Setup(d, Nc, 1, k, bc=False)

    def body(comm):
        return [assemble(comm, S.a_ir, dm).to_global(comm) for dm in S.dms]

    Ac, Af = spmd_run(1, body)[0]
    P = S.transfers.prolongations[0]
    diff = abs(Ac - (P.T @ Af @ P)).max()
    assert diff <= 1e-11 * abs(Ac).max()


@pytest.mark.parametrize("d,k", [(2, 1), (2, 4), (3, 2), (3, 3)])
def test_prolongation_reproduces_polynomials(d, k):
    S = Setup(d, 1, 2, k, bc=False)
    X = SpatialCoordinate(d)
    p = (1 + X[0]) ** k - 2 * X[d - 1] * X[0] ** (k - 1) + 0.5
    for l, P in enumerate(S.transfers.prolongations):
        coarse = interpolate(p, S.dms[l], 0)
        fine = interpolate(p, S.dms[l + 1], 0)
        np.testing.assert_allclose(P @ coarse, fine, atol=1e-13)
        np.testing.assert_allclose(P @ np.ones(P.shape[1]), 1.0, atol=1e-14)


def test_restriction_is_transpose_and_bc_consistent():
    S = Setup(3, 2, 1, 2)
    T = S.transfers
    assert abs(T.restriction(0) - T.prolongations[0].T).max() == 0
    Ps = T.for_solver(0, S.dms[1], S.dms[0])
    assert Ps[S.dms[1].boundary].nnz == 0 and Ps[:, S.dms[0].boundary].nnz == 0


# -- patch smoother --------------------------------------------------------

def _patch_apply(S, vectors, R):
    def body(comm, stack, b):
        sm = PatchSmoother(comm, stack.fine.A, S.dms[-1])
        lo, hi = S.dms[-1].layout.range(comm.rank)
        return [gather(comm, sm.apply(v[lo:hi])) for v in vectors], stack.fine.A.to_global(comm)

    return S.run(body, R)[0]


def test_patch_is_symmetric(rng):
    S = Setup(3, 2, 0, 2)
    n = S.dms[-1].ndofs
    r, s = rng.standard_normal((2, n))
    (Pr, Ps), _ = _patch_apply(S, [r, s], 1)
    assert abs(Pr @ s - r @ Ps) <= 1e-12 * abs(Pr @ s)


def test_patch_is_rank_invariant(rng):
    S = Setup(3, 4, 0, 2)
    r = rng.standard_normal(S.dms[-1].ndofs)
    ref = _patch_apply(S, [r], 1)[0][0]
    for R in (2, 4):
        S.R = R
        S.dms = [build_dofmap(m, S.space, [BcSpec(m.markers)], partition_mesh(m, R)) for m in S.H.levels]
        np.testing.assert_array_equal(_patch_apply(S, [r], R)[0][0], ref)


def test_p1_patches_are_disjoint_so_patch_equals_jacobi(rng):
    S = Setup(2, 4, 0, 1)
    r = rng.standard_normal(S.dms[-1].ndofs)
    (z,), A = _patch_apply(S, [r], 1)
    inner = ~S.dms[-1].is_boundary
    np.testing.assert_allclose(z[inner], r[inner] / A.diagonal()[inner], rtol=1e-14)
    np.testing.assert_array_equal(z[~inner], 0.0)


def test_patch_matches_dense_additive_schwarz(rng):
    S = Setup(2, 2, 0, 2)
    dm = S.dms[-1]
    r = rng.standard_normal(dm.ndofs)
    (z,), A = _patch_apply(S, [r], 1)
    A = A.toarray()
    mesh = dm.mesh
    from mgforge.fe import lagrange_element
    alpha = lagrange_element(2, 2).multi_indices
    expect = np.zeros(dm.ndofs)
    for v in range(mesh.num_vertices):
        dofs = set()
        for c in np.flatnonzero((mesh.cells == v).any(axis=1)):
            i = list(mesh.cells[c]).index(v)
            dofs |= {int(q) for q, a in zip(dm.cell_dofs[c], alpha[:, i]) if a > 0 and not dm.is_boundary[q]}
        idx = sorted(dofs)
        if idx:
            expect[idx] += np.linalg.solve(A[np.ix_(idx, idx)], r[idx])
    np.testing.assert_allclose(z, expect, rtol=1e-12, atol=1e-12)


def test_single_cell_patches_are_empty():
    S = Setup(3, 1, 0, 1)
    (z,), _ = _patch_apply(S, [np.ones(8)], 1)
    np.testing.assert_array_equal(z, 0.0)


def test_singular_patch():
    mesh = unit_simplex_mesh(2, 2)
    dm = build_dofmap(mesh, SpaceSpec(1, 2), [], partition_mesh(mesh, 1))

    def prog(comm):
        Z = CsrMatrix.from_global(comm, sp.csr_matrix((dm.ndofs, dm.ndofs)), dm.layout, dm.layout)
        PatchSmoother(comm, Z, dm)

    with pytest.raises(TeamAborted) as info:
        spmd_run(1, prog)
    assert isinstance(cause(info), SingularPatch)


def test_chebyshev_patch_smoother_reduces_energy_error(rng):
    S = Setup(3, 2, 1, 2)
    e0 = rng.standard_normal(S.dms[-1].ndofs)
    e0[S.dms[-1].is_boundary] = 0.0

    def body(comm, stack, b):
        node = build_solver({"ksp_type": "chebyshev", "ksp_max_it": 2, "ksp_norm_type": "none",
                             "pc_type": "patch"}, stack.fine, comm)
        A = stack.fine.A.to_global(comm)
        # smoothing A x = 0 from x0 = e0 leaves the propagated error in x
        x, _ = solve(node, np.zeros(len(e0)), e0.copy())
        return float(e0 @ (A @ e0)), float(x.owned @ (A @ x.owned))

    before, after = S.run(body)[0]
    assert after < 0.5 * before


# -- multigrid -------------------------------------------------------------

def test_single_level_mg_is_the_coarse_solve():
    S = Setup(2, 4, 0, 2)

    def body(comm, stack, b):
        x1, st = solve(build_solver({"ksp_type": "preonly", "pc_type": "mg", "mg_levels_ksp_max_it": 3}, stack, comm),
                       b)
        x2, _ = solve(build_solver({"ksp_type": "preonly", "pc_type": "lu"}, stack, comm), b)
        return x1.owned, x2.owned

    x1, x2 = S.run(body)[0]
    np.testing.assert_array_equal(x1, x2)


def test_mg_cg_converges_and_is_rank_invariant():
    S = Setup(3, 4, 1, 2, R=1)

    def body(comm, stack, b):
        x, st = solve(build_solver(MG, stack, comm), b)
        return gather(comm, x.owned), st.iterations, st.timings

    x1, its, timings = S.run(body)[0]
    assert its <= 12
    assert {"mg_level_1_smooth", "mg_coarse_solve", "matmult", "total_solve"} <= set(timings)
    for R in (2, 4):
        S2 = Setup(3, 4, 1, 2, R=R)
        x, its2, _ = S2.run(body)[0]
        np.testing.assert_array_equal(x, x1)
        assert its2 == its


def test_vcycle_reduces_residual_and_fmg_beats_vcycle():
    S = Setup(2, 2, 2, 2)

    def body(comm, stack, b):
        node = build_solver(dict(MG, ksp_type="preonly"), stack, comm)
        A = stack.fine.A
        r0 = float(np.linalg.norm(b.owned))
        x = mg_cycle(node, 2, b.owned)
        r1 = float(np.linalg.norm(b.owned - A.mult(comm, x)))
        fmg = build_solver(dict(MG, ksp_type="preonly", pc_mg_type="full"), stack, comm)
        xf, _ = solve(fmg, b)
        rf = float(np.linalg.norm(b.owned - A.mult(comm, xf.owned)))
        return r0, r1, rf

    r0, r1, rf = S.run(body)[0]
    assert r1 < 0.5 * r0 and rf < r1


def test_zero_rhs_gives_zero_solution():
    S = Setup(2, 2, 1, 1)

    def body(comm, stack, b):
        x, st = solve(build_solver(MG, stack, comm), np.zeros_like(b.owned))
        return x.owned, st.iterations

    x, its = S.run(body)[0]
    assert its == 0 and not np.any(x)


def test_coarse_problem_too_large():
    S = Setup(2, 4, 1, 1)

    def body(comm, stack, b):
        build_solver(dict(MG, mg_coarse_pc_lu_max_dofs=10), stack, comm)

    with pytest.raises(TeamAborted) as info:
        S.run(body)
    assert isinstance(cause(info), CoarseProblemTooLarge)


def test_solver_tree_description():
    S = Setup(2, 2, 1, 1)
    text = S.run(lambda comm, stack, b: build_solver(MG, stack, comm).describe())[0]
    assert "pc: mg (multiplicative, 2 levels)" in text and "pc: patch" in text and "pc: lu" in text


# -- telescoping -----------------------------------------------------------

def _telescope(S, factor):
    def body(comm, stack, b):
        opts = dict(MG, mg_coarse_pc_type="telescope", mg_coarse_pc_telescope_reduction_factor=factor,
                    mg_coarse_telescope_pc_type="lu")
        x, st = solve(build_solver(opts, stack, comm), b)
        return gather(comm, x.owned)

    return S.run(body)[0]


def test_telescope_factors_agree_bitwise():
    S = Setup(3, 4, 1, 1, R=4)
    ref = _telescope(S, 1)
    for f in (2, 4):
        np.testing.assert_array_equal(_telescope(S, f), ref)
    with pytest.raises(TeamAborted) as info:
        _telescope(S, 3)
    assert isinstance(cause(info), BadTelescopeFactor)
