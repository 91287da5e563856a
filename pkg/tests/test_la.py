"""Distributed sparse matrices, reproducible reductions and dense LU."""
import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from mgforge.errors import LayoutMismatch, SingularMatrix, StaleGhosts
from mgforge.la import (CsrMatrix, GhostPlan, Layout, RankVector, dense_lu_factor, dense_lu_solve, dot, dot_norm,
                        norm, spmv, write_triplets)
from mgforge.runtime import halo_exchange, spmd_run


def laplace_1d(n):
    return sp.diags([-np.ones(n - 1), 2 * np.ones(n), -np.ones(n - 1)], [-1, 0, 1], format="csr")


def distributed_product(A, x, R, block=1):
    layout = Layout.uniform(A.shape[0], R, block)

    def prog(comm):
        M = CsrMatrix.from_global(comm, A, layout, layout)
        v = M.create_vector(x[slice(*layout.range(comm.rank))].copy())
        halo_exchange(comm, v)
        return np.concatenate(comm.allgather(spmv(M, v).owned))

    return spmd_run(R, prog)[0]


def test_layout():
    L = Layout.uniform(10, 3)
    assert [L.range(r) for r in range(3)] == [(0, 4), (4, 7), (7, 10)]
    assert list(L.owner([0, 3, 4, 9])) == [0, 0, 1, 2]
    B = Layout.uniform(12, 2, block=4)
    assert [B.range(r) for r in range(2)] == [(0, 8), (8, 12)]
    assert list(B.block_starts(0)) == [0, 4]
    with pytest.raises(LayoutMismatch):
        Layout(10, [0, 5, 9])
    with pytest.raises(LayoutMismatch):
        Layout(8, [0, 3, 8], block=2)


@pytest.mark.parametrize("R", [1, 2, 4])
def test_spmv_identity_and_laplacian(R):
    x = np.arange(1.0, 8.0)
    np.testing.assert_array_equal(distributed_product(sp.identity(7, format="csr"), x, R), x)
    np.testing.assert_array_equal(distributed_product(laplace_1d(5), np.ones(5), min(R, 5)), [1, 0, 0, 0, 1])


def test_random_spmv_rank_invariant(rng):
    A = sp.random(50, 50, density=0.15, random_state=7, format="csr") + sp.identity(50)
    x = rng.standard_normal(50)
    y1 = distributed_product(A, x, 1)
    np.testing.assert_allclose(y1, A @ x, rtol=1e-13, atol=1e-13)
    for R in (2, 3, 4):
        np.testing.assert_array_equal(distributed_product(A, x, R), y1)


def test_stale_ghosts_and_layout_mismatch():
    layout = Layout.uniform(6, 2)

    def prog(comm):
        M = CsrMatrix.from_global(comm, laplace_1d(6), layout, layout)
        v = M.create_vector(np.ones(3))
        with pytest.raises(StaleGhosts):
            spmv(M, v)
        halo_exchange(comm, v)
        spmv(M, v)
        v.touch()
        with pytest.raises(StaleGhosts):
            spmv(M, v)
        other = RankVector(layout, comm.rank, np.ones(3))
        with pytest.raises(LayoutMismatch):
            spmv(M, other)
        with pytest.raises(LayoutMismatch):
            dot_norm(comm, other, RankVector(Layout.uniform(6, 2, block=3), comm.rank, np.ones(3)))
        return True

    assert all(spmd_run(2, prog))


def test_ghost_plan_positions():
    layout = Layout.uniform(9, 3)

    def prog(comm):
        lo, hi = layout.range(comm.rank)
        ghosts = [i for i in (lo - 1, hi) if 0 <= i < 9]
        plan = GhostPlan(comm, layout, ghosts)
        v = RankVector(layout, comm.rank, np.arange(lo, hi, dtype=float), plan)
        halo_exchange(comm, v)
        ext = v.ext()
        np.testing.assert_array_equal(ext[plan.to_ext(np.array(ghosts + list(range(lo, hi))))],
                                      np.array(ghosts + list(range(lo, hi)), dtype=float))
        with pytest.raises(LayoutMismatch):
            plan.to_ext([(hi + 3) % 9 if (hi + 3) % 9 not in ghosts and not lo <= (hi + 3) % 9 < hi else 99])
        return True

    assert all(spmd_run(3, prog))


def _global_dot(x, y, R, block):
    layout = Layout.uniform(len(x), R, block)

    def prog(comm):
        s = slice(*layout.range(comm.rank))
        return dot(comm, layout, x[s], y[s])

    vals = spmd_run(R, prog)
    assert len(set(vals)) == 1
    return vals[0]


def test_dot_oracles():
    e = np.zeros(57)
    e[13] = 1.0
    assert _global_dot(e, e, 4, 5) == 1.0
    assert _global_dot(np.ones(57), np.ones(57), 4, 5) == 57.0

    def prog(comm):
        layout = Layout.uniform(57, comm.size)
        return norm(comm, layout, np.full(layout.range(comm.rank)[1] - layout.range(comm.rank)[0], 2.0))

    assert spmd_run(3, prog)[0] == pytest.approx(2 * np.sqrt(57), rel=1e-15)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 40), st.integers(0, 2**31 - 1))
def test_dot_bitwise_rank_invariant(nblocks, seed):
    block = 7
    r = np.random.default_rng(seed)
    x = r.standard_normal(nblocks * block) * 10.0 ** r.integers(-8, 8, nblocks * block)
    y = r.standard_normal(nblocks * block)
    ref = _global_dot(x, y, 1, block)
    for R in (2, 3, 4):
        if R <= nblocks:
            assert _global_dot(x, y, R, block) == ref


def test_lu_two_by_two():
    f = dense_lu_factor([[4.0, 3.0], [6.0, 3.0]])
    np.testing.assert_allclose(dense_lu_solve(f, [10.0, 12.0]), [1.0, 2.0], rtol=1e-15)


def test_lu_laplacian_against_inverse():
    A = laplace_1d(12).toarray()
    f = dense_lu_factor(A)
    # closed-form inverse of the Dirichlet 1D Laplacian: min(i,j)(n+1-max(i,j))/(n+1)
    n = 12
    i, j = np.meshgrid(np.arange(1, n + 1), np.arange(1, n + 1), indexing="ij")
    inv = np.minimum(i, j) * (n + 1 - np.maximum(i, j)) / (n + 1)
    np.testing.assert_allclose(dense_lu_solve(f, np.eye(n)), inv, atol=1e-13)


def test_lu_factors_reconstruct(rng):
    A = rng.standard_normal((9, 9))
    f = dense_lu_factor(A)
    L, U = f.factors()
    np.testing.assert_allclose(A[f.permutation()], L @ U, atol=1e-13)
    assert np.allclose(np.diag(L), 1) and np.allclose(np.triu(L, 1), 0) and np.allclose(np.tril(U, -1), 0)


def test_lu_overwrite_keeps_input_semantics(rng):
    A = np.asfortranarray(rng.standard_normal((6, 6)))
    keep = A.copy()
    dense_lu_factor(A)
    np.testing.assert_array_equal(A, keep)


def test_singular_matrix():
    with pytest.raises(SingularMatrix):
        dense_lu_factor([[1.0, 2.0], [2.0, 4.0]])
    with pytest.raises(SingularMatrix):
        dense_lu_factor(np.zeros((3, 3)))


def test_write_triplets(tmp_path):
    layout = Layout.uniform(3, 2)

    def prog(comm):
        M = CsrMatrix.from_global(comm, laplace_1d(3), layout, layout)
        write_triplets(comm, M, tmp_path / "A.txt")

    spmd_run(2, prog)
    lines = (tmp_path / "A.txt").read_text().splitlines()
    assert lines[0] == "% 3 3 7"
    assert lines[1:3] == ["1 1 2.0", "1 2 -1.0"]
