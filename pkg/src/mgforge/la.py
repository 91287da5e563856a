"""Distributed sparse and dense linear algebra with reproducible reductions.

Ownership
---------
A :class:`Layout` splits ``[0, n)`` into contiguous per-rank ranges.  It also
fixes a set of *reduction blocks*; rank boundaries always fall on block
boundaries, and global sums are formed from per-block partial sums in block
order.  The result of :func:`dot_norm` therefore depends on the data only,
never on the number of ranks.

Local storage
-------------
Each rank keeps its rows of a :class:`CsrMatrix` as a ``scipy.sparse`` CSR
block whose columns index the rank's *extended* vector: ghosts below the
owned range, the owned range, ghosts above it.  The map from global to
extended column index is monotone, so every row keeps its global column
order and row accumulation order is rank-count independent.
"""
from __future__ import annotations

import math
import threading
import warnings

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .errors import LayoutMismatch, SingularMatrix, StaleGhosts
from .runtime import halo_exchange

_LAPACK_LOCK = threading.Lock()


class Layout:
    def __init__(self, n, offsets, block=1):
        self.n = int(n)
        self.offsets = np.asarray(offsets, dtype=np.int64)
        self.block = int(block)
        if self.offsets[0] != 0 or self.offsets[-1] != self.n or np.any(np.diff(self.offsets) < 0):
            raise LayoutMismatch(f"bad ownership offsets {self.offsets} for size {n}")
        inner = self.offsets[1:-1]
        if self.block > 1 and np.any(inner % self.block):
            raise LayoutMismatch("rank boundaries must fall on reduction block boundaries")

    @classmethod
    def uniform(cls, n, nranks, block=1):
        nblocks = -(-n // block) if n else 0
        q, rem = divmod(nblocks, nranks)
        sizes = [q + (1 if r < rem else 0) for r in range(nranks)]
        offsets = np.minimum(np.concatenate([[0], np.cumsum(sizes)]) * block, n)
        return cls(n, offsets, block)

    @property
    def nranks(self):
        return len(self.offsets) - 1

    def range(self, rank):
        return int(self.offsets[rank]), int(self.offsets[rank + 1])

    def owner(self, idx):
        return np.searchsorted(self.offsets, idx, side="right") - 1

    def block_starts(self, rank):
        """Local offsets of reduction blocks inside the owned range."""
        a, b = self.range(rank)
        if b == a:
            return np.zeros(0, dtype=np.int64)
        return np.arange(0, b - a, self.block, dtype=np.int64)

    def __eq__(self, other):
        return (isinstance(other, Layout) and self.n == other.n and self.block == other.block
                and np.array_equal(self.offsets, other.offsets))

    def __hash__(self):
        return hash((self.n, self.block, tuple(self.offsets)))


class GhostPlan:
    """Which ghost entries a rank needs and who sends them (built collectively)."""

    def __init__(self, comm, layout: Layout, ghosts):
        start, stop = layout.range(comm.rank)
        ghosts = np.unique(np.asarray(ghosts, dtype=np.int64))
        if np.any((ghosts >= start) & (ghosts < stop)):
            raise LayoutMismatch("ghost indices must be owned by other ranks")
        self.layout = layout
        self.rank = comm.rank
        self.nranks = comm.size
        self.start, self.stop = start, stop
        self.n_owned = stop - start
        self.ghosts = ghosts
        self.n_lo = int(np.searchsorted(ghosts, start))
        owners = layout.owner(ghosts)
        requests = {}
        self.recv = {}
        for q in np.unique(owners):
            pos = np.flatnonzero(owners == q)
            requests[int(q)] = ghosts[pos]
            self.recv[int(q)] = pos
        incoming = comm.alltoall(requests)
        self.send = {src: req - start for src, req in enumerate(incoming) if req is not None}
        self.neighbors = sorted(set(self.send) | set(self.recv))

    def to_ext(self, gidx):
        """Extended-vector positions of global indices (owned or ghost)."""
        gidx = np.asarray(gidx, dtype=np.int64)
        out = np.empty(gidx.shape, dtype=np.int64)
        own = (gidx >= self.start) & (gidx < self.stop)
        out[own] = self.n_lo + gidx[own] - self.start
        g = gidx[~own]
        pos = np.searchsorted(self.ghosts, g)
        if np.any(pos >= len(self.ghosts)) or np.any(self.ghosts[np.minimum(pos, len(self.ghosts) - 1)] != g):
            raise LayoutMismatch("index is neither owned nor a ghost of this plan")
        out[~own] = np.where(pos < self.n_lo, pos, pos + self.n_owned)
        return out

    @property
    def n_ext(self):
        return self.n_owned + len(self.ghosts)


class RankVector:
    """The owned slice of a distributed vector plus (optional) ghost values."""

    def __init__(self, layout: Layout, rank: int, owned=None, plan: GhostPlan | None = None):
        a, b = layout.range(rank)
        self.layout = layout
        self.rank = rank
        self.owned = np.zeros(b - a) if owned is None else np.asarray(owned, dtype=float)
        if self.owned.shape != (b - a,):
            raise LayoutMismatch(f"owned slice has shape {self.owned.shape}, expected {(b - a,)}")
        self.plan = plan
        self.ghosts = np.zeros(len(plan.ghosts)) if plan is not None else np.zeros(0)
        self.fresh = plan is None or len(plan.ghosts) == 0

    @classmethod
    def from_global(cls, layout, rank, values, plan=None):
        a, b = layout.range(rank)
        return cls(layout, rank, np.array(values[a:b], dtype=float), plan)

    def ext(self):
        n = self.plan.n_lo
        return np.concatenate([self.ghosts[:n], self.owned, self.ghosts[n:]])

    def copy(self):
        v = RankVector(self.layout, self.rank, self.owned.copy(), self.plan)
        v.ghosts = self.ghosts.copy()
        v.fresh = self.fresh
        return v

    def touch(self):
        """Mark ghosts stale after the owned values changed."""
        self.fresh = False
        return self


class CsrMatrix:
    """Row block of a distributed sparse matrix."""

    def __init__(self, local: sp.csr_matrix, row_layout: Layout, col_layout: Layout,
                 plan: GhostPlan, rank: int):
        self.local = local
        self.row_layout = row_layout
        self.col_layout = col_layout
        self.plan = plan
        self.rank = rank
        self.shape = (row_layout.n, col_layout.n)

    @classmethod
    def from_rows(cls, comm, rows_global_cols: sp.spmatrix, row_layout: Layout, col_layout: Layout):
        """Collective. ``rows_global_cols`` holds this rank's rows, global columns."""
        A = sp.csr_matrix(rows_global_cols)
        A.sum_duplicates()
        A.sort_indices()
        a, b = col_layout.range(comm.rank)
        cols = A.indices.astype(np.int64)
        ghosts = np.unique(cols[(cols < a) | (cols >= b)])
        plan = GhostPlan(comm, col_layout, ghosts)
        ext_cols = plan.to_ext(cols)
        local = sp.csr_matrix((A.data.copy(), ext_cols, A.indptr.copy()),
                              shape=(A.shape[0], plan.n_ext))
        local.has_sorted_indices = True
        return cls(local, row_layout, col_layout, plan, comm.rank)

    @classmethod
    def from_global(cls, comm, A_global: sp.spmatrix, row_layout: Layout, col_layout: Layout):
        a, b = row_layout.range(comm.rank)
        return cls.from_rows(comm, sp.csr_matrix(A_global)[a:b], row_layout, col_layout)

    def global_rows(self) -> sp.csr_matrix:
        """This rank's rows with global column indices."""
        if not hasattr(self, "_global_rows"):
            p = self.plan
            ext2g = np.concatenate([p.ghosts[:p.n_lo], np.arange(p.start, p.stop), p.ghosts[p.n_lo:]])
            L = self.local
            self._global_rows = sp.csr_matrix((L.data, ext2g[L.indices], L.indptr),
                                              shape=(L.shape[0], self.shape[1]))
        return self._global_rows

    def create_vector(self, owned=None):
        return RankVector(self.col_layout, self.rank, owned, self.plan)

    def diagonal(self):
        a, _ = self.row_layout.range(self.rank)
        rows = np.arange(self.local.shape[0]) + a
        G = self.global_rows()
        return np.asarray(G[np.arange(len(rows)), rows]).ravel()

    def mult(self, comm, x_owned):
        """Owned rows of ``A x`` for a plain owned slice ``x_owned``."""
        with comm.timer.stage("matmult"):
            x = RankVector(self.col_layout, self.rank, x_owned, self.plan)
            halo_exchange(comm, x)
            return self.local @ x.ext()

    def to_global(self, comm) -> sp.csr_matrix:
        """Collective: the full matrix on every rank."""
        blocks = comm.allgather(self.global_rows())
        return sp.vstack(blocks, format="csr")

    @property
    def nnz(self):
        return self.local.nnz


def spmv(A: CsrMatrix, x: RankVector) -> RankVector:
    if x.plan is not A.plan:
        if x.plan is None or not np.array_equal(x.plan.ghosts, A.plan.ghosts):
            raise LayoutMismatch("vector ghost layout does not match the matrix columns")
    if not x.fresh:
        raise StaleGhosts("halo exchange required before spmv")
    y = A.local @ x.ext()
    return RankVector(A.row_layout, A.rank, y)


def dot_norm(comm, x: RankVector, y: RankVector | None = None) -> float:
    """Reproducible global inner product (``y`` defaults to ``x``)."""
    y = x if y is None else y
    if x.layout != y.layout:
        raise LayoutMismatch("inner product of vectors with different layouts")
    return dot(comm, x.layout, x.owned, y.owned)


def dot(comm, layout: Layout, x_owned, y_owned) -> float:
    prod = x_owned * y_owned
    starts = layout.block_starts(comm.rank)
    partial = np.add.reduceat(prod, starts) if len(starts) else np.zeros(0)
    allp = comm.allgather(partial)
    return math.fsum(np.concatenate(allp)) if allp else 0.0


def norm(comm, layout: Layout, x_owned) -> float:
    return math.sqrt(dot(comm, layout, x_owned, x_owned))


def write_triplets(comm, A: CsrMatrix, path) -> None:
    """Collective. Rank 0 writes ``row col value`` lines, 1-based."""
    G = A.to_global(comm).tocoo()
    if comm.rank == 0:
        with open(path, "w") as fh:
            fh.write(f"% {A.shape[0]} {A.shape[1]} {G.nnz}\n")
            order = np.lexsort((G.col, G.row))
            for r, c, v in zip(G.row[order], G.col[order], G.data[order]):
                fh.write(f"{r + 1} {c + 1} {float(v)!r}\n")


# -- dense LU --------------------------------------------------------------

class DenseFactor:
    def __init__(self, lu, piv, n):
        self.lu = lu
        self.piv = piv
        self.n = n

    def permutation(self):
        """Row permutation ``p`` with ``A[p] = L @ U``."""
        perm = np.arange(self.n)
        for i, j in enumerate(self.piv):
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def factors(self):
        L = np.tril(self.lu, -1) + np.eye(self.n)
        U = np.triu(self.lu)
        return L, U


def dense_lu_factor(A, pivot_tol=1e-13, overwrite=False) -> DenseFactor:
    """Partial-pivoting LU; with ``overwrite`` a Fortran-ordered float64 ``A`` is factored in place."""
    A = np.asarray(A, dtype=float) if overwrite else np.array(A, dtype=float)
    n = A.shape[0]
    if A.shape != (n, n):
        raise ValueError("LU needs a square matrix")
    if n == 0:
        return DenseFactor(np.zeros((0, 0)), np.zeros(0, dtype=np.int32), 0)
    scale = np.abs(A).max()
    with _LAPACK_LOCK, warnings.catch_warnings():
        # exact zero pivots are reported below as SingularMatrix
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu, piv = scipy.linalg.lu_factor(A, overwrite_a=True, check_finite=True)
    pivots = np.abs(np.diag(lu))
    if scale == 0 or pivots.min() <= pivot_tol * scale:
        raise SingularMatrix(f"zero pivot (min |u_ii| = {pivots.min():.3e}, scale {scale:.3e})")
    return DenseFactor(lu, piv, n)


def dense_lu_solve(factor: DenseFactor, rhs):
    rhs = np.asarray(rhs, dtype=float)
    if factor.n == 0:
        return rhs.copy()
    with _LAPACK_LOCK:
        return scipy.linalg.lu_solve((factor.lu, factor.piv), rhs)
