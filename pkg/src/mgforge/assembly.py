"""Global numbering, parallel assembly and Dirichlet conditions.

Degrees of freedom are the points of the lattice ``{0, ..., kN}^d`` with
global id ``i + M j + M^2 l`` (``M = kN + 1``).  A cell's local node with
barycentric multi-index ``alpha`` lands on the lattice point
``sum_i alpha_i V_i`` where ``V_i`` are the integer grid coordinates of the
cell vertices, so shared nodes get identical ids without any search.

Lattice planes normal to the last axis are owned by the rank owning the
grid layer above them (the top plane goes to the last rank), which makes
every rank's dofs one contiguous id range.  Reduction blocks are lattice
planes.

Assembly is bitwise reproducible for any rank count: every contribution is
tagged with its cell id, off-rank contributions are shipped to the row
owner, and each matrix entry is summed over its contributions in ascending
cell order.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import UnknownMarker
from .fe import lagrange_element
from .forms import BcSpec, SpaceSpec
from .kernel import execute_kernel
from .la import CsrMatrix, GhostPlan, Layout, RankVector
from .mesh import Partition, SimplexMesh

_CHUNK = 4096


@dataclass(eq=False)
class DofMap:
    mesh: SimplexMesh
    space: SpaceSpec
    partition: Partition
    cell_dofs: np.ndarray        # (nc, ndof_cell) global ids, element node order
    ndofs: int
    lattice: int                 # points per axis, kN + 1
    layout: Layout
    boundary: np.ndarray         # sorted global ids carrying a Dirichlet condition
    is_boundary: np.ndarray      # (ndofs,) bool
    bc_value: float = 0.0

    @property
    def nranks(self):
        return self.layout.nranks

    def owned_range(self, rank):
        return self.layout.range(rank)

    def dof_lattice(self, idx=None):
        idx = np.arange(self.ndofs) if idx is None else np.asarray(idx)
        M, d = self.lattice, self.mesh.dim
        return np.stack([(idx // M ** a) % M for a in range(d)], axis=1)

    def dof_coordinates(self, idx=None):
        return self.dof_lattice(idx) / (self.lattice - 1)

    def cell_ghosts(self, rank):
        """Dofs touched by the rank's cells but owned elsewhere."""
        a, b = self.partition.cell_ranges[rank]
        touched = np.unique(self.cell_dofs[a:b])
        lo, hi = self.layout.range(rank)
        return touched[(touched < lo) | (touched >= hi)]


def dof_count(dim: int, N: int, degree: int) -> int:
    """Global CG dof count on the structured unit mesh of resolution N."""
    return (degree * N + 1) ** dim


def build_dofmap(mesh: SimplexMesh, space: SpaceSpec, bcs=(), partition: Partition | None = None) -> DofMap:
    from .mesh import partition_mesh

    if space.dim != mesh.dim:
        raise ValueError("space and mesh dimensions differ")
    partition = partition or partition_mesh(mesh, 1)
    d, k, N = mesh.dim, space.degree, mesh.N
    M = k * N + 1
    elem = lagrange_element(d, k)
    strides = M ** np.arange(d, dtype=np.int64)
    V = mesh.grid[mesh.cells]                                  # (nc, d+1, d)
    node_lattice = np.einsum("ni,cid->cnd", elem.multi_indices, V)
    cell_dofs = node_lattice @ strides
    ndofs = M ** d

    plane = M ** (d - 1)
    starts = partition.layer_starts * k
    starts[-1] = M
    layout = Layout(ndofs, starts * plane, block=plane)

    is_bnd = np.zeros(ndofs, dtype=bool)
    value = 0.0
    lat = None
    for bc in (bcs if isinstance(bcs, (list, tuple)) else [bcs]):
        if not isinstance(bc, BcSpec):
            raise TypeError("boundary conditions must be BcSpec instances")
        bad = [m for m in bc.markers if m not in mesh.markers]
        if bad:
            raise UnknownMarker(f"markers {bad} not in {mesh.markers}")
        if lat is None:
            lat = np.stack([(np.arange(ndofs) // M ** a) % M for a in range(d)], axis=1)
        for m in bc.markers:
            axis, side = divmod(m - 1, 2)
            is_bnd |= lat[:, axis] == (0 if side == 0 else M - 1)
        value = float(bc.value)
    return DofMap(mesh, space, partition, cell_dofs, ndofs, M, layout,
                  np.flatnonzero(is_bnd), is_bnd, value)


def element_tensors(ir, mesh: SimplexMesh, cells, constants=None):
    """Element tensors of ``cells`` computed in fixed-size batches."""
    out = []
    for s in range(0, len(cells), _CHUNK):
        chunk = cells[s:s + _CHUNK]
        out.append(execute_kernel(ir, mesh.vertices[mesh.cells[chunk]], constants))
    if not out:
        n = ir.ndofs
        return np.zeros((0, n, n) if ir.rank == 2 else (0, n))
    return np.concatenate(out)


def _ordered_sum(keys, vals):
    """Sum ``vals`` grouped by equal ``keys`` after sorting by key (stable)."""
    if len(keys) == 0:
        return keys, vals
    order = np.argsort(keys, kind="stable")
    keys, vals = keys[order], vals[order]
    starts = np.flatnonzero(np.concatenate([[True], keys[1:] != keys[:-1]]))
    return keys[starts], np.add.reduceat(vals, starts)


def assemble(comm, ir, dofmap: DofMap, constants=None):
    """Collective. Returns a :class:`CsrMatrix` (rank 2) or :class:`RankVector` (rank 1)."""
    with comm.timer.stage("assemble"):
        return _assemble(comm, ir, dofmap, constants)


def _assemble(comm, ir, dofmap, constants):
    mesh, layout = dofmap.mesh, dofmap.layout
    a, b = dofmap.partition.cell_ranges[comm.rank]
    cells = np.arange(a, b)
    T = element_tensors(ir, mesh, cells, constants)
    cd = dofmap.cell_dofs[cells]
    n = cd.shape[1]
    lo, hi = layout.range(comm.rank)
    ncell_total = mesh.num_cells

    if ir.rank == 2:
        rows = np.repeat(cd, n, axis=1).ravel()
        cols = np.tile(cd, (1, n)).ravel()
    else:
        rows = cd.ravel()
        cols = np.zeros_like(rows)
    cid = np.repeat(cells, n * n if ir.rank == 2 else n)
    vals = T.ravel()

    own = (rows >= lo) & (rows < hi)
    owners = layout.owner(rows[~own])
    outgoing = {}
    for q in np.unique(owners):
        sel = np.flatnonzero(~own)[owners == q]
        outgoing[int(q)] = (rows[sel], cols[sel], cid[sel], vals[sel])
    got = comm.alltoall(outgoing)
    parts = [(rows[own], cols[own], cid[own], vals[own])] + [g for g in got if g is not None]
    R = np.concatenate([p[0] for p in parts])
    C = np.concatenate([p[1] for p in parts])
    X = np.concatenate([p[2] for p in parts])
    V = np.concatenate([p[3] for p in parts])

    nloc = hi - lo
    ncols = dofmap.ndofs if ir.rank == 2 else 1
    if nloc * ncols * ncell_total < 2 ** 62:
        key = ((R - lo) * ncols + C) * ncell_total + X
        order = np.argsort(key, kind="stable")
    else:
        order = np.lexsort((X, C, R))
    R, C, V = R[order], C[order], V[order]
    if len(R):
        new = np.concatenate([[True], (R[1:] != R[:-1]) | (C[1:] != C[:-1])])
        starts = np.flatnonzero(new)
        R, C, V = R[starts], C[starts], np.add.reduceat(V, starts)

    if ir.rank == 1:
        out = np.zeros(nloc)
        out[R - lo] = V
        return RankVector(layout, comm.rank, out)
    indptr = np.concatenate([[0], np.cumsum(np.bincount(R - lo, minlength=nloc))])
    rows_csr = sp.csr_matrix((V, C, indptr), shape=(nloc, dofmap.ndofs))
    rows_csr.has_sorted_indices = True
    return CsrMatrix.from_rows(comm, rows_csr, layout, layout)


def apply_dirichlet(A: CsrMatrix | None, b, dofmap: DofMap):
    """Symmetric elimination of the Dirichlet dofs.

    Boundary rows and columns of ``A`` are zeroed and given a unit diagonal;
    the (constant) boundary value is lifted into ``b`` and written at the
    boundary dofs.  Either argument may be ``None``.
    """
    rank = A.rank if A is not None else b.rank
    lo, hi = dofmap.layout.range(rank)
    row_bnd = dofmap.is_boundary[lo:hi]
    g = dofmap.bc_value
    newA = None
    lift = None
    if A is not None:
        G = A.global_rows()
        cols = G.indices
        rows = np.repeat(np.arange(G.shape[0]), np.diff(G.indptr))
        col_bnd = dofmap.is_boundary[cols]
        if g != 0.0:
            lift = np.bincount(rows, weights=np.where(col_bnd, G.data, 0.0), minlength=G.shape[0]) * g
        data = A.local.data.copy()
        data[col_bnd | row_bnd[rows]] = 0.0
        diag = row_bnd[rows] & (cols == rows + lo)
        data[diag] = 1.0
        local = sp.csr_matrix((data, A.local.indices, A.local.indptr), shape=A.local.shape)
        local.has_sorted_indices = True
        newA = CsrMatrix(local, A.row_layout, A.col_layout, A.plan, A.rank)
    newb = None
    if b is not None:
        vals = b.owned.copy()
        if lift is not None:
            vals = vals - lift
        vals[row_bnd] = g
        newb = RankVector(b.layout, b.rank, vals)
    return newA, newb


def cell_plan(comm, dofmap: DofMap) -> GhostPlan:
    """Collective ghost plan covering every dof of the rank's own cells."""
    return GhostPlan(comm, dofmap.layout, dofmap.cell_ghosts(comm.rank))


def interpolate(expr, dofmap: DofMap, rank: int, bindings=None) -> np.ndarray:
    """Owned slice of the nodal interpolant of a rank-0 expression."""
    from .forms import evaluate_pointwise

    lo, hi = dofmap.layout.range(rank)
    return evaluate_pointwise(expr, dofmap.dof_coordinates(np.arange(lo, hi)), bindings)
