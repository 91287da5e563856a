"""Prolongation between nested Lagrange spaces by nodal interpolation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from ..fe import lagrange_element
from ..la import CsrMatrix

_PRUNE = 1e-12


@dataclass(eq=False)
class TransferOps:
    """``prolongations[l]`` maps level ``l`` to level ``l + 1`` (global, serial)."""

    prolongations: list

    def __len__(self):
        return len(self.prolongations)

    def restriction(self, level):
        return self.prolongations[level].T.tocsr()

    def for_solver(self, level, fine_dofmap, coarse_dofmap):
        """Copy of ``P`` with Dirichlet rows (fine) and columns (coarse) removed."""
        P = self.prolongations[level].tocoo()
        keep = ~(fine_dofmap.is_boundary[P.row] | coarse_dofmap.is_boundary[P.col])
        return sp.csr_matrix((P.data[keep], (P.row[keep], P.col[keep])), shape=P.shape)

    def distribute(self, comm, level, fine_dofmap, coarse_dofmap):
        """Collective: the rank's rows of ``P`` and of ``P^T`` (BC-consistent)."""
        P = self.for_solver(level, fine_dofmap, coarse_dofmap)
        Pd = CsrMatrix.from_global(comm, P, fine_dofmap.layout, coarse_dofmap.layout)
        Rd = CsrMatrix.from_global(comm, P.T.tocsr(), coarse_dofmap.layout, fine_dofmap.layout)
        return Pd, Rd


def prolongation(hierarchy, level, coarse_dofmap, fine_dofmap):
    """Interpolation matrix from ``hierarchy[level]`` to ``hierarchy[level + 1]``."""
    cm, fm = hierarchy[level], hierarchy[level + 1]
    d = cm.dim
    k = coarse_dofmap.space.degree
    elem = lagrange_element(d, k)
    parent = hierarchy.parents[level]

    fdofs, first = np.unique(fine_dofmap.cell_dofs.ravel(), return_index=True)
    nloc = fine_dofmap.cell_dofs.shape[1]
    fcell = first // nloc
    ccell = parent[fcell]
    # fine node position in coarse grid units (exact: multiples of 1/(2k))
    x = fine_dofmap.dof_lattice(fdofs) / (2.0 * k)
    V = cm.grid[cm.cells[ccell]].astype(float)          # (n, d+1, d)
    J = V[:, 1:, :] - V[:, :1, :]                        # rows: edge vectors
    xi = np.linalg.solve(np.transpose(J, (0, 2, 1)), (x - V[:, 0, :])[..., None])[..., 0]
    xi = np.round(xi * 2 * k) / (2 * k)
    W = elem.evaluate(xi)                                # (n, nloc)
    W[np.abs(W) < _PRUNE] = 0.0
    cols = coarse_dofmap.cell_dofs[ccell]
    rows = np.repeat(fdofs[:, None], nloc, axis=1)
    nz = W != 0.0
    return sp.csr_matrix((W[nz], (rows[nz], cols[nz])),
                         shape=(fine_dofmap.ndofs, coarse_dofmap.ndofs))


def build_transfer(hierarchy, space, dofmaps) -> TransferOps:
    """Prolongations for every adjacent level pair of ``hierarchy``."""
    if len(dofmaps) != len(hierarchy):
        raise ValueError("need one dof map per hierarchy level")
    if any(dm.space.degree != space.degree for dm in dofmaps):
        raise ValueError("dof maps must use the given space")
    return TransferOps([prolongation(hierarchy, l, dofmaps[l], dofmaps[l + 1])
                        for l in range(len(hierarchy) - 1)])
