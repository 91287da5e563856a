"""Additive Schwarz smoothing over vertex stars.

The patch of a vertex ``v`` holds the dofs interior to its star: in every
cell touching ``v``, the nodes whose barycentric index for ``v`` is
positive.  Dirichlet dofs are left out.  Each rank owns the patches of the
vertices whose dof it owns, so every patch is solved exactly once.

Patch corrections are summed per dof in ascending vertex-id order (ghost
contributions are shipped to the dof owner first), which keeps the result
independent of the rank count.
"""
from __future__ import annotations

import numpy as np

from ..errors import SingularPatch
from ..fe import lagrange_element
from ..la import GhostPlan


def _star_pairs(mesh, dofmap, vertices):
    """Patch membership as parallel arrays ``(vertex, dof)``, unique, sorted."""
    d, k = mesh.dim, dofmap.space.degree
    elem = lagrange_element(d, k)
    offsets, incident = mesh.vertex_cells()
    counts = offsets[vertices + 1] - offsets[vertices]
    vv = np.repeat(vertices, counts)
    cc = np.concatenate([incident[offsets[v]:offsets[v + 1]] for v in vertices]) if len(vertices) else \
        np.zeros(0, dtype=np.int64)
    local = np.argmax(mesh.cells[cc] == vv[:, None], axis=1)
    masks = [np.flatnonzero(elem.multi_indices[:, i] > 0) for i in range(d + 1)]
    m = len(masks[0])
    sel = np.stack(masks)                                 # (d+1, m)
    dofs = np.take_along_axis(dofmap.cell_dofs[cc], sel[local], axis=1)
    pv = np.repeat(vv, m)
    pd = dofs.ravel()
    keep = ~dofmap.is_boundary[pd]
    key = np.unique(pv[keep] * dofmap.ndofs + pd[keep])
    return key // dofmap.ndofs, key % dofmap.ndofs


def _batched_matvec(Mt, x):
    """``out[p] = M[p] @ x[p]`` with ``Mt[j] = M[:, :, j]`` stored contiguously.

    An explicit column loop keeps a fixed summation order whatever the batch
    size or memory layout.
    """
    out = Mt[0] * x[:, :1]
    for j in range(1, x.shape[1]):
        out += Mt[j] * x[:, j:j + 1]
    return out


class PatchSmoother:
    """Star-patch additive Schwarz preconditioner on one level (collective setup)."""

    def __init__(self, comm, A, dofmap):
        self.comm = comm
        self.A = A
        self.dofmap = dofmap
        mesh = dofmap.mesh
        layout = dofmap.layout
        lo, hi = layout.range(comm.rank)
        self.lo, self.hi = lo, hi
        k = dofmap.space.degree
        vdof = (mesh.grid * k) @ (dofmap.lattice ** np.arange(mesh.dim))
        mine = np.flatnonzero((vdof >= lo) & (vdof < hi))
        pv, pd = _star_pairs(mesh, dofmap, mine)

        # patches as runs of equal vertex ids
        if len(pv):
            starts = np.flatnonzero(np.concatenate([[True], pv[1:] != pv[:-1]]))
        else:
            starts = np.zeros(0, dtype=np.int64)
        sizes = np.diff(np.concatenate([starts, [len(pv)]]))
        self.num_patches = len(starts)
        self.max_size = int(sizes.max()) if len(sizes) else 0

        lookup = self._fetch_rows(pd)
        ghosts = np.unique(pd[(pd < lo) | (pd >= hi)])
        self.plan = GhostPlan(comm, layout, ghosts)

        self.groups = []
        contrib_dof, contrib_vert = [], []
        for s in np.unique(sizes):
            which = np.flatnonzero(sizes == s)
            idx = starts[which][:, None] + np.arange(s)[None, :]
            dofs = pd[idx]                                      # (np, s)
            Ap = lookup(dofs)
            try:
                inv = np.linalg.inv(Ap)
            except np.linalg.LinAlgError as exc:
                raise SingularPatch(f"singular patch matrix among {len(which)} patches of size {s}") from exc
            if not np.all(np.isfinite(inv)):
                raise SingularPatch(f"non-finite patch inverse (size {s})")
            inv = 0.5 * (inv + np.transpose(inv, (0, 2, 1)))
            self.groups.append((self.plan.to_ext(dofs), np.ascontiguousarray(np.transpose(inv, (2, 0, 1)))))
            contrib_dof.append(dofs.ravel())
            contrib_vert.append(np.repeat(pv[starts[which]], s))
        cdof = np.concatenate(contrib_dof) if contrib_dof else np.zeros(0, dtype=np.int64)
        cvert = np.concatenate(contrib_vert) if contrib_vert else np.zeros(0, dtype=np.int64)
        self._setup_accumulation(cdof, cvert)

    def _fetch_rows(self, patch_dofs):
        """Collective: sorted ``(row*n + col) -> value`` lookup over all patch rows."""
        comm, A, layout = self.comm, self.A, self.dofmap.layout
        n = layout.n
        G = A.global_rows()
        need = np.unique(patch_dofs[(patch_dofs < self.lo) | (patch_dofs >= self.hi)])
        owners = layout.owner(need)
        got = comm.alltoall({int(q): need[owners == q] for q in np.unique(owners)})
        replies = {}
        for src, req in enumerate(got):
            if req is not None:
                sub = G[req - self.lo].tocoo()
                replies[src] = (req[sub.row], sub.col.astype(np.int64), sub.data)
        back = comm.alltoall(replies)
        coo = G.tocoo()
        rows = [coo.row.astype(np.int64) + self.lo] + [b[0] for b in back if b is not None]
        cols = [coo.col.astype(np.int64)] + [b[1] for b in back if b is not None]
        vals = [coo.data] + [b[2] for b in back if b is not None]
        keys = np.concatenate(rows) * n + np.concatenate(cols)
        vals = np.concatenate(vals)
        order = np.argsort(keys, kind="stable")
        keys, vals = keys[order], vals[order]

        def lookup(dofs):
            q = dofs[:, :, None] * n + dofs[:, None, :]
            if len(keys) == 0:
                return np.zeros(q.shape)
            pos = np.minimum(np.searchsorted(keys, q), len(keys) - 1)
            return np.where(keys[pos] == q, vals[pos], 0.0)
        return lookup

    def _setup_accumulation(self, cdof, cvert):
        comm, layout = self.comm, self.dofmap.layout
        nv = self.dofmap.mesh.num_vertices
        own = (cdof >= self.lo) & (cdof < self.hi)
        owners = layout.owner(cdof[~own])
        self._own = np.flatnonzero(own)
        rest = np.flatnonzero(~own)
        self._send = {int(q): rest[owners == q] for q in np.unique(owners)}
        got = comm.alltoall({q: (cdof[i], cvert[i]) for q, i in self._send.items()})
        dofs = [cdof[self._own]] + [g[0] for g in got if g is not None]
        verts = [cvert[self._own]] + [g[1] for g in got if g is not None]
        dofs, verts = np.concatenate(dofs), np.concatenate(verts)
        key = (dofs - self.lo) * nv + verts
        self._perm = np.argsort(key, kind="stable")
        sd = dofs[self._perm]
        if len(sd):
            self._starts = np.flatnonzero(np.concatenate([[True], sd[1:] != sd[:-1]]))
            self._targets = sd[self._starts] - self.lo
        else:
            self._starts = np.zeros(0, dtype=np.int64)
            self._targets = np.zeros(0, dtype=np.int64)

    def apply(self, r_owned):
        from ..la import RankVector
        from ..runtime import halo_exchange

        r = RankVector(self.dofmap.layout, self.comm.rank, r_owned, self.plan)
        halo_exchange(self.comm, r)
        ext = r.ext()
        pieces = [_batched_matvec(inv, ext[pos]).ravel() for pos, inv in self.groups]
        vals = np.concatenate(pieces) if pieces else np.zeros(0)
        got = self.comm.alltoall({q: vals[i] for q, i in self._send.items()})
        allv = np.concatenate([vals[self._own]] + [g for g in got if g is not None])
        z = np.zeros(self.hi - self.lo)
        if len(self._starts):
            z[self._targets] = np.add.reduceat(allv[self._perm], self._starts)
        return z
