"""Structured simplicial meshes of the unit square and cube.

Squares are cut along the (0,0)-(1,1) diagonal and cubes use the Kuhn
(Freudenthal) split into six tetrahedra, one per permutation of the axes.
Both triangulations are self-similar: the mesh at resolution ``2N`` is a
refinement of the mesh at ``N``.  Hierarchies are therefore produced by
regenerating each level and recovering the coarse/fine relations with index
arithmetic.

Numbering
---------
Vertex ``(i, j[, l])`` has id ``i + (N+1) j + (N+1)^2 l``.  Cell ids run over
grid cubes with x fastest and, within a cube, over axis permutations in
:func:`itertools.permutations` order.  The last axis is therefore the
slowest varying one, which is what :func:`partition_mesh` slices.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import RankCountExceedsSlabs, UnknownMarker


def _kuhn_templates(d):
    """Vertex offsets (in grid units) of every Kuhn simplex of a unit cube."""
    perms = list(itertools.permutations(range(d)))
    templates = []
    for perm in perms:
        verts = [np.zeros(d, dtype=np.int64)]
        for axis in perm:
            nxt = verts[-1].copy()
            nxt[axis] += 1
            verts.append(nxt)
        verts = np.array(verts)
        if np.linalg.det((verts[1:] - verts[0]).astype(float)) < 0:
            verts[[-2, -1]] = verts[[-1, -2]]
        templates.append(verts)
    return perms, np.array(templates)


@dataclass(eq=False)
class SimplexMesh:
    dim: int
    N: int
    vertices: np.ndarray            # (nv, d) float coordinates
    grid: np.ndarray                # (nv, d) integer grid coordinates
    cells: np.ndarray               # (nc, d+1) vertex ids
    facets: np.ndarray              # (nf, d) sorted vertex ids of boundary facets
    facet_markers: np.ndarray       # (nf,)
    tag: tuple = ()

    @property
    def num_cells(self):
        return len(self.cells)

    @property
    def num_vertices(self):
        return len(self.vertices)

    @property
    def markers(self):
        return tuple(range(1, 2 * self.dim + 1))

    def cell_coordinates(self, cells=None):
        idx = self.cells if cells is None else self.cells[cells]
        return self.vertices[idx]

    def cell_volumes(self):
        X = self.cell_coordinates()
        J = X[:, 1:, :] - X[:, :1, :]
        fact = 2.0 if self.dim == 2 else 6.0
        return np.linalg.det(J) / fact

    @property
    def cells_per_layer(self):
        return len(self.cells) // self.N

    def vertex_cells(self):
        """CSR incidence ``(offsets, cells)``; cells of every star sorted by id."""
        if not hasattr(self, "_vertex_cells"):
            flat = self.cells.ravel()
            order = np.argsort(flat, kind="stable")
            counts = np.bincount(flat, minlength=self.num_vertices)
            offsets = np.concatenate([[0], np.cumsum(counts)])
            self._vertex_cells = (offsets, order // (self.dim + 1))
        return self._vertex_cells


def unit_simplex_mesh(d: int, N: int) -> SimplexMesh:
    """Structured mesh of ``[0,1]^d`` with ``N`` grid cells per edge."""
    if d not in (2, 3):
        raise ValueError(f"dimension must be 2 or 3, got {d}")
    if N < 1:
        raise ValueError(f"resolution must be >= 1, got {N}")
    _, templates = _kuhn_templates(d)
    n1 = N + 1
    axes = np.meshgrid(*[np.arange(n1)] * d, indexing="ij")
    # x fastest
    grid = np.stack([a.transpose().ravel() for a in axes], axis=1) if d == 2 else \
        np.stack([a.transpose(2, 1, 0).ravel() for a in axes], axis=1)
    strides = n1 ** np.arange(d)

    cg = np.meshgrid(*[np.arange(N)] * d, indexing="ij")
    cubes = np.stack([a.transpose().ravel() for a in cg], axis=1) if d == 2 else \
        np.stack([a.transpose(2, 1, 0).ravel() for a in cg], axis=1)
    corner = cubes[:, None, None, :] + templates[None, :, :, :]
    cells = (corner @ strides).reshape(-1, d + 1)

    facets, markers = _boundary_facets(cells, grid, N, d)
    return SimplexMesh(d, N, grid / N, grid, cells, facets, markers, ("unit", d, N))


def _boundary_facets(cells, grid, N, d):
    out, marks = [], []
    for omit in range(d + 1):
        keep = [m for m in range(d + 1) if m != omit]
        fv = cells[:, keep]
        g = grid[fv]                                  # (nc, d, d)
        for axis in range(d):
            for side, value in ((0, 0), (1, N)):
                on = np.all(g[:, :, axis] == value, axis=1)
                if np.any(on):
                    out.append(np.sort(fv[on], axis=1))
                    marks.append(np.full(on.sum(), 2 * axis + side + 1))
    facets = np.concatenate(out)
    markers = np.concatenate(marks)
    order = np.lexsort(facets.T[::-1])
    return facets[order], markers[order]


def facets_with_markers(mesh: SimplexMesh, markers) -> np.ndarray:
    """Indices (into ``mesh.facets``) of facets carrying any of ``markers``."""
    markers = [int(m) for m in markers]
    bad = [m for m in markers if m not in mesh.markers]
    if bad:
        raise UnknownMarker(f"markers {bad} not in {mesh.markers}")
    return np.flatnonzero(np.isin(mesh.facet_markers, markers))


def write_mesh(mesh: SimplexMesh, path) -> None:
    """Human readable dump: vertices, cells, then boundary facets with markers."""
    with open(path, "w") as fh:
        fh.write(f"# mgforge mesh dim={mesh.dim} N={mesh.N}\n")
        fh.write(f"vertices: {mesh.num_vertices}\n")
        for x in mesh.vertices:
            fh.write(" ".join(repr(float(c)) for c in x) + "\n")
        fh.write(f"cells: {mesh.num_cells}\n")
        for c in mesh.cells:
            fh.write(" ".join(str(int(v)) for v in c) + "\n")
        fh.write(f"facets: {len(mesh.facets)}\n")
        for f, m in zip(mesh.facets, mesh.facet_markers):
            fh.write(" ".join(str(int(v)) for v in f) + f" {int(m)}\n")


# -- hierarchies -----------------------------------------------------------

@dataclass(eq=False)
class MeshHierarchy:
    levels: list
    children: list = field(default_factory=list)        # children[l]: (nc_l, 2^d) fine ids in level l+1
    parents: list = field(default_factory=list)         # parents[l]: (nc_{l+1},) coarse ids in level l
    vertex_embedding: list = field(default_factory=list)  # coarse vertex -> fine vertex

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, i):
        return self.levels[i]


def build_hierarchy(coarse: SimplexMesh, refinements: int) -> MeshHierarchy:
    if refinements < 0:
        raise ValueError("refinements must be >= 0")
    d, N = coarse.dim, coarse.N
    levels = [coarse] + [unit_simplex_mesh(d, N * 2 ** l) for l in range(1, refinements + 1)]
    H = MeshHierarchy(levels)
    perms, _ = _kuhn_templates(d)
    perm_index = {p: i for i, p in enumerate(perms)}
    nperm = len(perms)
    for lc in range(refinements):
        cm, fm = levels[lc], levels[lc + 1]
        # centroid in coarse grid units; strictly inside one coarse simplex
        cen = fm.grid[fm.cells].mean(axis=1) / 2.0
        cube = np.floor(cen).astype(np.int64)
        local = cen - cube
        order = np.argsort(-local, axis=1, kind="stable")
        pid = np.array([perm_index[tuple(o)] for o in order])
        cube_id = cube @ (cm.N ** np.arange(d))
        parent = cube_id * nperm + pid
        kids = np.argsort(parent, kind="stable").reshape(cm.num_cells, 2 ** d)
        H.parents.append(parent)
        H.children.append(kids)
        emb = (2 * cm.grid) @ ((fm.N + 1) ** np.arange(d))
        H.vertex_embedding.append(emb)
    return H


# -- partitioning ----------------------------------------------------------

@dataclass(eq=False)
class Partition:
    """Slab decomposition of the cells along the slowest grid axis."""

    nranks: int
    layer_starts: np.ndarray     # (R+1,) first grid layer of each rank
    cell_owner: np.ndarray       # (nc,)
    cell_ranges: list            # per rank [start, stop) of owned cell ids
    neighbors: list              # per rank, ranks sharing a slab interface

    def owned_cells(self, rank):
        a, b = self.cell_ranges[rank]
        return np.arange(a, b)

    def layer_owner(self, layer):
        """Owner of grid layer ``layer`` (clipped into ``[0, N)``)."""
        layer = np.clip(layer, 0, self.layer_starts[-1] - 1)
        return np.searchsorted(self.layer_starts, layer, side="right") - 1


def partition_mesh(mesh: SimplexMesh, R: int) -> Partition:
    if R < 1:
        raise ValueError("rank count must be >= 1")
    N = mesh.N
    if R > N:
        raise RankCountExceedsSlabs(f"{R} ranks but only {N} slabs at resolution {N}")
    q, rem = divmod(N, R)
    sizes = np.array([q + (1 if r < rem else 0) for r in range(R)])
    starts = np.concatenate([[0], np.cumsum(sizes)])
    per = mesh.cells_per_layer
    owner = np.repeat(np.arange(R), sizes * per)
    ranges = [(int(starts[r] * per), int(starts[r + 1] * per)) for r in range(R)]
    nbrs = [[q for q in (r - 1, r + 1) if 0 <= q < R] for r in range(R)]
    return Partition(R, starts, owner, ranges, nbrs)
