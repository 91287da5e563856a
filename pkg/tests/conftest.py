"""Shared helpers for the test suite."""
import numpy as np
import pytest

from mgforge.assembly import apply_dirichlet, assemble, build_dofmap
from mgforge.forms import BcSpec, SpaceSpec, TestFunction, TrialFunction, dot, dx, grad
from mgforge.kernel import compile_form
from mgforge.mesh import partition_mesh, unit_simplex_mesh
from mgforge.runtime import spmd_run


def stiffness_ir(dim, degree):
    u, v = TrialFunction(), TestFunction()
    return compile_form(dot(grad(u), grad(v)) * dx, SpaceSpec(degree, dim))


def mass_ir(dim, degree):
    u, v = TrialFunction(), TestFunction()
    return compile_form(u * v * dx, SpaceSpec(degree, dim))


def gather(comm, owned):
    """Collective: the global vector assembled from owned slices."""
    return np.concatenate(comm.allgather(np.asarray(owned)))


def global_operator(dim, N, degree, R=1, ir=None, dirichlet=False, constants=None):
    """Assemble on ``R`` ranks and return the global scipy matrix or vector."""
    mesh = unit_simplex_mesh(dim, N)
    space = SpaceSpec(degree, dim)
    bcs = [BcSpec(mesh.markers)] if dirichlet else []
    dm = build_dofmap(mesh, space, bcs, partition_mesh(mesh, R))
    ir = ir or stiffness_ir(dim, degree)

    def prog(comm):
        out = assemble(comm, ir, dm, constants)
        if dirichlet:
            out = apply_dirichlet(out, None, dm)[0] if ir.rank == 2 else apply_dirichlet(None, out, dm)[1]
        return out.to_global(comm) if ir.rank == 2 else gather(comm, out.owned)

    return spmd_run(R, prog)[0], dm


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
