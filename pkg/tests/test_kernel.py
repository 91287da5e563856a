"""Compiled element kernels against hand-derived tensors and an independent integrator."""
import numpy as np
import pytest

from kernelcases import FORM_NAMES, form_case
from oracles import direct_tensor, random_cells
from mgforge.errors import DegenerateCell, MalformedForm
from mgforge.forms import Constant, SpaceSpec, SpatialCoordinate, TestFunction, TrialFunction, dot, dx, grad
from mgforge.kernel import compile_form, default_quadrature_degree, execute_kernel

U, V = TrialFunction(), TestFunction()
REF2 = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
REF3 = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]])


def test_p1_reference_stiffness_hand_derived():
    A2 = execute_kernel(compile_form(dot(grad(U), grad(V)) * dx, SpaceSpec(1, 2)), REF2)
    np.testing.assert_allclose(A2, [[1, -0.5, -0.5], [-0.5, 0.5, 0], [-0.5, 0, 0.5]], atol=1e-15)
    A3 = execute_kernel(compile_form(dot(grad(U), grad(V)) * dx, SpaceSpec(1, 3)), REF3)
    hand = np.array([[3, -1, -1, -1], [-1, 1, 0, 0], [-1, 0, 1, 0], [-1, 0, 0, 1]]) / 6
    np.testing.assert_allclose(A3, hand, atol=1e-15)


def test_p1_mass_and_load():
    M = execute_kernel(compile_form(U * V * dx, SpaceSpec(1, 2)), REF2)
    np.testing.assert_allclose(M, (np.ones((3, 3)) + np.eye(3)) / 24, atol=1e-15)
    X = np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 3.0]])
    b = execute_kernel(compile_form(Constant(1.0) * V * dx, SpaceSpec(1, 2)), X)
    np.testing.assert_allclose(b, np.full(3, 3.0 / 3), atol=1e-15)      # area 3, one third each


@pytest.mark.parametrize("d", [2, 3])
@pytest.mark.parametrize("k", [1, 2, 3, 4])
def test_structural_properties(d, k, rng):
    sp = SpaceSpec(k, d)
    K = compile_form(dot(grad(U), grad(V)) * dx, sp)
    M = compile_form(U * V * dx, sp)
    X = random_cells(rng, d, 5)
    AK = execute_kernel(K, X)
    AM = execute_kernel(M, X)
    vol = np.abs(np.linalg.det(X[:, 1:] - X[:, :1])) / (2 if d == 2 else 6)
    np.testing.assert_allclose(AM.sum(axis=(1, 2)), vol, rtol=1e-12)
    np.testing.assert_allclose(AK, np.swapaxes(AK, 1, 2), atol=1e-13 * np.abs(AK).max())
    np.testing.assert_allclose(AK.sum(axis=2), 0.0, atol=1e-12 * np.abs(AK).max())
    w = np.linalg.eigvalsh(AK)
    assert np.all(w[:, 1:] > 0) and np.all(np.abs(w[:, 0]) < 1e-10 * w[:, -1])


@pytest.mark.parametrize("d", [2, 3])
def test_coefficient_scaling(d):
    X = REF2 if d == 2 else REF3
    sp = SpaceSpec(2, d)
    A1 = execute_kernel(compile_form(dot(grad(U), grad(V)) * dx, sp), X)
    A2 = execute_kernel(compile_form(2 * dot(grad(U), grad(V)) * dx, sp), X)
    np.testing.assert_array_equal(A2, 2 * A1)


@pytest.mark.parametrize("name", FORM_NAMES)
@pytest.mark.parametrize("d", [2, 3])
def test_oracle_equivalence(name, d, rng):
    integral, rank, qdeg, npts, integrand = form_case(name, d)
    for k in (1, 2, 3, 4):
        ir = compile_form(integral, SpaceSpec(k, d), quadrature_degree=qdeg)
        cells = random_cells(rng, d, 50)
        got = execute_kernel(ir, cells)
        ref = np.array([direct_tensor(X, ir.element.nodes, k, integrand, rank, npts) for X in cells])
        scale = np.abs(ref).max(axis=tuple(range(1, ref.ndim)), keepdims=True)
        assert np.max(np.abs(got - ref) / scale) <= 1e-12, (name, k)


@pytest.mark.parametrize("d", [2, 3])
def test_fused_and_quadrature_paths_agree(d, rng):
    ir = compile_form((dot(grad(U), grad(V)) + U * V) * dx, SpaceSpec(3, d))
    assert ir.fused is not None
    X = random_cells(rng, d, 10)
    a = execute_kernel(ir, X, path="fused")
    b = execute_kernel(ir, X, path="quadrature")
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-13 * np.abs(a).max())


def test_kernel_is_deterministic(rng):
    ir = compile_form(form_case("load_manufactured", 3)[0], SpaceSpec(3, 3))
    X = random_cells(rng, 3, 20)
    np.testing.assert_array_equal(execute_kernel(ir, X), execute_kernel(ir, X))
    # batch composition does not change a cell's tensor
    np.testing.assert_array_equal(execute_kernel(ir, X)[7], execute_kernel(ir, X[7]))


def test_default_quadrature_degrees():
    x = SpatialCoordinate(3)
    assert default_quadrature_degree(dot(grad(U), grad(V)) * dx, 3) == 6
    assert default_quadrature_degree(x[0] * V * dx, 3) == 8
    assert compile_form(dot(grad(U), grad(V)) * dx, SpaceSpec(3, 3)).quad_degree == 6


def test_degenerate_cell():
    ir = compile_form(dot(grad(U), grad(V)) * dx, SpaceSpec(1, 3))
    flat = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]])
    with pytest.raises(DegenerateCell):
        execute_kernel(ir, flat)


def test_compile_errors():
    with pytest.raises(MalformedForm):
        compile_form(Constant(1.0) * dx, SpaceSpec(1, 2))
    with pytest.raises(MalformedForm):
        compile_form(U * V, SpaceSpec(1, 2))


def test_ir_text_dump():
    text = compile_form(dot(grad(U), grad(V)) * dx, SpaceSpec(2, 3)).to_text()
    assert text.startswith("kernel rank=2 dim=3 CG2")
    assert "path=fused" in text and "geometry" in text
