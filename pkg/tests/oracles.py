"""Independent reference implementations used as test oracles.

The direct integrator deliberately shares no numerical code with the
compiler: the nodal basis comes from an exactly inverted monomial
Vandermonde matrix, gradients are pulled back by a linear solve with the
edge matrix, the quadrature is a Duffy-collapsed Gauss-Legendre product
rule, and coefficients are plain numpy callables.
"""
import itertools
from functools import lru_cache

import numpy as np
import sympy


def monomial_powers(d, k):
    return [p for p in itertools.product(range(k + 1), repeat=d) if sum(p) <= k]


@lru_cache(maxsize=None)
def _reference_coefficients(d, k, nodes_key):
    """Exact rational inverse of the monomial Vandermonde matrix at the nodes."""
    pw = monomial_powers(d, k)
    nodes = [[sympy.Rational(int(round(c * k)), k) for c in row] for row in nodes_key]
    Vm = sympy.Matrix([[sympy.prod([x**p for x, p in zip(node, q)]) for q in pw] for node in nodes])
    return np.array(Vm.inv().tolist(), dtype=float)


def reference_basis(ref_nodes, k):
    """Callables giving nodal basis values / reference gradients at reference points."""
    d = ref_nodes.shape[1]
    pw = np.array(monomial_powers(d, k))
    C = _reference_coefficients(d, k, tuple(map(tuple, ref_nodes.tolist())))

    def values(Y):
        return np.prod(Y[:, None, :] ** pw[None], axis=2) @ C

    def grads(Y):
        out = np.zeros((len(Y), len(pw), d))
        for a in range(d):
            q = pw.copy()
            q[:, a] = np.maximum(q[:, a] - 1, 0)
            out[:, :, a] = pw[:, a] * np.prod(Y[:, None, :] ** q[None], axis=2)
        return np.einsum("pmd,mi->pid", out, C)

    return values, grads


@lru_cache(maxsize=None)
def duffy_reference(d, n=12):
    """Gauss-Legendre product rule collapsed onto the reference simplex."""
    g, w = np.polynomial.legendre.leggauss(n)
    g, w = (g + 1) / 2, w / 2
    pts, wts = [], []
    for idx in itertools.product(range(n), repeat=d):
        t = g[list(idx)]
        wt = np.prod(w[list(idx)])
        lam = np.empty(d)
        rem = 1.0
        for a in range(d):
            lam[a] = rem * t[a]
            wt *= rem
            rem -= lam[a]
        pts.append(lam[::-1])
        wts.append(wt)
    return np.array(pts), np.array(wts)


@lru_cache(maxsize=None)
def _reference_tables(k, nodes_key, n):
    nodes = np.array(nodes_key)
    values, grads = reference_basis(nodes, k)
    Y, _ = duffy_reference(nodes.shape[1], n)
    return values(Y), grads(Y)


def direct_tensor(X, ref_nodes, k, integrand, rank, n=12):
    """Element tensor of ``integrand(x, phi, dphi) -> (nq, n[, n])`` on cell ``X``."""
    d = X.shape[1]
    Y, w = duffy_reference(d, n)
    phi, g_ref = _reference_tables(k, tuple(map(tuple, ref_nodes.tolist())), n)
    T = X[1:] - X[0]                       # rows are edge vectors
    P = X[0] + Y @ T
    # physical gradients: solve T g_phys = g_ref for every point and basis function
    g_phys = np.linalg.solve(T, g_ref.reshape(-1, d).T).T.reshape(g_ref.shape)
    vals = integrand(P, phi, g_phys)
    return np.tensordot(w * abs(np.linalg.det(T)), vals, axes=(0, 0))


def random_cells(rng, d, count, min_volume=0.02):
    cells = []
    fact = 2.0 if d == 2 else 6.0
    while len(cells) < count:
        X = rng.uniform(0, 1, (d + 1, d))
        if abs(np.linalg.det(X[1:] - X[0])) / fact > min_volume:
            cells.append(X)
    return np.array(cells)
