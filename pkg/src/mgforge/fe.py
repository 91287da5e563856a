"""Reference Lagrange elements, simplex quadrature and tabulation.

The reference simplex has vertices ``0, e_1, ..., e_d``.  Nodes sit on the
equispaced lattice ``alpha / k`` where ``alpha`` runs over barycentric
multi-indices of total degree ``k``; ``alpha[0]`` belongs to the origin.

Nodal basis functions are expanded in an orthogonal (Dubiner) basis built
from Jacobi polynomials in collapsed coordinates, and the coefficients are
obtained by inverting the generalised Vandermonde matrix.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import eval_jacobi, roots_jacobi

from .errors import UnsupportedDegree

_TINY = 1e-14


def lattice_indices(d: int, k: int) -> np.ndarray:
    """Barycentric multi-indices of degree ``k``, descending lexicographic."""
    idx = [a for a in itertools.product(range(k + 1), repeat=d + 1) if sum(a) == k]
    idx.sort(reverse=True)
    return np.array(idx, dtype=np.int64)


def _jacobi(n, alpha, x):
    return eval_jacobi(n, alpha, 0.0, x)


def _djacobi(n, alpha, x):
    if n == 0:
        return np.zeros_like(x)
    return 0.5 * (n + alpha + 1) * eval_jacobi(n - 1, alpha + 1, 1.0, x)


def _safe_div(num, den):
    ok = np.abs(den) > _TINY
    return np.where(ok, num / np.where(ok, den, 1.0), 0.0)


def _powm1(g, p):
    """p * g**(p-1), with the p == 0 term identically zero."""
    if p == 0:
        return np.zeros_like(g)
    return p * g ** (p - 1)


def dubiner_indices(d, k):
    if d == 2:
        return [(p, q) for p in range(k + 1) for q in range(k + 1 - p)]
    return [(p, q, s) for p in range(k + 1) for q in range(k + 1 - p) for s in range(k + 1 - p - q)]


def dubiner(d: int, k: int, X: np.ndarray, derivs: bool = False):
    """Orthogonal basis of P_k at reference points ``X`` (n, d).

    Returns values ``(n, nb)`` and, with ``derivs``, gradients ``(n, nb, d)``.
    Gradients are only valid away from the collapsed vertex/edge of the
    reference simplex (all interior points qualify).
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n = X.shape[0]
    ids = dubiner_indices(d, k)
    vals = np.empty((n, len(ids)))
    grads = np.empty((n, len(ids), d)) if derivs else None
    if d == 2:
        x, y = X[:, 0], X[:, 1]
        e = 1.0 - y
        a = np.where(np.abs(e) > _TINY, _safe_div(2 * x, e) - 1.0, -1.0)
        b = 2 * y - 1.0
        for col, (p, q) in enumerate(ids):
            A, dA = _jacobi(p, 0, a), _djacobi(p, 0, a)
            Q, dQ = _jacobi(q, 2 * p + 1, b), _djacobi(q, 2 * p + 1, b)
            B = e ** p * Q
            vals[:, col] = A * B
            if derivs:
                # B(b) with g = (1 - b)/2 = e; d/db e^p = -p/2 e^(p-1)
                dB = -0.5 * _powm1(e, p) * Q + e ** p * dQ
                da_dx = _safe_div(2.0, e)
                da_dy = _safe_div(1.0 + a, e)
                grads[:, col, 0] = dA * da_dx * B
                grads[:, col, 1] = dA * da_dy * B + A * dB * 2.0
        return (vals, grads) if derivs else vals

    x, y, z = X[:, 0], X[:, 1], X[:, 2]
    e = 1.0 - y - z
    f = 1.0 - z
    a = np.where(np.abs(e) > _TINY, _safe_div(2 * x, e) - 1.0, -1.0)
    b = np.where(np.abs(f) > _TINY, _safe_div(2 * y, f) - 1.0, -1.0)
    c = 2 * z - 1.0
    gb = _safe_div(e, f)            # (1 - b)/2
    for col, (p, q, s) in enumerate(ids):
        A, dA = _jacobi(p, 0, a), _djacobi(p, 0, a)
        Q, dQ = _jacobi(q, 2 * p + 1, b), _djacobi(q, 2 * p + 1, b)
        S, dS = _jacobi(s, 2 * (p + q) + 2, c), _djacobi(s, 2 * (p + q) + 2, c)
        B = gb ** p * Q
        C = f ** (p + q) * S
        vals[:, col] = A * B * C
        if derivs:
            dB = -0.5 * _powm1(gb, p) * Q + gb ** p * dQ
            dC = -0.5 * _powm1(f, p + q) * S + f ** (p + q) * dS
            da = (_safe_div(2.0, e), _safe_div(1.0 + a, e), _safe_div(1.0 + a, e))
            db = (0.0, _safe_div(2.0, f), _safe_div(1.0 + b, f))
            dc = (0.0, 0.0, 2.0)
            for m in range(3):
                grads[:, col, m] = dA * da[m] * B * C + A * dB * db[m] * C + A * B * dC * dc[m]
    return (vals, grads) if derivs else vals


@dataclass(frozen=True, eq=False)
class ReferenceElement:
    dim: int
    degree: int
    multi_indices: np.ndarray     # (ndof, d+1)
    nodes: np.ndarray             # (ndof, d) reference coordinates
    coefficients: np.ndarray      # (nb, ndof) nodal basis in the Dubiner basis

    @property
    def ndofs(self):
        return len(self.nodes)

    def evaluate(self, X):
        """Basis values ``(n, ndof)`` at reference points ``X``."""
        return dubiner(self.dim, self.degree, X) @ self.coefficients

    def evaluate_gradients(self, X):
        """Reference gradients ``(n, ndof, d)``."""
        _, g = dubiner(self.dim, self.degree, X, derivs=True)
        return np.einsum("nbd,bi->nid", g, self.coefficients)


@lru_cache(maxsize=None)
def lagrange_element(d: int, k: int) -> ReferenceElement:
    if d not in (2, 3):
        raise UnsupportedDegree(f"dimension {d} not supported")
    if not 1 <= k <= 4:
        raise UnsupportedDegree(f"degree {k} outside [1, 4]")
    alpha = lattice_indices(d, k)
    nodes = alpha[:, 1:] / k
    V = dubiner(d, k, nodes)
    coeffs = np.linalg.solve(V, np.eye(len(nodes)))
    for arr in (alpha, nodes, coeffs):
        arr.setflags(write=False)
    return ReferenceElement(d, k, alpha, nodes, coeffs)


@dataclass(frozen=True, eq=False)
class QuadratureRule:
    points: np.ndarray
    weights: np.ndarray
    degree: int

    def __len__(self):
        return len(self.weights)


@lru_cache(maxsize=None)
def simplex_quadrature(d: int, q: int) -> QuadratureRule:
    """Collapsed-coordinate Gauss-Jacobi rule exact for total degree ``q``."""
    if q < 0:
        raise ValueError("quadrature degree must be >= 0")
    m = max(1, math.ceil((q + 1) / 2))
    ga, wa = roots_jacobi(m, 0.0, 0.0)
    gb, wb = roots_jacobi(m, 1.0, 0.0)
    if d == 2:
        A, B = np.meshgrid(ga, gb, indexing="ij")
        WA, WB = np.meshgrid(wa, wb, indexing="ij")
        x = (1 + A) * (1 - B) / 4
        y = (1 + B) / 2
        pts = np.stack([x.ravel(), y.ravel()], axis=1)
        w = (WA * WB).ravel() / 8
    elif d == 3:
        gc, wc = roots_jacobi(m, 2.0, 0.0)
        A, B, C = np.meshgrid(ga, gb, gc, indexing="ij")
        WA, WB, WC = np.meshgrid(wa, wb, wc, indexing="ij")
        x = (1 + A) * (1 - B) * (1 - C) / 8
        y = (1 + B) * (1 - C) / 4
        z = (1 + C) / 2
        pts = np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1)
        w = (WA * WB * WC).ravel() / 64
    else:
        raise ValueError(f"dimension {d} not supported")
    pts.setflags(write=False)
    w.setflags(write=False)
    return QuadratureRule(pts, w, q)


@dataclass(frozen=True, eq=False)
class Tabulation:
    values: np.ndarray       # (nq, ndof)
    gradients: np.ndarray    # (nq, ndof, d)


def tabulate(element: ReferenceElement, rule: QuadratureRule) -> Tabulation:
    if rule.points.shape[1] != element.dim:
        raise ValueError("element and quadrature dimensions differ")
    vals = element.evaluate(rule.points)
    grads = element.evaluate_gradients(rule.points)
    vals.setflags(write=False)
    grads.setflags(write=False)
    return Tabulation(vals, grads)
