"""Shared finite-difference oracles and sampling helpers for the test suite.

The oracles are deliberately dumb and independent of the library code: plain
central differences and loop-based constructions, so closed forms in the
package are certified against something that cannot share their bugs.
"""

import numpy as np
import pytest


def fd_gradient(f, x, h=1e-5):
    """Central-difference gradient of a scalar function, shape (d,)."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def fd_jacobian(f, x, h=1e-5):
    """Central-difference Jacobian of a vector function, shape (m, d)."""
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        cols.append((np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2 * h))
    return np.stack(cols, axis=-1)


def fd_matrix_divergence(F, x, h=1e-4):
    """Row divergence of a matrix field: out_i = sum_j d/dx_j F(x)[i, j]."""
    x = np.asarray(x, dtype=float)
    d = x.size
    out = np.zeros(d)
    for j in range(d):
        e = np.zeros_like(x)
        e[j] = h
        diff = (np.asarray(F(x + e)) - np.asarray(F(x - e))) / (2 * h)
        out += diff[:, j]
    return out


def fd_mixed_second(k, a, b, h=1e-4):
    """Matrix of cross second derivatives d^2 k / da_i db_j, shape (d, d)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    d = a.size
    out = np.zeros((d, d))
    for i in range(d):
        for j in range(d):
            ea = np.zeros(d)
            eb = np.zeros(d)
            ea[i] = h
            eb[j] = h
            out[i, j] = (
                k(a + ea, b + eb)
                - k(a + ea, b - eb)
                - k(a - ea, b + eb)
                + k(a - ea, b - eb)
            ) / (4 * h * h)
    return out


def rel_err(approx, exact, floor=1e-12):
    approx = np.asarray(approx, dtype=float)
    exact = np.asarray(exact, dtype=float)
    scale = np.maximum(np.abs(exact), floor)
    return float(np.max(np.abs(approx - exact) / scale))


def sample_simplex_interior(rng, n, d, margin=0.0):
    """Uniform points of the open simplex {theta_i > 0, sum theta < 1}."""
    g = rng.gamma(1.0, 1.0, size=(n, d + 1))
    t = g / np.sum(g, axis=1, keepdims=True)
    pts = t[:, :d]
    if margin > 0.0:
        pts = margin / (d + 1) + (1.0 - margin) * pts
    return pts


def sample_box_interior(rng, n, lo, hi, margin=1e-3):
    lo = np.atleast_1d(np.asarray(lo, dtype=float))
    hi = np.atleast_1d(np.asarray(hi, dtype=float))
    u = rng.uniform(margin, 1.0 - margin, size=(n, lo.size))
    return lo + (hi - lo) * u


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
