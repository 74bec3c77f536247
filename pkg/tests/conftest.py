"""Shared fixtures and independent oracles for the test suite.

Oracles here deliberately avoid the library code paths they check: brute-force
permutation enumeration, SVD Procrustes written from scratch, Gauss-Hermite
quadrature for the optimal linear control, and high-truncation wrap sums.
"""

from __future__ import annotations

from itertools import permutations

import numpy as np
import pytest

from adj_sampler import _backend


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)


@pytest.fixture(params=[True, False], ids=["numba", "numpy"])
def backend_flag(request):
    """Run a test under both kernel backends."""
    if request.param and not _backend.HAS_NUMBA:
        pytest.skip("numba unavailable")
    old = _backend.use_numba()
    _backend.set_use_numba(request.param)
    yield request.param
    _backend.set_use_numba(old)


@pytest.fixture
def numpy_backend():
    old = _backend.use_numba()
    _backend.set_use_numba(False)
    yield
    _backend.set_use_numba(old)


def fd_gradient(f, x, h=1e-5):
    """Central finite differences of a scalar function of a flat vector."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xp[i] += h
        xm = x.copy()
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def oracle_procrustes(x0, x1p, reflections=False):
    """SVD-based orthogonal alignment, independent of the package's closed forms."""
    h = x1p.T @ x0
    u, _, vt = np.linalg.svd(h)
    r = vt.T @ u.T
    if not reflections and np.linalg.det(r) < 0:
        fix = np.ones(h.shape[0])
        fix[-1] = -1.0
        r = vt.T @ np.diag(fix) @ u.T
    return r


def oracle_joint_align(x0, x1, reflections=False):
    """Exact min over all permutations, each with optimal (proper) rotation."""
    best = np.inf
    for p in permutations(range(x0.shape[0])):
        x1p = x1[list(p)]
        r = oracle_procrustes(x0, x1p, reflections)
        best = min(best, float(((x0 - x1p @ r.T) ** 2).sum()))
    return best


def oracle_w2_1d(a, b):
    """Exact 1-D W2 for equal small sets by assignment enumeration."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    assert a.size == b.size <= 8
    best = np.inf
    for p in permutations(range(b.size)):
        best = min(best, float(np.mean((a - b[list(p)]) ** 2)))
    return float(np.sqrt(best))


def oracle_gaussian_control_coef(schedule, s: float):
    """Closed-form coefficient c(t) of the optimal linear control u*(x,t) = c(t) x.

    Derived from the value function -log E[exp(-g(X1)) | X_t = x] of a
    Gaussian target N(0, s^2 I): the inner expectation is a Gaussian integral
    with X1 | X_t ~ N(x, nu_{1|t} I), giving
    V(x,t) = const + gam ||x||^2 / (2 (1 + gam nu_{1|t})),
    gam = 1/s^2 - 1/nu_1, and u* = -sigma(t) grad V.
    """
    nu1 = schedule.nu1

    def coef(t):
        gam = 1.0 / s**2 - 1.0 / nu1
        beta = nu1 - np.asarray(schedule.nu(t))
        return -np.asarray(schedule.sigma_at(t)) * gam / (1.0 + gam * beta)

    return coef


def oracle_value_grad_quadrature(schedule, s, x, t, n_nodes=160):
    """grad_x of -log E[exp(-g(X1)) | X_t = x] by Gauss-Hermite quadrature.

    Separable across coordinates for the Gaussian energy; finite differences
    on the quadrature value give the gradient.
    """
    nu1 = schedule.nu1
    beta = nu1 - float(schedule.nu(t))
    nodes, weights = np.polynomial.hermite_e.hermegauss(n_nodes)

    def v_1d(xc):
        x1 = xc + np.sqrt(beta) * nodes
        # exp(-g) = exp(||x1||^2/(2 nu1) - ||x1||^2/(2 s^2)) per coordinate
        integrand = np.exp(x1**2 / (2 * nu1) - x1**2 / (2 * s**2))
        return -np.log((weights * integrand).sum() / np.sqrt(2 * np.pi))

    h = 1e-6
    return np.array([
        (v_1d(xc + h) - v_1d(xc - h)) / (2 * h) for xc in np.atleast_1d(x)
    ])


def oracle_wrapped_logpdf(x, nu, k_trunc):
    """Normalized truncated wrapped Gaussian log-density, direct summation."""
    from scipy.stats import norm

    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    ks = np.arange(-k_trunc, k_trunc + 1)
    dens = norm.pdf(x[..., None] + ks, scale=np.sqrt(nu)).sum(axis=-1)
    mass = norm.cdf((k_trunc + 1) / np.sqrt(nu)) - norm.cdf(-k_trunc / np.sqrt(nu))
    return np.log(dens / mass)


def random_rotation(d: int, rng: np.random.Generator) -> np.ndarray:
    a = rng.standard_normal((d, d))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q
