"""Target energies, their analytic gradients, and the composed terminal cost.

All energies operate on flat configuration vectors of length k*d and accept
either a single configuration or a batch (rows).  Gradients are analytic and
are validated against central finite differences in the test suite.

Pairwise energies raise :class:`SingularConfigurationError` when any pairwise
distance falls below ``DIST_FLOOR`` instead of returning infinities, so NaNs
cannot leak into training.
"""

from __future__ import annotations

import numpy as np

from . import _backend
from ._backend import njit, prange
from .base_process import BaseProcess
from .errors import ContractViolationError, SingularConfigurationError

DIST_FLOOR = 1e-8

__all__ = [
    "EnergyModel",
    "DoubleWell4Energy",
    "LennardJonesEnergy",
    "GaussianEnergy",
    "TorusDoubleWellEnergy",
    "CallableEnergy",
    "TerminalCost",
    "build_energy",
]


class EnergyModel:
    """Base class: unnormalized energy E(x) with analytic gradient.

    ``temperature`` is the tau used by the terminal cost g = log p1 + E/tau.
    ``grad_evals`` counts configurations whose gradient has been evaluated
    (bookkeeping only; evaluation itself is pure).
    """

    dim: int
    temperature: float = 1.0

    def __init__(self):
        self.grad_evals = 0
        self.energy_evals = 0

    def _check(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.dim:
            raise ContractViolationError(
                f"expected configurations of length {self.dim}, got {x.shape[-1]}"
            )
        return x

    def energy_many(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def gradient_many(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def energy(self, x: np.ndarray) -> float:
        return float(self.energy_many(np.atleast_2d(self._check(x)))[0])

    def gradient(self, x: np.ndarray) -> np.ndarray:
        return self.gradient_many(np.atleast_2d(self._check(x)))[0]


@njit(cache=True, parallel=True)
def _pair_poly_nb(xp, a, b, c, d0, tau, floor):
    n, k, d = xp.shape
    e = np.zeros(n)
    g = np.zeros((n, k, d))
    bad = 0
    for s in prange(n):
        for i in range(k):
            for j in range(i + 1, k):
                r2 = 0.0
                for c0 in range(d):
                    diff = xp[s, i, c0] - xp[s, j, c0]
                    r2 += diff * diff
                dist = np.sqrt(r2)
                if dist < floor:
                    bad += 1
                    continue
                u = dist - d0
                e[s] += (a * u + b * u * u + c * u * u * u * u) / tau
                coef = (a + 2.0 * b * u + 4.0 * c * u * u * u) / (tau * dist)
                for c0 in range(d):
                    diff = xp[s, i, c0] - xp[s, j, c0]
                    g[s, i, c0] += coef * diff
                    g[s, j, c0] -= coef * diff
    return e, g, bad == 0


@njit(cache=True, parallel=True)
def _lj_nb(xp, r_m, eps, tau, osc, conventional, floor):
    n, k, d = xp.shape
    e = np.zeros(n)
    g = np.zeros((n, k, d))
    bad = 0
    for s in prange(n):
        for i in range(k):
            for j in range(i + 1, k):
                r2 = 0.0
                for c0 in range(d):
                    diff = xp[s, i, c0] - xp[s, j, c0]
                    r2 += diff * diff
                dist = np.sqrt(r2)
                if dist < floor:
                    bad += 1
                    continue
                s6 = (r_m / dist) ** 6
                pair = s6 - s6 * s6
                dpair = (1.0 - 2.0 * s6) * (-6.0 * s6 / dist)
                if conventional:
                    pair = -pair
                    dpair = -dpair
                e[s] += eps / tau * pair
                coef = eps / tau * dpair / dist
                for c0 in range(d):
                    diff = xp[s, i, c0] - xp[s, j, c0]
                    g[s, i, c0] += coef * diff
                    g[s, j, c0] -= coef * diff
        # harmonic confinement about the centre of mass
        for c0 in range(d):
            com = 0.0
            for i in range(k):
                com += xp[s, i, c0]
            com /= k
            for i in range(k):
                dev = xp[s, i, c0] - com
                e[s] += 0.5 * osc * dev * dev
                g[s, i, c0] += osc * dev
    return e, g, bad == 0


def _pairwise(xp):
    diff = xp[:, :, None, :] - xp[:, None, :, :]
    dist = np.sqrt(np.einsum("bijc,bijc->bij", diff, diff))
    return diff, dist


def _pair_poly_np(xp, a, b, c, d0, tau, floor):
    n, k, _ = xp.shape
    iu, ju = np.triu_indices(k, 1)
    diff, dist = _pairwise(xp)
    dsub = dist[:, iu, ju]
    ok = bool(dsub.min() >= floor) if dsub.size else True
    u = dsub - d0
    e = (a * u + b * u**2 + c * u**4).sum(axis=1) / tau
    coef = np.zeros_like(dist)
    with np.errstate(divide="ignore", invalid="ignore"):
        full_u = dist - d0
        coef = (a + 2 * b * full_u + 4 * c * full_u**3) / (tau * dist)
    np.einsum("bii->bi", coef)[:] = 0.0
    g = np.einsum("bij,bijc->bic", coef, diff)
    return e, g, ok


def _lj_np(xp, r_m, eps, tau, osc, conventional, floor):
    n, k, _ = xp.shape
    iu, ju = np.triu_indices(k, 1)
    diff, dist = _pairwise(xp)
    dsub = dist[:, iu, ju]
    ok = bool(dsub.min() >= floor) if dsub.size else True
    with np.errstate(divide="ignore", invalid="ignore"):
        s6 = (r_m / dist) ** 6
        pair = s6 - s6 * s6
        dpair = (1.0 - 2.0 * s6) * (-6.0 * s6 / dist)
        coef = eps / tau * dpair / dist
    if conventional:
        pair = -pair
        coef = -coef
    psub = pair[:, iu, ju]
    e = eps / tau * np.where(np.isfinite(psub), psub, 0.0).sum(axis=1)
    coef = np.where(np.isfinite(coef), coef, 0.0)
    np.einsum("bii->bi", coef)[:] = 0.0
    g = np.einsum("bij,bijc->bic", coef, diff)
    com = xp.mean(axis=1, keepdims=True)
    dev = xp - com
    e = e + 0.5 * osc * np.einsum("bic,bic->b", dev, dev)
    g = g + osc * dev
    return e, g, ok


class _PairwiseEnergy(EnergyModel):
    """Shared batching/guard logic for particle-pair energies."""

    k: int
    d: int

    def _eval(self, xp: np.ndarray):
        raise NotImplementedError

    def _both(self, x: np.ndarray):
        x = self._check(x)
        xp = np.ascontiguousarray(np.atleast_2d(x)).reshape(-1, self.k, self.d)
        e, g, ok = self._eval(xp)
        if not ok:
            raise SingularConfigurationError(
                f"pairwise distance below {DIST_FLOOR:g}"
            )
        return e, g.reshape(-1, self.dim)

    def energy_many(self, x: np.ndarray) -> np.ndarray:
        e, _ = self._both(x)
        self.energy_evals += e.shape[0]
        return e

    def gradient_many(self, x: np.ndarray) -> np.ndarray:
        _, g = self._both(x)
        self.grad_evals += g.shape[0]
        return g


class DoubleWell4Energy(_PairwiseEnergy):
    """4-particle, 2-D pairwise quartic double well.

    E(x) = (1/tau) sum_{i<j} a(d_ij - d0) + b(d_ij - d0)^2 + c(d_ij - d0)^4
    with defaults a=0, b=-4, c=0.9, tau=1.  The pair offset d0 defaults to 4.0.
    """

    def __init__(self, a=0.0, b=-4.0, c=0.9, d0=4.0, tau=1.0):
        super().__init__()
        self.k, self.d = 4, 2
        self.dim = 8
        self.a, self.b, self.c, self.d0, self.tau = (
            float(a), float(b), float(c), float(d0), float(tau))
        self.temperature = 1.0  # tau is already applied inside the formula

    def pair_term(self, dist: float) -> float:
        """Energy contribution of a single pair at distance ``dist``."""
        u = dist - self.d0
        return (self.a * u + self.b * u**2 + self.c * u**4) / self.tau

    def _eval(self, xp):
        if _backend.use_numba():
            return _pair_poly_nb(xp, self.a, self.b, self.c, self.d0, self.tau, DIST_FLOOR)
        return _pair_poly_np(xp, self.a, self.b, self.c, self.d0, self.tau, DIST_FLOOR)


class LennardJonesEnergy(_PairwiseEnergy):
    """k-particle, 3-D Lennard-Jones sum plus harmonic confinement.

    The pair sum is (eps/tau) sum_{i<j} ((r_m/d)^6 - (r_m/d)^12), written with
    the inverted sign some benchmark listings use; ``conventional_sign=True``
    flips it to the physical repulsive-core orientation.  The confinement term
    c * 1/2 sum_i ||x_i - x_com||^2 is never divided by tau.
    """

    def __init__(self, k=13, r_m=1.0, eps=1.0, tau=1.0, osc_scale=1.0,
                 conventional_sign=False):
        super().__init__()
        self.k, self.d = int(k), 3
        self.dim = self.k * 3
        self.r_m, self.eps, self.tau = float(r_m), float(eps), float(tau)
        self.osc_scale = float(osc_scale)
        self.conventional_sign = bool(conventional_sign)
        self.temperature = 1.0

    def pair_term(self, dist: float) -> float:
        s6 = (self.r_m / dist) ** 6
        pair = s6 - s6 * s6
        if self.conventional_sign:
            pair = -pair
        return self.eps / self.tau * pair

    def _eval(self, xp):
        if _backend.use_numba():
            return _lj_nb(xp, self.r_m, self.eps, self.tau, self.osc_scale,
                          self.conventional_sign, DIST_FLOOR)
        return _lj_np(xp, self.r_m, self.eps, self.tau, self.osc_scale,
                      self.conventional_sign, DIST_FLOOR)


class GaussianEnergy(EnergyModel):
    """E(x) = ||x||^2 / (2 s^2): Boltzmann target N(0, s^2 I)."""

    def __init__(self, dim: int, scale: float = 1.0, temperature: float = 1.0):
        super().__init__()
        if scale <= 0:
            raise ContractViolationError("scale must be positive")
        self.dim = int(dim)
        self.scale = float(scale)
        self.temperature = float(temperature)

    def energy_many(self, x):
        x = np.atleast_2d(self._check(x))
        self.energy_evals += x.shape[0]
        return 0.5 * np.sum(x * x, axis=-1) / self.scale**2

    def gradient_many(self, x):
        x = np.atleast_2d(self._check(x))
        self.grad_evals += x.shape[0]
        return x / self.scale**2


class TorusDoubleWellEnergy(EnergyModel):
    """Periodic double well on the n-torus: E = h sum_i (1 - cos 4 pi phi_i).

    Two wells per coordinate, at phi = 0 and phi = 1/2.
    """

    def __init__(self, dim: int, well_depth: float = 1.0, temperature: float = 1.0):
        super().__init__()
        self.dim = int(dim)
        self.well_depth = float(well_depth)
        self.temperature = float(temperature)

    def energy_many(self, x):
        x = np.atleast_2d(self._check(x))
        self.energy_evals += x.shape[0]
        return self.well_depth * np.sum(1.0 - np.cos(4.0 * np.pi * x), axis=-1)

    def gradient_many(self, x):
        x = np.atleast_2d(self._check(x))
        self.grad_evals += x.shape[0]
        return self.well_depth * 4.0 * np.pi * np.sin(4.0 * np.pi * x)


class CallableEnergy(EnergyModel):
    """Wrap plain batch functions (energy, gradient) as an energy model."""

    def __init__(self, dim, energy_fn, gradient_fn, temperature=1.0):
        super().__init__()
        self.dim = int(dim)
        self._energy_fn = energy_fn
        self._gradient_fn = gradient_fn
        self.temperature = float(temperature)

    def energy_many(self, x):
        x = np.atleast_2d(self._check(x))
        self.energy_evals += x.shape[0]
        return np.asarray(self._energy_fn(x), dtype=np.float64)

    def gradient_many(self, x):
        x = np.atleast_2d(self._check(x))
        self.grad_evals += x.shape[0]
        return np.asarray(self._gradient_fn(x), dtype=np.float64)


class TerminalCost:
    """g(x) = log p1(x) + E(x)/tau and its gradient.

    The gradient is projected onto the zero-CoM subspace when the geometry
    requires it, then optionally clipped to ``clip_norm`` in L2 (disabled by
    default; synthetic energies never need it).
    """

    def __init__(self, energy: EnergyModel, base: BaseProcess, clip_norm: float | None = None):
        if energy.dim != base.dim:
            raise ContractViolationError("energy and base process dimensions differ")
        self.energy = energy
        self.base = base
        self.clip_norm = clip_norm

    def values(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return self.base.terminal_log_density(x) + self.energy.energy_many(x) / self.energy.temperature

    def gradients(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        g = self.base.terminal_log_density_grad(x) + self.energy.gradient_many(x) / self.energy.temperature
        if self.base.geometry.kind == "zero_com":
            g = self.base.geometry.project(g)
        if self.clip_norm is not None:
            norms = np.linalg.norm(g, axis=-1, keepdims=True)
            factor = np.minimum(1.0, self.clip_norm / np.maximum(norms, 1e-300))
            g = g * factor
        return g


def build_energy(cfg: dict, dim: int) -> EnergyModel:
    """Construct the configured energy model for a flat dimension."""
    kind = cfg["energy.kind"]
    if kind == "dw4":
        model = DoubleWell4Energy(
            a=cfg["energy.a"], b=cfg["energy.b"], c=cfg["energy.c"],
            d0=cfg["energy.d0"], tau=cfg["energy.tau"])
    elif kind == "lj":
        model = LennardJonesEnergy(
            k=cfg["energy.k"], r_m=cfg["energy.r_m"], eps=cfg["energy.eps"],
            tau=cfg["energy.tau"], osc_scale=cfg["energy.osc_scale"],
            conventional_sign=cfg["energy.lj_conventional_sign"])
    elif kind == "gaussian":
        model = GaussianEnergy(dim, scale=cfg["energy.scale"], temperature=cfg["energy.tau"])
    elif kind == "torus_dw":
        model = TorusDoubleWellEnergy(dim, well_depth=cfg["energy.well_depth"],
                                      temperature=cfg["energy.tau"])
    else:  # pragma: no cover - config validation rejects this earlier
        raise ContractViolationError(f"unknown energy kind {kind!r}")
    if model.dim != dim:
        raise ContractViolationError(
            f"energy dimension {model.dim} does not match geometry dimension {dim}")
    return model
