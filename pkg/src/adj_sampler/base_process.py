"""Closed-form machinery of the uncontrolled base SDE ``dX = sigma(t) dB``.

Everything here is exact: integrated variances, backward-transition
coefficients, terminal marginals and posterior samplers, on three state
spaces (Euclidean, zero center-of-mass subspace, flat torus).

Conventions.  ``nu(t)`` is the integrated variance ``int_0^t sigma(s)^2 ds``.
The backward transition of the base process given a later state is Gaussian,

    X_s | X_t ~ N(alpha_{s|t} X_t, nu_check_{s|t} I),
    alpha_{s|t} = nu_s / (nu_s + nu_{t|s}),
    nu_check_{s|t} = alpha_{s|t} * nu_{t|s},

with ``nu_{t|s} = nu_t - nu_s``.  Two schedules are supported:

    constant:   sigma(t) = sigma,
                nu_{t|s} = sigma^2 (t - s),           alpha_{s|t} = s / t
    geometric:  sigma(t) = sigma_min (sigma_max/sigma_min)^(1-t)
                           * sqrt(2 log(sigma_max/sigma_min)),
                nu_{t|s} = sigma_max^2 (r^{2s} - r^{2t}),  r = sigma_min/sigma_max,
                alpha_{s|t} = (r^{2s} - 1) / (r^{2t} - 1)

On the torus the terminal marginal is a truncated wrapped Gaussian; backward
sampling draws an integer shift ``k`` with ``p(k) ∝ p1(X1 + k)`` per
coordinate, samples the Euclidean posterior conditioned on ``X1 + k``, and
wraps the result back into [0, 1).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _backend
from ._backend import njit, prange
from .errors import ContractViolationError

__all__ = ["NoiseSchedule", "GeometrySpec", "BaseProcess"]


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str  # "constant" | "geometric"
    sigma: float = 1.0
    sigma_min: float = 1e-4
    sigma_max: float = 3.0

    def __post_init__(self):
        if self.kind not in ("constant", "geometric"):
            raise ContractViolationError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "geometric" and not 0 < self.sigma_min < self.sigma_max:
            raise ContractViolationError("geometric schedule needs 0 < sigma_min < sigma_max")

    @property
    def _log_ratio(self) -> float:
        return float(np.log(self.sigma_max / self.sigma_min))

    def sigma_at(self, t):
        """Diffusion coefficient sigma(t); accepts scalars or arrays."""
        t = np.asarray(t, dtype=np.float64)
        if self.kind == "constant":
            return np.broadcast_to(np.float64(self.sigma), t.shape).copy() if t.ndim else np.float64(self.sigma)
        out = self.sigma_min * (self.sigma_max / self.sigma_min) ** (1.0 - t)
        return out * np.sqrt(2.0 * self._log_ratio)

    def nu(self, t):
        """Integrated variance nu_t = int_0^t sigma(s)^2 ds."""
        t = np.asarray(t, dtype=np.float64)
        if self.kind == "constant":
            return self.sigma**2 * t
        r2 = (self.sigma_min / self.sigma_max) ** 2
        return self.sigma_max**2 * (1.0 - r2**t)

    @property
    def nu1(self) -> float:
        return float(self.nu(1.0))

    def nu_between(self, s, t):
        """nu_{t|s} = nu_t - nu_s, in closed form."""
        s = np.asarray(s, dtype=np.float64)
        t = np.asarray(t, dtype=np.float64)
        if self.kind == "constant":
            return self.sigma**2 * (t - s)
        r2 = (self.sigma_min / self.sigma_max) ** 2
        return self.sigma_max**2 * (r2**s - r2**t)

    def coefficients(self, s, t):
        """Backward-transition coefficients (nu_{t|s}, alpha_{s|t}, nu_check_{s|t}).

        Requires 0 <= s < t <= 1 elementwise.
        """
        s = np.asarray(s, dtype=np.float64)
        t = np.asarray(t, dtype=np.float64)
        if np.any(s < 0) or np.any(t > 1) or np.any(s >= t):
            raise ContractViolationError("coefficients require 0 <= s < t <= 1")
        nu_ts = self.nu_between(s, t)
        if self.kind == "constant":
            alpha = s / t
        else:
            r2 = (self.sigma_min / self.sigma_max) ** 2
            alpha = (r2**s - 1.0) / (r2**t - 1.0)
        return nu_ts, alpha, alpha * nu_ts


@dataclass(frozen=True)
class GeometrySpec:
    """State-space description: kind plus particle layout.

    For ``torus`` the flat dimension k*d is the torus dimension and
    ``k_trunc`` bounds the wrapped-Gaussian shift sum to |k| <= k_trunc.
    """

    kind: str  # "euclidean" | "zero_com" | "torus"
    k: int = 1
    d: int = 2
    k_trunc: int = 6

    def __post_init__(self):
        if self.kind not in ("euclidean", "zero_com", "torus"):
            raise ContractViolationError(f"unknown geometry kind {self.kind!r}")
        if self.k < 1 or self.d < 1:
            raise ContractViolationError("need k >= 1 and d >= 1")
        if self.kind == "zero_com" and self.k < 2:
            raise ContractViolationError("zero_com needs k >= 2 particles")

    @property
    def dim(self) -> int:
        return self.k * self.d

    def project(self, y: np.ndarray) -> np.ndarray:
        """Apply the zero-CoM projection (I_k - (1/k) 11^T) ⊗ I_d.

        Subtracts the per-axis particle mean; identity for other geometries.
        """
        if self.kind != "zero_com":
            return np.asarray(y, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        parts = y.reshape(y.shape[:-1] + (self.k, self.d))
        out = parts - parts.mean(axis=-2, keepdims=True)
        return out.reshape(y.shape)

    def wrap(self, y: np.ndarray) -> np.ndarray:
        if self.kind != "torus":
            return np.asarray(y, dtype=np.float64)
        return np.mod(np.asarray(y, dtype=np.float64), 1.0)

    def shifts(self) -> np.ndarray:
        return np.arange(-self.k_trunc, self.k_trunc + 1, dtype=np.float64)


@njit(cache=True, parallel=True)
def _torus_shift_pick_nb(x1, shifts, nu1, unif):
    n_rows, dim = x1.shape
    n_shift = shifts.shape[0]
    out = np.empty((n_rows, dim))
    for i in prange(n_rows):
        for c in range(dim):
            best = -1e300
            for s in range(n_shift):
                z = x1[i, c] + shifts[s]
                logw = -0.5 * z * z / nu1
                if logw > best:
                    best = logw
            total = 0.0
            for s in range(n_shift):
                z = x1[i, c] + shifts[s]
                total += np.exp(-0.5 * z * z / nu1 - best)
            target = unif[i, c] * total
            acc = 0.0
            pick = n_shift - 1
            for s in range(n_shift):
                z = x1[i, c] + shifts[s]
                acc += np.exp(-0.5 * z * z / nu1 - best)
                if acc >= target:
                    pick = s
                    break
            out[i, c] = x1[i, c] + shifts[pick]
    return out


def _torus_shift_pick_np(x1, shifts, nu1, unif):
    z = x1[..., None] + shifts
    logw = -0.5 * z * z / nu1
    logw -= logw.max(axis=-1, keepdims=True)
    w = np.exp(logw)
    cdf = np.cumsum(w, axis=-1)
    target = unif[..., None] * cdf[..., -1:]
    idx = (cdf < target).sum(axis=-1)
    idx = np.minimum(idx, shifts.shape[0] - 1)
    return x1 + shifts[idx]


class BaseProcess:
    """Marginals, scores and posterior samplers of the base SDE on a geometry."""

    def __init__(self, schedule: NoiseSchedule, geometry: GeometrySpec):
        self.schedule = schedule
        self.geometry = geometry

    @property
    def dim(self) -> int:
        return self.geometry.dim

    # -- terminal marginal -------------------------------------------------

    def terminal_log_density(self, x: np.ndarray) -> np.ndarray:
        """log p1 at the terminal time.

        Euclidean and zero-CoM values drop additive normalization constants
        (only gradients and differences are consumed); torus values are the
        truncated wrapped Gaussian, normalized so different truncations and
        variances stay comparable.
        """
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if self.geometry.kind == "torus":
            return self.wrapped_log_density(x, 1.0)
        nu1 = self.schedule.nu1
        return -0.5 * np.sum(x * x, axis=-1) / nu1

    def terminal_log_density_grad(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        x2 = np.atleast_2d(x)
        nu1 = self.schedule.nu1
        if self.geometry.kind == "torus":
            out = self._wrapped_score(x2, nu1)
        else:
            out = -x2 / nu1
            if self.geometry.kind == "zero_com":
                out = self.geometry.project(out)
        return out[0] if squeeze else out

    def sample_terminal(self, n: int, rng: np.random.Generator) -> np.ndarray:
        z = rng.standard_normal((n, self.dim)) * np.sqrt(self.schedule.nu1)
        if self.geometry.kind == "zero_com":
            return self.geometry.project(z)
        if self.geometry.kind == "torus":
            return np.mod(z, 1.0)
        return z

    def sample_marginal(self, t: float, n: int, rng: np.random.Generator) -> np.ndarray:
        """Direct draw from the time-t marginal (testing aid)."""
        nut = float(self.schedule.nu(t))
        z = rng.standard_normal((n, self.dim)) * np.sqrt(nut)
        if self.geometry.kind == "zero_com":
            return self.geometry.project(z)
        if self.geometry.kind == "torus":
            return np.mod(z, 1.0)
        return z

    # -- wrapped densities ---------------------------------------------------

    def _wrapped_terms(self, x: np.ndarray, nu: float):
        shifts = self.geometry.shifts()
        z = x[..., None] + shifts  # (..., dim, n_shift)
        expo = -0.5 * z * z / nu
        return z, expo

    def wrapped_log_density(self, x: np.ndarray, t: float) -> np.ndarray:
        """Per-sample log of the truncated wrapped Gaussian at time t.

        Sum over coordinates of log sum_{|k|<=k_trunc} N(x_c + k; 0, nu_t),
        each coordinate normalized by the truncated mass on [0, 1).
        """
        if self.geometry.kind != "torus":
            raise ContractViolationError("wrapped_log_density requires torus geometry")
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        nu = float(self.schedule.nu(t))
        _, expo = self._wrapped_terms(x, nu)
        peak = expo.max(axis=-1, keepdims=True)
        dens = np.log(np.exp(expo - peak).sum(axis=-1)) + peak[..., 0]
        dens -= 0.5 * np.log(2.0 * np.pi * nu)
        # truncated mass of the wrap sum over one period
        from scipy.stats import norm

        kt = self.geometry.k_trunc
        log_mass = np.log(norm.cdf((kt + 1) / np.sqrt(nu)) - norm.cdf(-kt / np.sqrt(nu)))
        return (dens - log_mass).sum(axis=-1)

    def _wrapped_score(self, x: np.ndarray, nu: float) -> np.ndarray:
        z, expo = self._wrapped_terms(x, nu)
        peak = expo.max(axis=-1, keepdims=True)
        w = np.exp(expo - peak)
        return -(w * z).sum(axis=-1) / (nu * w.sum(axis=-1))

    # -- posterior ----------------------------------------------------------

    def posterior_sample(self, t, x1: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Draw X_t ~ p_{t|1}(. | X1) for scalar or per-sample t in [0, 1].

        t = 0 returns the exact zero state (Dirac initial condition); t = 1
        returns X1.
        """
        x1 = np.atleast_2d(np.asarray(x1, dtype=np.float64))
        t_arr = np.asarray(t, dtype=np.float64)
        if np.any(t_arr < 0.0) or np.any(t_arr > 1.0):
            raise ContractViolationError("posterior_sample requires t in [0, 1]")
        if t_arr.ndim == 0:
            if t_arr == 0.0:
                return np.zeros_like(x1)
            if t_arr == 1.0:
                return self.geometry.wrap(x1) if self.geometry.kind == "torus" else x1.copy()

        t_col = np.broadcast_to(t_arr.reshape(-1, 1) if t_arr.ndim else t_arr, (x1.shape[0], 1))
        safe_t = np.clip(t_col, 1e-300, 1.0)
        nu_t1 = self.schedule.nu_between(safe_t, 1.0)
        nu1 = self.schedule.nu1
        alpha = self.schedule.nu(safe_t) / nu1
        nu_check = alpha * nu_t1

        if self.geometry.kind == "torus":
            unif = rng.random(x1.shape)
            if _backend.use_numba():
                anchor = _torus_shift_pick_nb(
                    np.ascontiguousarray(x1), self.geometry.shifts(), nu1, unif
                )
            else:
                anchor = _torus_shift_pick_np(x1, self.geometry.shifts(), nu1, unif)
            y = alpha * anchor + np.sqrt(nu_check) * rng.standard_normal(x1.shape)
            out = np.mod(y, 1.0)
        else:
            noise = rng.standard_normal(x1.shape)
            out = alpha * x1 + np.sqrt(nu_check) * noise
            if self.geometry.kind == "zero_com":
                out = self.geometry.project(out)
        # exact endpoints for per-sample t vectors
        if t_arr.ndim:
            at0 = (t_col[:, 0] == 0.0)
            if np.any(at0):
                out[at0] = 0.0
            at1 = (t_col[:, 0] == 1.0)
            if np.any(at1):
                out[at1] = self.geometry.wrap(x1[at1]) if self.geometry.kind == "torus" else x1[at1]
        return out

    def zero_com_project(self, y: np.ndarray) -> np.ndarray:
        return self.geometry.project(y)
