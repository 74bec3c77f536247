"""Metropolis-adjusted Langevin chains for ground-truth reference samples.

The target is the Boltzmann density exp(-E(x)/tau) of an energy model.
Proposals are x' = x - (eta/2) grad(E/tau)(x) + sqrt(eta) xi with the exact
asymmetric Metropolis correction.  Zero-CoM geometries project gradients and
noise so chains stay on the subspace (where the proposal is a standard
Gaussian of the subspace); torus geometries wrap proposals and use the
wrapped proposal density in the correction.

Chains are independent and deterministically seeded; all chains advance in
one batched energy call per step.  Pooling is chain-order concatenation of
post-burn-in, thinned states.  Long runs can checkpoint to disk and resume.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _backend
from ._backend import njit
from .base_process import GeometrySpec
from .energy import EnergyModel

logger = logging.getLogger(__name__)

__all__ = ["MalaConfig", "MalaResult", "mala_sample", "tune_step_size"]


@dataclass
class MalaConfig:
    step_size: float = 0.05
    chains: int = 32
    burn_in: int = 10000
    thin: int = 10
    samples: int = 100000
    init_dispersion: float = 1.0
    autotune: bool = True
    seed: int = 0
    checkpoint_every: int = 0  # kept states between checkpoints; 0 disables
    checkpoint_path: str | None = None

    def __post_init__(self):
        if self.step_size <= 0 or self.burn_in < 0 or self.thin < 1 or self.chains < 1:
            raise ValueError("invalid MALA configuration")


@dataclass
class MalaResult:
    samples: np.ndarray
    acceptance_rate: float
    step_size: float


_WRAP_SHIFTS = np.arange(-3.0, 4.0)


@njit(cache=True)
def _wrap_log_q_nb(x_to, mean, eta, shifts):
    n_rows, dim = x_to.shape
    out = np.zeros(n_rows)
    for r in range(n_rows):
        for c in range(dim):
            best = -1e300
            for s in range(shifts.shape[0]):
                z = x_to[r, c] + shifts[s] - mean[r, c]
                v = -0.5 * z * z / eta
                if v > best:
                    best = v
            acc = 0.0
            for s in range(shifts.shape[0]):
                z = x_to[r, c] + shifts[s] - mean[r, c]
                acc += np.exp(-0.5 * z * z / eta - best)
            out[r] += best + np.log(acc)
    return out


def _wrap_log_q_np(x_to, mean, eta, shifts):
    z = x_to[..., None] + shifts - mean[..., None]
    expo = -0.5 * z * z / eta
    peak = expo.max(axis=-1)
    return (peak + np.log(np.exp(expo - peak[..., None]).sum(axis=-1))).sum(axis=-1)


def _wrap_log_q(x_to, mean, eta):
    if _backend.use_numba():
        return _wrap_log_q_nb(x_to, mean, eta, _WRAP_SHIFTS)
    return _wrap_log_q_np(x_to, mean, eta, _WRAP_SHIFTS)


def _project_rows(x, k, d):
    parts = x.reshape(-1, k, d)
    return (parts - parts.mean(axis=1, keepdims=True)).reshape(x.shape)


def _mala_block(energy: EnergyModel, geometry: GeometrySpec, x, eta, n_steps,
                rng, keep_every=0):
    """Advance all chains n_steps; optionally keep every keep_every-th state."""
    tau = energy.temperature
    n_chains, dim = x.shape
    torus = geometry.kind == "torus"
    zero_com = geometry.kind == "zero_com"

    log_pi = -energy.energy_many(x) / tau
    grad = energy.gradient_many(x) / tau
    if zero_com:
        grad = _project_rows(grad, geometry.k, geometry.d)
    kept = []
    accepted = 0
    for step in range(n_steps):
        noise = rng.standard_normal((n_chains, dim))
        if zero_com:
            noise = _project_rows(noise, geometry.k, geometry.d)
        mean_fwd = x - 0.5 * eta * grad
        prop = mean_fwd + np.sqrt(eta) * noise
        prop = np.mod(prop, 1.0) if torus else prop
        log_pi_p = -energy.energy_many(prop) / tau
        grad_p = energy.gradient_many(prop) / tau
        if zero_com:
            grad_p = _project_rows(grad_p, geometry.k, geometry.d)
        mean_rev = prop - 0.5 * eta * grad_p
        if torus:
            log_q_fwd = _wrap_log_q(prop, mean_fwd, eta)
            log_q_rev = _wrap_log_q(x, mean_rev, eta)
        else:
            log_q_fwd = -0.5 * np.sum((prop - mean_fwd) ** 2, axis=1) / eta
            log_q_rev = -0.5 * np.sum((x - mean_rev) ** 2, axis=1) / eta
        log_alpha = (log_pi_p + log_q_rev) - (log_pi + log_q_fwd)
        accept = np.log(rng.random(n_chains)) < log_alpha
        x = np.where(accept[:, None], prop, x)
        log_pi = np.where(accept, log_pi_p, log_pi)
        grad = np.where(accept[:, None], grad_p, grad)
        accepted += int(accept.sum())
        if keep_every and (step + 1) % keep_every == 0:
            kept.append(x.copy())
    return x, kept, accepted / max(n_steps * n_chains, 1)


def _initial_state(geometry, chains, dispersion, rng):
    x = dispersion * rng.standard_normal((chains, geometry.dim))
    if geometry.kind == "zero_com":
        x = _project_rows(x, geometry.k, geometry.d)
    elif geometry.kind == "torus":
        x = np.mod(x, 1.0)
    return x


def tune_step_size(energy, geometry, eta0, rng, chains=8, rounds=10, steps=150,
                   target=(0.5, 0.6), init_dispersion=1.0):
    """Multiplicative pre-run tuning toward the target acceptance band."""
    eta = float(eta0)
    x = _initial_state(geometry, chains, init_dispersion, rng)
    for _ in range(rounds):
        x, _, acc = _mala_block(energy, geometry, x, eta, steps, rng)
        if acc < target[0]:
            eta *= 0.6
        elif acc > target[1]:
            eta *= 1.5
        else:
            break
    return eta


def mala_sample(energy: EnergyModel, geometry: GeometrySpec, config: MalaConfig) -> MalaResult:
    """Pooled, thinned MALA samples of exp(-E/tau) on the geometry.

    Resumes from ``checkpoint_path`` when present.  Acceptance below 1% after
    burn-in logs a warning with diagnostics (the run still completes).
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(config.seed)))
    eta = config.step_size
    per_chain = -(-config.samples // config.chains)  # ceil

    ckpt = Path(config.checkpoint_path) if config.checkpoint_path else None
    blocks: list[np.ndarray] = []
    done = 0
    if ckpt is not None and ckpt.exists():
        data = np.load(ckpt, allow_pickle=False)
        eta = float(data["eta"])
        x = data["x"]
        done = int(data["done"])
        kept_flat = data["kept"]
        if kept_flat.size:
            blocks = [kept_flat.reshape(-1, config.chains, x.shape[1])]
        rng.bit_generator.state = json.loads(str(data["rng_state"]))
        logger.info("resumed MALA from %s (%d/%d states per chain)", ckpt, done, per_chain)
    else:
        if config.autotune:
            tune_rng = np.random.Generator(
                np.random.PCG64(np.random.SeedSequence(config.seed + 1)))
            eta = tune_step_size(energy, geometry, eta, tune_rng,
                                 init_dispersion=config.init_dispersion)
        x = _initial_state(geometry, config.chains, config.init_dispersion, rng)
        x, _, _ = _mala_block(energy, geometry, x, eta, config.burn_in, rng)

    acc_sum, acc_n = 0.0, 0
    while done < per_chain:
        todo = min(per_chain - done, 200)
        x, kept, acc = _mala_block(energy, geometry, x, eta, todo * config.thin,
                                   rng, keep_every=config.thin)
        blocks.append(np.stack(kept, axis=0))  # (todo, chains, dim)
        done += todo
        acc_sum += acc * todo * config.thin
        acc_n += todo * config.thin
        if (ckpt is not None and config.checkpoint_every
                and done % config.checkpoint_every < 200 and done < per_chain):
            kept_all = np.concatenate(blocks, axis=0)
            np.savez(ckpt, eta=eta, x=x, done=done,
                     kept=kept_all.reshape(-1, x.shape[1]),
                     rng_state=json.dumps(rng.bit_generator.state))
    rate = acc_sum / max(acc_n, 1)
    if rate < 0.01:
        logger.warning("MALA acceptance rate %.4f < 1%% (eta=%g); chains may be stuck",
                       rate, eta)
    kept_all = np.concatenate(blocks, axis=0)  # (per_chain, chains, dim)
    pooled = kept_all.transpose(1, 0, 2).reshape(-1, geometry.dim)[: config.samples]
    if ckpt is not None and ckpt.exists():
        ckpt.unlink()
    return MalaResult(samples=pooled, acceptance_rate=rate, step_size=eta)
