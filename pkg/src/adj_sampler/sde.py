"""Euler-Maruyama rollout of the controlled SDE dX = sigma(t) u dt + sigma(t) dB.

The state starts at X0 = 0 on a uniform grid t_i = i/N, drift evaluated at the
left endpoint.  Zero-CoM geometries project both drift and noise increments;
torus geometries wrap the state into [0,1) after every step.  Girsanov
accumulators (int 1/2||u||^2 dt and int u . dB, evaluated on the realized
increments) can be collected for path importance weights.

Batches are simulated in fixed-size chunks with one spawned RNG stream per
chunk, so results are reproducible for a given seed regardless of memory
pressure.  MLP policies run through a fused numba kernel; everything else
takes the generic per-step path (same math, same noise stream).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _backend
from ._backend import njit
from .base_process import BaseProcess
from .errors import ContractViolationError, DivergedTrajectoryError

DIVERGENCE_CAP = 1e6

__all__ = ["SdeRun", "simulate", "path_log_weight"]


@dataclass
class SdeRun:
    x1: np.ndarray
    n_steps: int
    u_sq_int: np.ndarray | None = None
    u_dot_db: np.ndarray | None = None
    trace_t: np.ndarray | None = None  # (batch, R)
    trace_x: np.ndarray | None = None  # (batch, R, dim)


def _simulate_chunk_generic(policy, theta, base, n_steps, batch, rng,
                            accumulate, trace_idx, step_offset=0):
    geom = base.geometry
    dim = base.dim
    dt = 1.0 / n_steps
    sqdt = np.sqrt(dt)
    x = np.zeros((batch, dim))
    usq = np.zeros(batch) if accumulate else None
    udb = np.zeros(batch) if accumulate else None
    traces = {} if trace_idx is not None else None
    for i in range(n_steps):
        t_i = i / n_steps
        if traces is not None and i in trace_idx:
            traces[i] = x.copy()
        xi = rng.standard_normal((batch, dim))
        u = policy.forward(theta, x, t_i)
        if geom.kind == "zero_com":
            u = geom.project(u)
            xi = geom.project(xi)
        if accumulate:
            usq += 0.5 * np.einsum("bi,bi->b", u, u) * dt
            udb += np.einsum("bi,bi->b", u, xi) * sqdt
        sig = float(base.schedule.sigma_at(t_i))
        x = x + sig * (u * dt + sqdt * xi)
        if geom.kind == "torus":
            x = np.mod(x, 1.0)
        if not np.all(np.isfinite(x)) or np.abs(x).max() > DIVERGENCE_CAP:
            raise DivergedTrajectoryError(step_offset + i)
    return x, usq, udb, traces


def _chunk_rows(batch: int, n_steps: int, dim: int) -> int:
    # keep the pre-drawn noise block near 32 MB
    cap = max(16, 4_194_304 // max(1, n_steps * dim))
    return int(min(batch, cap))


def simulate(policy, theta, base: BaseProcess, n_steps: int, batch: int, seed,
             accumulate_weights: bool = False, trace_count: int = 0) -> SdeRun:
    """Roll out ``batch`` trajectories; returns terminal states (plus extras).

    ``seed`` may be an int or a SeedSequence.  ``trace_count`` > 0 stores that
    many evenly spaced interior states (t, X_t) per trajectory.
    Raises :class:`DivergedTrajectoryError` with the offending step index when
    a state leaves [-1e6, 1e6] or turns non-finite.
    """
    if n_steps < 1:
        raise ContractViolationError("need n_steps >= 1")
    if batch < 1:
        raise ContractViolationError("need batch >= 1")
    dim = base.dim
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    chunk = _chunk_rows(batch, n_steps, dim)
    n_chunks = (batch + chunk - 1) // chunk
    children = ss.spawn(n_chunks)

    trace_idx = None
    if trace_count > 0:
        pos = np.round(np.arange(1, trace_count + 1) * n_steps / (trace_count + 1.0)).astype(int)
        pos = np.clip(pos, 1, n_steps - 1)
        trace_idx = sorted(set(int(p) for p in pos))

    use_fused = (
        _backend.use_numba()
        and hasattr(policy, "fused_sim")
        and trace_idx is None
    )
    if use_fused:
        from .control_net import time_embedding

        grid = np.arange(n_steps) / n_steps
        temb = time_embedding(grid, policy.time_freqs)
        sigmas = np.asarray(base.schedule.sigma_at(grid), dtype=np.float64)

    xs, usqs, udbs = [], [], []
    tr_x = []
    done = 0
    for c in range(n_chunks):
        rows = min(chunk, batch - done)
        rng = np.random.Generator(np.random.PCG64(children[c]))
        if use_fused:
            noise = rng.standard_normal((n_steps, rows, dim))
            x, usq, udb, bad_step = policy.fused_sim(
                theta, noise, sigmas, temb, 1.0 / n_steps, base.geometry,
                accumulate_weights, DIVERGENCE_CAP)
            if bad_step >= 0:
                raise DivergedTrajectoryError(int(bad_step))
            traces = None
        else:
            x, usq, udb, traces = _simulate_chunk_generic(
                policy, theta, base, n_steps, rows, rng,
                accumulate_weights, trace_idx)
        xs.append(x)
        if accumulate_weights:
            usqs.append(usq)
            udbs.append(udb)
        if trace_idx is not None:
            tr_x.append(np.stack([traces[i] for i in trace_idx], axis=1))
        done += rows

    run = SdeRun(x1=np.concatenate(xs, axis=0), n_steps=n_steps)
    if accumulate_weights:
        run.u_sq_int = np.concatenate(usqs)
        run.u_dot_db = np.concatenate(udbs)
    if trace_idx is not None:
        run.trace_x = np.concatenate(tr_x, axis=0)
        run.trace_t = np.broadcast_to(
            np.asarray(trace_idx, dtype=np.float64) / n_steps,
            (batch, len(trace_idx))).copy()
    return run


def path_log_weight(run: SdeRun, terminal_cost) -> np.ndarray:
    """log of the unnormalized path importance weight per sample.

    log w = -int 1/2 ||u||^2 dt - int u . dB - g(X1).
    """
    if run.u_sq_int is None or run.u_dot_db is None:
        raise ContractViolationError("run was simulated without accumulate_weights")
    return -run.u_sq_int - run.u_dot_db - terminal_cost.values(run.x1)
