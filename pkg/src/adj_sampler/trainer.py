"""Outer/inner training loop, optimizer, and pretraining.

The outer loop alternates between (a) rolling out the current control with a
stop-gradient to collect terminal samples, evaluating the terminal-cost
gradient exactly once per sample, and pushing the pairs into the replay
buffer, and (b) a fixed number of inner regression steps.  Each inner step
draws buffer entries uniformly, resamples X_t from the closed-form posterior
at a fresh t ~ U(eps, 1-eps), and regresses the control onto
-sigma(t) grad g(X1) with weight lambda(t) = 1/sigma(t)^2 (switchable to 1).

With ``ablation_no_rp`` the posterior resampling is replaced by stored
trajectory states: that flag toggles exactly one branch, everything else is
shared.  Simulation never contributes to parameter gradients.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .base_process import BaseProcess
from .buffer import ReplayBuffer
from .control_net import bm_loss_gradient, loss_gradient
from .energy import TerminalCost
from .errors import ContractViolationError, DivergedTrajectoryError
from .sde import simulate

logger = logging.getLogger(__name__)

EPS_T = 1e-5  # t is never drawn at the degenerate endpoints

__all__ = ["Adam", "TrainResult", "ram_inner_step", "outer_loop", "bridge_matching_pretrain"]


class Adam:
    """Adaptive-moment optimizer with bias correction.

    Non-finite gradients skip the step (counted, warned, never fatal).
    """

    def __init__(self, n_params: int, lr: float = 3e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = float(lr)
        self.beta1, self.beta2, self.eps = float(beta1), float(beta2), float(eps)
        self.m1 = np.zeros(n_params)
        self.m2 = np.zeros(n_params)
        self.count = 0
        self.skipped = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if grad.shape != theta.shape:
            raise ContractViolationError("gradient shape does not match parameters")
        if not np.all(np.isfinite(grad)):
            self.skipped += 1
            logger.warning("optimizer skipped a non-finite gradient (total %d)", self.skipped)
            return theta
        self.count += 1
        self.m1 = self.beta1 * self.m1 + (1.0 - self.beta1) * grad
        self.m2 = self.beta2 * self.m2 + (1.0 - self.beta2) * grad * grad
        m1_hat = self.m1 / (1.0 - self.beta1**self.count)
        m2_hat = self.m2 / (1.0 - self.beta2**self.count)
        return theta - self.lr * m1_hat / (np.sqrt(m2_hat) + self.eps)


@dataclass
class TrainResult:
    theta: np.ndarray
    curve: list = field(default_factory=list)  # rows: (outer, mean_loss, e_evals, updates, wall)
    energy_grad_evals: int = 0
    grad_updates: int = 0


def ram_inner_step(policy, theta, buffer: ReplayBuffer, base: BaseProcess, m: int,
                   rng: np.random.Generator, opt: Adam, lambda_weighting: bool = True,
                   ablation: bool = False):
    """One regression step on buffer samples; returns (loss, updated theta)."""
    x1, grad_g, trace_t, trace_x = buffer.sample_arrays(m, rng)
    if ablation:
        if trace_t is None:
            raise ContractViolationError("ablation mode requires trajectory traces")
        pick = rng.integers(0, trace_t.shape[1], size=m)
        rows = np.arange(m)
        t = trace_t[rows, pick]
        x_t = trace_x[rows, pick]
    else:
        t = rng.uniform(EPS_T, 1.0 - EPS_T, size=m)
        x_t = base.posterior_sample(t, x1, rng)
    sigma_t = np.asarray(base.schedule.sigma_at(t), dtype=np.float64)
    lam = 1.0 / sigma_t**2 if lambda_weighting else np.ones(m)
    loss, tape = loss_gradient(policy, theta, x_t, t, grad_g, sigma_t, lam)
    return loss, opt.step(theta, tape)


def outer_loop(policy, theta, base: BaseProcess, cost: TerminalCost,
               buffer: ReplayBuffer, *, outer: int, n: int, inner: int, m: int,
               seed: int, sde_steps: int, lr: float = 3e-4, beta1: float = 0.9,
               beta2: float = 0.999, eps_opt: float = 1e-8,
               lambda_weighting: bool = True, ablation: bool = False,
               opt: Adam | None = None, progress=None) -> TrainResult:
    """Run the full sampling/training alternation.

    A diverged rollout is retried once with a fresh child seed, then aborts.
    The terminal-cost gradient is evaluated exactly once per fresh sample, so
    cumulative energy-gradient evaluations equal outer * n.
    """
    if opt is None:
        opt = Adam(policy.n_params, lr=lr, beta1=beta1, beta2=beta2, eps=eps_opt)
    result = TrainResult(theta=theta)
    root = np.random.SeedSequence(seed)
    sim_seeds = root.spawn(outer)
    inner_rng = np.random.Generator(np.random.PCG64(root.spawn(1)[0]))
    trace_count = buffer.trace_count if ablation else 0
    t_start = time.perf_counter()
    for it in range(outer):
        try:
            run = simulate(policy, result.theta, base, sde_steps, n, sim_seeds[it],
                           trace_count=trace_count)
        except DivergedTrajectoryError as first:
            logger.warning("outer %d diverged at step %d; retrying once", it, first.step)
            try:
                run = simulate(policy, result.theta, base, sde_steps, n,
                               sim_seeds[it].spawn(1)[0], trace_count=trace_count)
            except DivergedTrajectoryError as second:
                raise DivergedTrajectoryError(
                    second.step,
                    f"outer {it}: rollout diverged twice (steps {first.step}, {second.step})",
                ) from second
        grad_g = cost.gradients(run.x1)
        result.energy_grad_evals += run.x1.shape[0]
        buffer.push_arrays(run.x1, grad_g, birth=it,
                           trace_t=run.trace_t, trace_x=run.trace_x)
        losses = np.empty(inner)
        for j in range(inner):
            loss, result.theta = ram_inner_step(
                policy, result.theta, buffer, base, m, inner_rng, opt,
                lambda_weighting=lambda_weighting, ablation=ablation)
            losses[j] = loss
        result.grad_updates += inner
        mean_loss = float(losses.mean()) if inner else float("nan")
        result.curve.append((it, mean_loss, result.energy_grad_evals,
                             result.grad_updates, time.perf_counter() - t_start))
        if progress is not None:
            progress(it, mean_loss)
    return result


def bridge_matching_pretrain(policy, theta, dataset: np.ndarray, base: BaseProcess,
                             steps: int, batch: int, seed: int, lr: float = 3e-4,
                             beta1: float = 0.9, beta2: float = 0.999,
                             eps_opt: float = 1e-8):
    """Regress the control toward data bridges; returns (theta, losses).

    Per step: draw X1 from the dataset, t ~ U(eps, 1-eps), X_t from the
    posterior, and minimize || (nu_{1|t}/sigma(t)) u(X_t, t) - (X1 - X_t) ||^2.
    """
    dataset = np.atleast_2d(np.asarray(dataset, dtype=np.float64))
    if dataset.shape[0] == 0:
        raise ContractViolationError("pretraining dataset is empty")
    if dataset.shape[1] != base.dim:
        raise ContractViolationError("dataset dimension does not match the state space")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    opt = Adam(policy.n_params, lr=lr, beta1=beta1, beta2=beta2, eps=eps_opt)
    losses = np.empty(steps)
    for s in range(steps):
        idx = rng.integers(0, dataset.shape[0], size=batch)
        x1 = dataset[idx]
        t = rng.uniform(EPS_T, 1.0 - EPS_T, size=batch)
        x_t = base.posterior_sample(t, x1, rng)
        nu_1t = np.asarray(base.schedule.nu_between(t, 1.0), dtype=np.float64)
        sigma_t = np.asarray(base.schedule.sigma_at(t), dtype=np.float64)
        loss, tape = bm_loss_gradient(policy, theta, x_t, t, x1, nu_1t, sigma_t)
        theta = opt.step(theta, tape)
        losses[s] = loss
    return theta, losses
