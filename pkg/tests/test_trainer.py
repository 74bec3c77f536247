import numpy as np
import pytest

from adj_sampler.base_process import BaseProcess, GeometrySpec, NoiseSchedule
from adj_sampler.buffer import ReplayBuffer
from adj_sampler.control_net import MlpPolicy
from adj_sampler.energy import GaussianEnergy, TerminalCost
from adj_sampler.errors import ContractViolationError, DivergedTrajectoryError
from adj_sampler.sde import simulate
from adj_sampler.trainer import (Adam, bridge_matching_pretrain, outer_loop,
                                 ram_inner_step)


def _setup(sigma=1.0, scale=2.0, seed=0):
    geom = GeometrySpec("euclidean", 1, 2)
    base = BaseProcess(NoiseSchedule("constant", sigma=sigma), geom)
    energy = GaussianEnergy(2, scale=scale)
    cost = TerminalCost(energy, base)
    pol = MlpPolicy(geom, layers=2, hidden=8, time_freqs=3)
    theta = pol.init_params(np.random.default_rng(seed))
    return geom, base, energy, cost, pol, theta


class TestAdam:
    def test_zero_gradient_no_change(self):
        opt = Adam(4, lr=0.1)
        theta = np.arange(4.0)
        out = opt.step(theta, np.zeros(4))
        np.testing.assert_array_equal(out, theta)

    def test_first_step_magnitude_is_lr_signed(self):
        for g0 in (3.0, -0.02, 17.5):
            opt = Adam(1, lr=1e-3)
            out = opt.step(np.zeros(1), np.array([g0]))
            assert out[0] == pytest.approx(-1e-3 * np.sign(g0), rel=1e-3)

    def test_identical_gradients_identical_updates(self):
        opt = Adam(3, lr=0.01)
        out = opt.step(np.zeros(3), np.array([0.5, 0.5, 0.5]))
        assert out[0] == out[1] == out[2]

    def test_non_finite_gradient_skipped(self, caplog):
        opt = Adam(2, lr=0.1)
        theta = np.ones(2)
        with caplog.at_level("WARNING"):
            out = opt.step(theta, np.array([np.nan, 1.0]))
        np.testing.assert_array_equal(out, theta)
        assert opt.skipped == 1

    def test_shape_contract(self):
        with pytest.raises(ContractViolationError):
            Adam(2).step(np.zeros(2), np.zeros(3))


class TestInnerStep:
    def test_zero_target_zero_init_is_fixed_point(self):
        geom, base, energy, cost, pol, theta = _setup()
        buf = ReplayBuffer(10, 2)
        buf.push_arrays(np.ones((1, 2)), np.zeros((1, 2)))  # grad g = 0
        opt = Adam(pol.n_params, lr=0.1)
        loss, theta2 = ram_inner_step(pol, theta, buf, base, 4,
                                      np.random.default_rng(0), opt)
        assert loss == 0.0
        np.testing.assert_array_equal(theta, theta2)

    def test_lambda_switch_matches_unweighted_for_unit_sigma(self):
        # constant sigma = 1 makes lambda = 1: both switches give equal losses
        geom, base, energy, cost, pol, theta = _setup(sigma=1.0)
        rng = np.random.default_rng(1)
        theta = theta + rng.normal(0, 0.1, theta.shape)
        buf = ReplayBuffer(10, 2)
        buf.push_arrays(rng.standard_normal((6, 2)), rng.standard_normal((6, 2)))
        l1, _ = ram_inner_step(pol, theta, buf, base, 8, np.random.default_rng(5),
                               Adam(pol.n_params), lambda_weighting=True)
        l2, _ = ram_inner_step(pol, theta, buf, base, 8, np.random.default_rng(5),
                               Adam(pol.n_params), lambda_weighting=False)
        assert l1 == pytest.approx(l2, rel=1e-14)

    def test_deterministic_loss_sequence(self):
        geom, base, energy, cost, pol, theta = _setup()
        seqs = []
        for _ in range(2):
            buf = ReplayBuffer(100, 2)
            run = simulate(pol, theta, base, 40, 32, seed=3)
            buf.push_arrays(run.x1, cost.gradients(run.x1))
            opt = Adam(pol.n_params, lr=1e-3)
            rng = np.random.default_rng(9)
            th = theta.copy()
            losses = []
            for _ in range(5):
                loss, th = ram_inner_step(pol, th, buf, base, 16, rng, opt)
                losses.append(loss)
            seqs.append(losses)
        assert seqs[0] == seqs[1]

    def test_ablation_requires_traces(self):
        geom, base, energy, cost, pol, theta = _setup()
        buf = ReplayBuffer(10, 2)
        buf.push_arrays(np.ones((1, 2)), np.zeros((1, 2)))
        with pytest.raises(ContractViolationError):
            ram_inner_step(pol, theta, buf, base, 2, np.random.default_rng(0),
                           Adam(pol.n_params), ablation=True)

    def test_ablation_and_posterior_modes_both_finite(self):
        geom, base, energy, cost, pol, theta = _setup()
        rng = np.random.default_rng(2)
        theta = theta + rng.normal(0, 0.05, theta.shape)
        buf = ReplayBuffer(50, 2, trace_count=4)
        run = simulate(pol, theta, base, 60, 24, seed=4, trace_count=4)
        buf.push_arrays(run.x1, cost.gradients(run.x1),
                        trace_t=run.trace_t, trace_x=run.trace_x)
        for ablation in (False, True):
            loss, _ = ram_inner_step(pol, theta, buf, base, 16,
                                     np.random.default_rng(7), Adam(pol.n_params),
                                     ablation=ablation)
            assert np.isfinite(loss)


class TestOuterLoop:
    def test_energy_evaluation_accounting(self):
        geom, base, energy, cost, pol, theta = _setup()
        buf = ReplayBuffer(1000, 2)
        outer, n, inner = 5, 17, 3
        res = outer_loop(pol, theta, base, cost, buf, outer=outer, n=n, inner=inner,
                         m=8, seed=0, sde_steps=20)
        assert res.energy_grad_evals == outer * n
        assert energy.grad_evals == outer * n
        assert res.grad_updates == outer * inner
        # curve rows carry cumulative counters
        assert res.curve[-1][2] == outer * n and res.curve[-1][3] == outer * inner

    def test_zero_inner_steps_leave_theta_untouched(self):
        geom, base, energy, cost, pol, theta = _setup()
        buf = ReplayBuffer(1000, 2)
        res = outer_loop(pol, theta.copy(), base, cost, buf, outer=3, n=8, inner=0,
                         m=4, seed=1, sde_steps=10)
        np.testing.assert_array_equal(res.theta, theta)
        assert len(buf) == 24

    def test_stop_gradient_contract(self):
        # the tape from a frozen buffer is identical whether or not a rollout
        # happens in between: simulation never touches gradient state
        geom, base, energy, cost, pol, theta = _setup()
        rng = np.random.default_rng(3)
        theta = theta + rng.normal(0, 0.1, theta.shape)
        buf = ReplayBuffer(100, 2)
        run = simulate(pol, theta, base, 30, 40, seed=5)
        buf.push_arrays(run.x1, cost.gradients(run.x1))

        from adj_sampler.control_net import loss_gradient
        x1, g, _, _ = buf.sample_arrays(16, np.random.default_rng(11))
        t = np.random.default_rng(12).uniform(0.1, 0.9, 16)
        xt = base.posterior_sample(t, x1, np.random.default_rng(13))
        sig = base.schedule.sigma_at(t)
        _, tape_before = loss_gradient(pol, theta, xt, t, g, sig, 1.0 / sig**2)
        simulate(pol, theta, base, 30, 40, seed=99)  # interleaved rollout
        _, tape_after = loss_gradient(pol, theta, xt, t, g, sig, 1.0 / sig**2)
        np.testing.assert_array_equal(tape_before, tape_after)

    def test_loss_decreases_on_frozen_buffer(self):
        # median over 10 seeds of (first loss - last loss) must be positive
        geom, base, energy, cost, pol, theta0 = _setup(scale=1.4)
        drops = []
        for seed in range(10):
            rng = np.random.default_rng(100 + seed)
            theta = theta0 + rng.normal(0, 0.2, theta0.shape)
            buf = ReplayBuffer(200, 2)
            run = simulate(pol, theta, base, 50, 128, seed=seed)
            buf.push_arrays(run.x1, cost.gradients(run.x1))
            opt = Adam(pol.n_params, lr=3e-4)
            srng = np.random.default_rng(200 + seed)
            losses = []
            for _ in range(200):
                loss, theta = ram_inner_step(pol, theta, buf, base, 32, srng, opt)
                losses.append(loss)
            drops.append(np.mean(losses[:20]) - np.mean(losses[-20:]))
        assert np.median(drops) > 0

    def test_divergence_retry_then_abort(self):
        geom, base, energy, cost, pol, theta = _setup()

        class Blowup:
            kind = "blowup"
            supports_fused_simulate = False
            n_params = 0
            geometry = geom

            def forward(self, th, x, t):
                return np.full_like(np.atleast_2d(x), 1e12)

        buf = ReplayBuffer(10, 2)
        with pytest.raises(DivergedTrajectoryError):
            outer_loop(Blowup(), np.zeros(0), base, cost, buf, outer=1, n=4,
                       inner=0, m=1, seed=0, sde_steps=5)


class TestBridgeMatching:
    def test_empty_dataset_contract(self):
        geom, base, energy, cost, pol, theta = _setup()
        with pytest.raises(ContractViolationError):
            bridge_matching_pretrain(pol, theta, np.empty((0, 2)), base, 5, 4, 0)

    def test_pretrained_on_base_terminal_keeps_variance(self):
        # the optimal bridge drift for the base's own terminal law is u == 0,
        # so pretraining must keep simulated terminal variance near nu1
        geom, base, energy, cost, pol, theta = _setup()
        rng = np.random.default_rng(17)
        dataset = base.sample_terminal(10_000, rng)
        theta2, losses = bridge_matching_pretrain(pol, theta, dataset, base,
                                                  steps=400, batch=128, seed=3,
                                                  lr=1e-3)
        run = simulate(pol, theta2, base, 200, 20_000, seed=8)
        nu1 = base.schedule.nu1
        assert abs(run.x1.var() - nu1) <= 0.1 * nu1

    def test_posterior_regression_targets(self):
        # with u == 0 the per-sample loss is ||X1 - X_t||^2 in expectation
        geom, base, energy, cost, pol, theta = _setup()
        rng = np.random.default_rng(21)
        dataset = rng.standard_normal((64, 2))
        _, losses = bridge_matching_pretrain(pol, theta, dataset, base,
                                             steps=1, batch=256, seed=5, lr=0.0)
        assert losses[0] > 0.0 and np.isfinite(losses[0])
