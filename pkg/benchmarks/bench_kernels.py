#!/usr/bin/env python3
"""Compare the numba kernel builds against the pure-numpy fallbacks.

Runs each hot kernel through both paths (selected via the same switch the
library uses) and prints a timing table plus the max deviation between the
two results.  Usage: python3 benchmarks/bench_kernels.py [--repeats N]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from adj_sampler import _backend
from adj_sampler.base_process import BaseProcess, GeometrySpec, NoiseSchedule
from adj_sampler.control_net import EquivariantPolicy, MlpPolicy, loss_gradient
from adj_sampler.energy import DoubleWell4Energy, LennardJonesEnergy
from adj_sampler.metrics import aligned_sq_dists
from adj_sampler.sde import simulate


def timed(fn, repeats):
    fn()  # warm up (includes JIT compilation on the numba path)
    t0 = time.perf_counter()
    for _ in range(repeats):
        out = fn()
    return (time.perf_counter() - t0) / repeats, out


def bench_case(name, fn, repeats, rows):
    results = {}
    for use_nb in (False, True) if _backend.HAS_NUMBA else (False,):
        _backend.set_use_numba(use_nb)
        results[use_nb] = timed(fn, repeats)
    t_np = results[False][0]
    if _backend.HAS_NUMBA:
        t_nb = results[True][0]
        out_np, out_nb = results[False][1], results[True][1]
        dev = float(np.max(np.abs(np.asarray(out_np) - np.asarray(out_nb))))
        rows.append((name, t_np * 1e3, t_nb * 1e3, t_np / t_nb, dev))
    else:
        rows.append((name, t_np * 1e3, float("nan"), float("nan"), 0.0))


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()
    rng = np.random.default_rng(0)
    rows = []

    # batched pairwise energies
    dw4 = DoubleWell4Energy()
    x_dw = (4.0 * np.arange(4)[:, None] * np.eye(2)[0]
            + 0.5 * rng.standard_normal((4096, 4, 2))).reshape(4096, 8)
    bench_case("dw4 gradient (4096)", lambda: dw4.gradient_many(x_dw), args.repeats, rows)
    lj = LennardJonesEnergy(k=13, conventional_sign=True)
    x_lj = (2.0 * rng.standard_normal((2048, 39)))
    bench_case("lj13 gradient (2048)", lambda: lj.gradient_many(x_lj), args.repeats, rows)

    # MLP rollout (fused kernel vs per-step numpy loop)
    geom = GeometrySpec("euclidean", 1, 2)
    base = BaseProcess(NoiseSchedule("constant", sigma=1.0), geom)
    mlp = MlpPolicy(geom, layers=2, hidden=64, time_freqs=8)
    th_mlp = mlp.init_params(rng) + rng.normal(0, 0.05, mlp.n_params)
    bench_case("mlp rollout 256x500",
               lambda: simulate(mlp, th_mlp, base, 500, 256, seed=3).x1,
               args.repeats, rows)

    # equivariant net forward/backward
    gz = GeometrySpec("zero_com", k=4, d=2)
    bz = BaseProcess(NoiseSchedule("geometric", sigma_min=1e-4, sigma_max=3.0), gz)
    egnn = EquivariantPolicy(gz, layers=3, hidden=128, message=64, time_freqs=8)
    th = egnn.init_params(rng) + rng.normal(0, 0.02, egnn.n_params)
    xz = gz.project(rng.standard_normal((256, 8)))
    tz = rng.uniform(0.05, 0.95, 256)
    tgt = gz.project(rng.standard_normal((256, 8)))
    bench_case("egnn forward (256)", lambda: egnn.forward(th, xz, tz), args.repeats, rows)
    bench_case("egnn loss+grad (256)",
               lambda: loss_gradient(egnn, th, xz, tz, tgt, 1.0, 1.0)[1],
               args.repeats, rows)
    bench_case("egnn rollout 128x200",
               lambda: simulate(egnn, th, bz, 200, 128, seed=5).x1,
               max(1, args.repeats // 2), rows)

    # torus posterior shift sampling
    gt = GeometrySpec("torus", k=8, d=1, k_trunc=6)
    bt = BaseProcess(NoiseSchedule("constant", sigma=1.0), gt)
    x1_t = bt.sample_terminal(20_000, rng)

    def torus_post():
        r = np.random.default_rng(9)
        return bt.posterior_sample(r.uniform(0.05, 0.95, 20_000), x1_t, r)

    bench_case("torus posterior (20k)", torus_post, args.repeats, rows)

    # aligned-distance matrix (the geometric-W2 ground cost)
    clouds_a = gz.project(rng.standard_normal((64, 8)))
    clouds_b = gz.project(rng.standard_normal((64, 8)))
    bench_case("align matrix 64x64",
               lambda: aligned_sq_dists(clouds_a, clouds_b, 4, 2),
               max(1, args.repeats // 2), rows)

    print(f"\n{'kernel':<26}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}{'max dev':>12}")
    for name, t_np, t_nb, speedup, dev in rows:
        print(f"{name:<26}{t_np:>12.2f}{t_nb:>12.2f}{speedup:>10.1f}{dev:>12.2e}")


if __name__ == "__main__":
    main()
