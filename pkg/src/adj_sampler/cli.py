"""Command-line entry point: train / pretrain / sample / mcmc-reference / evaluate.

Configuration precedence is presets < config file < ``--key=value`` overrides.
Every run writes its fully resolved config, a manifest with checksums, and the
command's artifacts under ``--out``.  Exit codes: 0 success, 1 runtime abort
(with a structured error report), 2 configuration errors (with the offending
key path).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import artifacts, config as config_mod
from .base_process import BaseProcess, GeometrySpec, NoiseSchedule
from .buffer import ReplayBuffer
from .control_net import build_policy, load_checkpoint, save_checkpoint
from .energy import TerminalCost, build_energy
from .errors import ConfigError
from .metrics import MetricReport, energy_w2, geometric_w2, path_ess
from .reference import MalaConfig, mala_sample
from .sde import path_log_weight, simulate
from .trainer import bridge_matching_pretrain, outer_loop

EVAL_CSV_HEADER = ["model", "reference", "geometric_w2", "energy_w2", "path_ess",
                   "n_model", "n_reference", "config_hash"]


def _apply_thread_cap(cfg) -> None:
    n = int(cfg["run.threads"]) or int(os.environ.get("ADJ_SAMPLER_THREADS", "0") or 0)
    if n <= 0:
        return
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(limits=n)
    except Exception:  # pragma: no cover - cap is best effort
        pass
    try:
        import numba

        numba.set_num_threads(max(1, n))
    except Exception:  # pragma: no cover
        pass


def _components(cfg):
    geometry = GeometrySpec(kind=cfg["geometry.kind"], k=cfg["geometry.k"],
                            d=cfg["geometry.d"], k_trunc=cfg["geometry.k_trunc"])
    schedule = NoiseSchedule(kind=cfg["schedule.kind"], sigma=cfg["schedule.sigma"],
                             sigma_min=cfg["schedule.sigma_min"],
                             sigma_max=cfg["schedule.sigma_max"])
    base = BaseProcess(schedule, geometry)
    energy = build_energy(cfg, geometry.dim)
    cost = TerminalCost(energy, base, clip_norm=cfg["energy.clip_norm"])
    return geometry, base, energy, cost


def _prepare_out(cfg, out: str) -> Path:
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    config_mod.write_resolved(cfg, out_dir / "resolved.cfg")
    return out_dir


def _finish(cfg, out_dir: Path, seed: int) -> None:
    artifacts.write_manifest(out_dir, seed, config_mod.config_hash(cfg))


def _schedule_sidecar(cfg):
    return {
        "geometry": {"kind": cfg["geometry.kind"], "k": cfg["geometry.k"],
                     "d": cfg["geometry.d"], "k_trunc": cfg["geometry.k_trunc"]},
        "schedule": {"kind": cfg["schedule.kind"], "sigma": cfg["schedule.sigma"],
                     "sigma_min": cfg["schedule.sigma_min"],
                     "sigma_max": cfg["schedule.sigma_max"]},
    }


def cmd_train(cfg, out: str, init: str | None = None) -> int:
    out_dir = _prepare_out(cfg, out)
    geometry, base, energy, cost = _components(cfg)
    policy = build_policy(cfg, geometry)
    seed = config_mod.seed_for(cfg, "train.seed")
    if init:
        _, theta, _ = load_checkpoint(init)
        if theta.shape[0] != policy.n_params:
            raise ConfigError("--init checkpoint does not match net.* configuration",
                              key="net.kind")
    else:
        theta = policy.init_params(np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(seed))))
    buffer = ReplayBuffer(cfg["buffer.capacity"], geometry.dim,
                          trace_count=cfg["buffer.ablation_trace_count"]
                          if cfg["train.ablation_no_rp"] else 0)
    result = outer_loop(
        policy, theta, base, cost, buffer,
        outer=cfg["train.outer"], n=cfg["train.n"], inner=cfg["train.inner"],
        m=cfg["train.m"], seed=seed, sde_steps=cfg["sde.steps"],
        lr=cfg["train.lr"], beta1=cfg["train.beta1"], beta2=cfg["train.beta2"],
        eps_opt=cfg["train.eps_opt"],
        lambda_weighting=cfg["train.lambda_weighting"],
        ablation=cfg["train.ablation_no_rp"])
    save_checkpoint(out_dir / "theta", result.theta, policy)
    for row in result.curve:
        artifacts.append_csv_row(
            out_dir / "curve.csv",
            ["outer_iter", "mean_loss", "energy_evals_cum", "grad_updates_cum", "wall_seconds"],
            list(row))
    artifacts.write_json(out_dir / "train_summary.json", {
        "energy_grad_evals": result.energy_grad_evals,
        "grad_updates": result.grad_updates,
        "outer": cfg["train.outer"], "n": cfg["train.n"],
    })
    _finish(cfg, out_dir, seed)
    return 0


def cmd_pretrain(cfg, out: str) -> int:
    out_dir = _prepare_out(cfg, out)
    geometry, base, energy, cost = _components(cfg)
    policy = build_policy(cfg, geometry)
    seed = config_mod.seed_for(cfg, "pretrain.seed")
    if not cfg["pretrain.dataset"]:
        raise ConfigError("pretrain requires pretrain.dataset", key="pretrain.dataset")
    dataset, _, _ = artifacts.read_samples(cfg["pretrain.dataset"])
    theta = policy.init_params(np.random.Generator(
        np.random.PCG64(np.random.SeedSequence(seed))))
    theta, losses = bridge_matching_pretrain(
        policy, theta, dataset, base, steps=cfg["pretrain.steps"],
        batch=cfg["pretrain.batch"], seed=seed, lr=cfg["pretrain.lr"],
        beta1=cfg["train.beta1"], beta2=cfg["train.beta2"], eps_opt=cfg["train.eps_opt"])
    save_checkpoint(out_dir / "theta", theta, policy)
    artifacts.write_json(out_dir / "pretrain_summary.json", {
        "steps": cfg["pretrain.steps"],
        "final_loss": float(losses[-1]) if len(losses) else None,
    })
    _finish(cfg, out_dir, seed)
    return 0


def cmd_sample(cfg, out: str, checkpoint: str) -> int:
    out_dir = _prepare_out(cfg, out)
    geometry, base, energy, cost = _components(cfg)
    policy, theta, meta = load_checkpoint(checkpoint)
    if policy.geometry.dim != geometry.dim:
        raise ConfigError("checkpoint geometry does not match config", key="geometry.kind")
    seed = config_mod.seed_for(cfg, "sde.seed")
    run = simulate(policy, theta, base, cfg["sde.steps"], cfg["sde.batch"], seed,
                   accumulate_weights=cfg["sde.accumulate_weights"])
    log_w = None
    if cfg["sde.accumulate_weights"]:
        log_w = path_log_weight(run, cost)
    sidecar = _schedule_sidecar(cfg)
    sidecar.update({"seed": seed, "checkpoint_sha256": meta.get("sha256", ""),
                    "kind": "model_samples", "sde_steps": cfg["sde.steps"]})
    artifacts.write_samples(out_dir / "samples", run.x1, sidecar, log_weights=log_w)
    _finish(cfg, out_dir, seed)
    return 0


def cmd_mcmc_reference(cfg, out: str, resume: bool) -> int:
    out_dir = _prepare_out(cfg, out)
    geometry, base, energy, cost = _components(cfg)
    seed = config_mod.seed_for(cfg, "mcmc.seed")
    mcfg = MalaConfig(
        step_size=cfg["mcmc.step_size"], chains=cfg["mcmc.chains"],
        burn_in=cfg["mcmc.burn_in"], thin=cfg["mcmc.thin"],
        samples=cfg["mcmc.samples"], init_dispersion=cfg["mcmc.init_dispersion"],
        autotune=cfg["mcmc.autotune"], seed=seed,
        checkpoint_every=cfg["mcmc.checkpoint_every"],
        checkpoint_path=str(out_dir / "mala_checkpoint.npz")
        if (cfg["mcmc.checkpoint_every"] or resume) else None)
    result = mala_sample(energy, geometry, mcfg)
    sidecar = _schedule_sidecar(cfg)
    sidecar.update({"seed": seed, "kind": "mcmc_reference",
                    "acceptance_rate": result.acceptance_rate,
                    "step_size": result.step_size})
    artifacts.write_samples(out_dir / "samples", result.samples, sidecar)
    artifacts.write_json(out_dir / "mcmc_diagnostics.json", {
        "acceptance_rate": result.acceptance_rate,
        "step_size": result.step_size,
        "chains": cfg["mcmc.chains"], "thin": cfg["mcmc.thin"],
        "burn_in": cfg["mcmc.burn_in"]})
    _finish(cfg, out_dir, seed)
    return 0


def cmd_evaluate(cfg, out: str, model_dump: str, reference_dump: str) -> int:
    out_dir = _prepare_out(cfg, out)
    geometry, base, energy, cost = _components(cfg)
    x_model, meta_model, log_w = artifacts.read_samples(model_dump)
    x_ref, meta_ref, _ = artifacts.read_samples(reference_dump)
    seed = config_mod.seed_for(cfg, "eval.seed")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    n_eval = cfg["eval.samples"]

    def _sub(x):
        if x.shape[0] <= n_eval:
            return x
        return x[rng.choice(x.shape[0], size=n_eval, replace=False)]

    a = _sub(x_model)
    b = _sub(x_ref)
    report = MetricReport(
        geometric_w2=geometric_w2(a, b, geometry.k, geometry.d,
                                  include_reflections=cfg["eval.include_reflections"],
                                  subsample_seed=seed),
        energy_w2=energy_w2(energy.energy_many(a), energy.energy_many(b)),
        path_ess=None if log_w is None else path_ess(log_w),
        n_model=int(a.shape[0]), n_reference=int(b.shape[0]),
        config_hash=config_mod.config_hash(cfg))
    artifacts.write_json(out_dir / "metrics.json", report.as_dict())
    artifacts.append_csv_row(out_dir / "metrics.csv", EVAL_CSV_HEADER, [
        str(model_dump), str(reference_dump), report.geometric_w2,
        report.energy_w2, report.path_ess, report.n_model, report.n_reference,
        report.config_hash])
    _finish(cfg, out_dir, seed)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="adj-sampler",
        description="Train and evaluate diffusion samplers from unnormalized energies")
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--preset", choices=sorted(config_mod.PRESETS), default=None)
    common.add_argument("--config", default=None, help="key = value config file")
    common.add_argument("--out", default=None, help="artifact directory")
    common.add_argument("--threads", type=int, default=0)
    sub.add_parser("train", parents=[common]).add_argument(
        "--init", default=None, help="checkpoint to fine-tune from")
    sub.add_parser("pretrain", parents=[common])
    p_sample = sub.add_parser("sample", parents=[common])
    p_sample.add_argument("--checkpoint", required=True)
    p_ref = sub.add_parser("mcmc-reference", parents=[common])
    p_ref.add_argument("--resume", action="store_true")
    p_eval = sub.add_parser("evaluate", parents=[common])
    p_eval.add_argument("--model", required=True, help="model sample dump (.bin/.json base)")
    p_eval.add_argument("--reference", required=True, help="reference sample dump")
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args, extras = parser.parse_known_args(argv)
    try:
        overrides = [e for e in extras if e.startswith("--") and "=" in e]
        unknown = [e for e in extras if e not in overrides]
        if unknown:
            raise ConfigError(f"unrecognized arguments: {unknown}")
        cfg = config_mod.resolve(preset=args.preset, file=args.config, overrides=overrides)
        if args.threads:
            cfg["run.threads"] = args.threads
        _apply_thread_cap(cfg)
        out = args.out or cfg["run.out"]
        if args.command == "train":
            return cmd_train(cfg, out, init=args.init)
        if args.command == "pretrain":
            return cmd_pretrain(cfg, out)
        if args.command == "sample":
            return cmd_sample(cfg, out, args.checkpoint)
        if args.command == "mcmc-reference":
            return cmd_mcmc_reference(cfg, out, args.resume)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, out, args.model, args.reference)
        raise ConfigError(f"unknown command {args.command}")
    except ConfigError as exc:
        print(f"config error: {exc}" + (f" (key: {exc.key})" if exc.key else ""),
              file=sys.stderr)
        return 2
    except Exception as exc:  # runtime abort with a structured report
        report = {"error": type(exc).__name__, "message": str(exc)}
        step = getattr(exc, "step", None)
        if step is not None:
            report["step"] = step
        print(json.dumps(report), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
