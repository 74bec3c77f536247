"""Builders for the heavy acceptance artifacts (trained models, references).

Every builder is deterministic and idempotent: artifacts land in a cache
directory keyed by the resolved config hash, with a DONE marker written only
after success.  Running this module as a script pre-builds everything so the
acceptance tests only need to verify; a cold cache makes the tests build on
demand instead.

Cache location: $ADJ_SAMPLER_ACCEPT_CACHE or <repo>/.acceptance_cache.
"""

from __future__ import annotations

import json
import os
import sys
from pathlib import Path

import numpy as np

from adj_sampler import artifacts, config as config_mod
from adj_sampler.cli import main as cli_main

REPO_ROOT = Path(__file__).resolve().parent.parent

GAUSSIAN_SCALE = 2.0
GAUSS_SEED = 0
DW4_DESK = ["--train.outer=300", "--train.n=256", "--train.inner=200",
            "--train.m=256"]
DW4_SEEDS = (0, 1, 2)
LJ13_DESK = ["--energy.lj_conventional_sign=true", "--train.outer=100",
             "--train.n=64", "--train.inner=20", "--train.m=64",
             "--net.layers=3", "--net.hidden=64", "--net.message=32",
             "--train.seed=0"]
SAMPLE_ARGS = ["--sde.batch=1000", "--sde.accumulate_weights=true", "--sde.seed=777"]


def cache_dir() -> Path:
    root = os.environ.get("ADJ_SAMPLER_ACCEPT_CACHE", str(REPO_ROOT / ".acceptance_cache"))
    path = Path(root)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _done(path: Path) -> Path:
    return path / "DONE"


def _run_cached(out: Path, argv: list[str]) -> Path:
    """Run a CLI command into ``out`` unless a finished run is already there."""
    if _done(out).exists():
        return out
    rc = cli_main(argv + ["--out", str(out)])
    if rc != 0:
        raise RuntimeError(f"command failed ({rc}): {' '.join(argv)}")
    _done(out).write_text("ok\n")
    return out


def ensure_gaussian_train(tag="c1", outer=2000, init: Path | None = None,
                          seed: int = GAUSS_SEED) -> Path:
    out = cache_dir() / f"gaussian_{tag}"
    argv = ["train", "--preset", "gaussian-check",
            f"--train.outer={outer}", f"--train.seed={seed}"]
    if init is not None:
        argv += ["--init", str(init)]
    return _run_cached(out, argv)


def ensure_gaussian_samples(train_dir: Path, tag: str, batch=4096) -> Path:
    out = cache_dir() / f"gaussian_samples_{tag}"
    return _run_cached(out, [
        "sample", "--preset", "gaussian-check",
        "--checkpoint", str(train_dir / "theta"),
        f"--sde.batch={batch}", "--sde.accumulate_weights=true", "--sde.seed=777"])


def ensure_pretrain_dataset() -> Path:
    out = cache_dir() / "pretrain_dataset"
    out.mkdir(exist_ok=True)
    base_path = out / "samples"
    if not _done(out).exists():
        # 1e4 draws from the base terminal marginal N(0, nu1 I), nu1 = 1
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(1234)))
        data = rng.standard_normal((10_000, 2))
        artifacts.write_samples(base_path, data, {"kind": "base_terminal_dataset"})
        _done(out).write_text("ok\n")
    return base_path


def ensure_pretrained_checkpoint() -> Path:
    dataset = ensure_pretrain_dataset()
    out = cache_dir() / "pretrain_ckpt"
    return _run_cached(out, [
        "pretrain", "--preset", "gaussian-check",
        f"--pretrain.dataset={dataset}", "--pretrain.steps=2000",
        "--pretrain.batch=256", "--pretrain.lr=1e-3", "--pretrain.seed=11"])


def ensure_dw4_train(seed: int, ablation: bool) -> Path:
    mode = "ablation" if ablation else "ram"
    out = cache_dir() / f"dw4_{mode}_seed{seed}"
    argv = ["train", "--preset", "dw4", *DW4_DESK, f"--train.seed={seed}"]
    if ablation:
        argv.append("--train.ablation_no_rp=true")
    return _run_cached(out, argv)


def ensure_dw4_samples(train_dir: Path, tag: str) -> Path:
    out = cache_dir() / f"dw4_samples_{tag}"
    return _run_cached(out, [
        "sample", "--preset", "dw4", "--checkpoint", str(train_dir / "theta"),
        *SAMPLE_ARGS])


def ensure_dw4_reference() -> Path:
    out = cache_dir() / "dw4_reference"
    return _run_cached(out, [
        "mcmc-reference", "--preset", "dw4", "--mcmc.samples=100000",
        "--mcmc.chains=32", "--mcmc.burn_in=10000", "--mcmc.thin=10",
        "--mcmc.seed=99", "--mcmc.init_dispersion=1.5"])


def ensure_lj13_train() -> Path:
    out = cache_dir() / "lj13_smoke"
    return _run_cached(out, ["train", "--preset", "lj13", *LJ13_DESK])


def ensure_lj13_samples(checkpoint: Path, tag: str) -> Path:
    out = cache_dir() / f"lj13_samples_{tag}"
    return _run_cached(out, [
        "sample", "--preset", "lj13", "--energy.lj_conventional_sign=true",
        "--checkpoint", str(checkpoint), "--sde.batch=512", "--sde.seed=31"])


def ensure_lj13_untrained_checkpoint() -> Path:
    """Freshly initialized LJ-13 policy (u == 0): the untrained baseline."""
    from adj_sampler.base_process import GeometrySpec
    from adj_sampler.control_net import build_policy, save_checkpoint

    out = cache_dir() / "lj13_untrained"
    out.mkdir(exist_ok=True)
    if not _done(out).exists():
        cfg = config_mod.resolve(preset="lj13", overrides=LJ13_DESK)
        geom = GeometrySpec("zero_com", k=13, d=3)
        policy = build_policy(cfg, geom)
        theta = policy.init_params(np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(0))))
        save_checkpoint(out / "theta", theta, policy)
        _done(out).write_text("ok\n")
    return out


def build_all(progress=lambda m: print(m, flush=True)):
    progress("[1/9] gaussian closed-form training (2000 outer)")
    c1 = ensure_gaussian_train()
    ensure_gaussian_samples(c1, "c1")
    progress("[2/9] bridge-matching pretrain + fine-tune (1000 outer)")
    pre = ensure_pretrained_checkpoint()
    c5 = ensure_gaussian_train(tag="c5_finetune", outer=1000, init=pre / "theta")
    ensure_gaussian_samples(c5, "c5")
    progress("[3/9] LJ-13 smoke training (100 outer)")
    lj = ensure_lj13_train()
    ensure_lj13_samples(lj / "theta", "trained")
    ensure_lj13_samples(ensure_lj13_untrained_checkpoint() / "theta", "untrained")
    progress("[4/9] DW-4 MALA reference (1e5 samples)")
    ensure_dw4_reference()
    for i, seed in enumerate(DW4_SEEDS):
        progress(f"[{5 + i}/9] DW-4 RAM training, seed {seed} (300 outer)")
        run = ensure_dw4_train(seed, ablation=False)
        ensure_dw4_samples(run, f"ram_seed{seed}")
    for i, seed in enumerate(DW4_SEEDS):
        progress(f"[{8 + i // 2}/9] DW-4 ablation training, seed {seed} (300 outer)")
        run = ensure_dw4_train(seed, ablation=True)
        ensure_dw4_samples(run, f"ablation_seed{seed}")
    progress("acceptance artifacts complete")


if __name__ == "__main__":
    build_all()
