"""Flat key-value experiment configuration.

The on-disk format is plain text, one ``dotted.key = value`` per line, with
``#`` comments.  Command lines may override any key with ``--dotted.key=value``.
Unknown keys are rejected.  Every run writes its fully resolved configuration
(defaults expanded) next to its artifacts so a run can be reproduced from the
artifact directory alone.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

from .errors import ConfigError

_NONE_WORDS = ("none", "null", "")

# key -> (default, type tag)
# type tags: int, float, bool, str, float?, str?, int?
DEFAULTS: dict[str, tuple[object, str]] = {
    "run.seed": (0, "int"),
    "run.out": ("run_out", "str"),
    "run.threads": (0, "int"),
    # energy -----------------------------------------------------------------
    "energy.kind": ("gaussian", "str"),
    "energy.tau": (1.0, "float"),
    "energy.a": (0.0, "float"),
    "energy.b": (-4.0, "float"),
    "energy.c": (0.9, "float"),
    "energy.d0": (4.0, "float"),
    "energy.k": (13, "int"),
    "energy.r_m": (1.0, "float"),
    "energy.eps": (1.0, "float"),
    "energy.osc_scale": (1.0, "float"),
    "energy.lj_conventional_sign": (False, "bool"),
    "energy.scale": (1.0, "float"),
    "energy.well_depth": (1.0, "float"),
    "energy.clip_norm": (None, "float?"),
    # base process -------------------------------------------------------------
    "schedule.kind": ("constant", "str"),
    "schedule.sigma": (1.0, "float"),
    "schedule.sigma_min": (1e-4, "float"),
    "schedule.sigma_max": (3.0, "float"),
    "geometry.kind": ("euclidean", "str"),
    "geometry.k": (1, "int"),
    "geometry.d": (2, "int"),
    "geometry.k_trunc": (6, "int"),
    # control network ----------------------------------------------------------
    "net.kind": ("mlp", "str"),
    "net.layers": (2, "int"),
    "net.hidden": (64, "int"),
    "net.message": (64, "int"),
    "net.time_freqs": (8, "int"),
    # SDE simulation -----------------------------------------------------------
    "sde.steps": (1000, "int"),
    "sde.batch": (1024, "int"),
    "sde.seed": (None, "int?"),
    "sde.accumulate_weights": (False, "bool"),
    # replay buffer --------------------------------------------------------------
    "buffer.capacity": (10000, "int"),
    "buffer.ablation_trace_count": (8, "int"),
    # training -------------------------------------------------------------------
    "train.outer": (100, "int"),
    "train.n": (256, "int"),
    "train.inner": (100, "int"),
    "train.m": (256, "int"),
    "train.lr": (3e-4, "float"),
    "train.beta1": (0.9, "float"),
    "train.beta2": (0.999, "float"),
    "train.eps_opt": (1e-8, "float"),
    "train.lambda_weighting": (True, "bool"),
    "train.ablation_no_rp": (False, "bool"),
    "train.seed": (None, "int?"),
    "pretrain.steps": (2000, "int"),
    "pretrain.batch": (256, "int"),
    "pretrain.lr": (3e-4, "float"),
    "pretrain.dataset": (None, "str?"),
    "pretrain.seed": (None, "int?"),
    # MCMC reference ----------------------------------------------------------
    "mcmc.step_size": (0.05, "float"),
    "mcmc.chains": (32, "int"),
    "mcmc.burn_in": (10000, "int"),
    "mcmc.thin": (10, "int"),
    "mcmc.samples": (100000, "int"),
    "mcmc.init_dispersion": (1.0, "float"),
    "mcmc.autotune": (True, "bool"),
    "mcmc.checkpoint_every": (0, "int"),
    "mcmc.seed": (None, "int?"),
    # evaluation ----------------------------------------------------------------
    "eval.samples": (1000, "int"),
    "eval.include_reflections": (False, "bool"),
    "eval.seed": (None, "int?"),
}

_CHOICES = {
    "energy.kind": ("dw4", "lj", "gaussian", "torus_dw"),
    "schedule.kind": ("constant", "geometric"),
    "geometry.kind": ("euclidean", "zero_com", "torus"),
    "net.kind": ("mlp", "equivariant"),
}

PRESETS: dict[str, dict[str, object]] = {
    # Synthetic n-particle presets carry the published training scales; the
    # gaussian-check and torus-dw presets are closed-form validation targets.
    "dw4": {
        "energy.kind": "dw4",
        "energy.tau": 1.0,
        "energy.d0": 4.0,
        "geometry.kind": "zero_com",
        "geometry.k": 4,
        "geometry.d": 2,
        "net.kind": "equivariant",
        "net.layers": 3,
        "net.hidden": 128,
        "schedule.kind": "geometric",
        "schedule.sigma_min": 1e-4,
        "schedule.sigma_max": 3.0,
        "sde.steps": 1000,
        "buffer.capacity": 10000,
        "train.outer": 1000,
        "train.n": 512,
        "train.inner": 500,
        "train.m": 512,
        "train.lr": 3e-4,
    },
    "lj13": {
        "energy.kind": "lj",
        "energy.k": 13,
        "energy.tau": 1.0,
        "geometry.kind": "zero_com",
        "geometry.k": 13,
        "geometry.d": 3,
        "net.kind": "equivariant",
        "net.layers": 5,
        "net.hidden": 128,
        "schedule.kind": "geometric",
        "schedule.sigma_min": 1e-3,
        "schedule.sigma_max": 3.0,
        "sde.steps": 1000,
        "buffer.capacity": 10000,
        "train.outer": 1000,
        "train.n": 1024,
        "train.inner": 500,
        "train.m": 512,
        "train.lr": 3e-4,
    },
    "lj55": {
        "energy.kind": "lj",
        "energy.k": 55,
        "energy.tau": 1.0,
        "geometry.kind": "zero_com",
        "geometry.k": 55,
        "geometry.d": 3,
        "net.kind": "equivariant",
        "net.layers": 5,
        "net.hidden": 128,
        "schedule.kind": "geometric",
        "schedule.sigma_min": 0.5,
        "schedule.sigma_max": 3.0,
        "sde.steps": 1000,
        "buffer.capacity": 10000,
        "train.outer": 1000,
        "train.n": 128,
        "train.inner": 500,
        "train.m": 512,
        "train.lr": 3e-4,
    },
    "gaussian-check": {
        "energy.kind": "gaussian",
        "energy.scale": 2.0,
        "geometry.kind": "euclidean",
        "geometry.k": 1,
        "geometry.d": 2,
        "net.kind": "mlp",
        "net.layers": 2,
        "net.hidden": 64,
        "schedule.kind": "constant",
        "schedule.sigma": 1.0,
        "sde.steps": 1000,
        "buffer.capacity": 10000,
        "train.outer": 2000,
        "train.n": 256,
        "train.inner": 16,
        "train.m": 256,
        "train.lr": 1e-3,
    },
    "torus-dw": {
        "energy.kind": "torus_dw",
        "energy.well_depth": 1.0,
        "geometry.kind": "torus",
        "geometry.k": 2,
        "geometry.d": 1,
        "geometry.k_trunc": 6,
        "net.kind": "mlp",
        "net.layers": 2,
        "net.hidden": 64,
        "schedule.kind": "constant",
        "schedule.sigma": 1.0,
        "sde.steps": 500,
        "train.outer": 200,
        "train.n": 256,
        "train.inner": 20,
        "train.m": 256,
        "train.lr": 1e-3,
    },
}


def _coerce(key: str, raw: object) -> object:
    _, tag = DEFAULTS[key]
    if isinstance(raw, str):
        text = raw.strip()
        if tag.endswith("?") and text.lower() in _NONE_WORDS:
            return None
        try:
            if tag in ("int", "int?"):
                return int(text)
            if tag in ("float", "float?"):
                return float(text)
            if tag == "bool":
                low = text.lower()
                if low in ("true", "1", "yes", "on"):
                    return True
                if low in ("false", "0", "no", "off"):
                    return False
                raise ValueError(text)
            return text
        except ValueError as exc:
            raise ConfigError(f"cannot parse value {text!r} for {key} as {tag}", key=key) from exc
    if raw is None and tag.endswith("?"):
        return None
    if tag in ("int", "int?") and isinstance(raw, bool):
        raise ConfigError(f"bad type for {key}", key=key)
    if tag in ("int", "int?") and isinstance(raw, int):
        return raw
    if tag in ("float", "float?") and isinstance(raw, (int, float)):
        return float(raw)
    if tag == "bool" and isinstance(raw, bool):
        return raw
    if tag in ("str", "str?") and isinstance(raw, str):
        return raw
    raise ConfigError(f"bad type for {key}: {raw!r}", key=key)


def _validate(cfg: dict[str, object]) -> None:
    for key, choices in _CHOICES.items():
        if cfg[key] not in choices:
            raise ConfigError(
                f"{key} must be one of {choices}, got {cfg[key]!r}", key=key
            )
    positive = (
        "energy.tau", "schedule.sigma", "schedule.sigma_min", "schedule.sigma_max",
        "train.lr", "pretrain.lr", "mcmc.step_size", "energy.scale",
    )
    for key in positive:
        if not cfg[key] > 0:
            raise ConfigError(f"{key} must be > 0", key=key)
    at_least_one = (
        "geometry.k", "geometry.d", "net.layers", "net.hidden", "net.time_freqs",
        "sde.steps", "sde.batch", "buffer.capacity", "train.n", "train.m",
        "mcmc.chains", "eval.samples", "energy.k",
    )
    for key in at_least_one:
        if cfg[key] < 1:
            raise ConfigError(f"{key} must be >= 1", key=key)
    for key in ("train.outer", "train.inner", "mcmc.burn_in", "geometry.k_trunc"):
        if cfg[key] < 0:
            raise ConfigError(f"{key} must be >= 0", key=key)


def parse_file(path: str | Path) -> dict[str, object]:
    """Parse a config file into a raw {key: value} dict (no defaults)."""
    out: dict[str, object] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, value = stripped.split("=", 1)
        key = key.strip()
        if key not in DEFAULTS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}", key=key)
        out[key] = _coerce(key, value)
    return out


def parse_overrides(pairs: list[str]) -> dict[str, object]:
    """Parse ``--key=value`` (or ``key=value``) command line overrides."""
    out: dict[str, object] = {}
    for pair in pairs:
        item = pair.lstrip("-")
        if "=" not in item:
            raise ConfigError(f"override {pair!r} is not of the form key=value")
        key, value = item.split("=", 1)
        key = key.strip()
        if key not in DEFAULTS:
            raise ConfigError(f"unknown key {key!r}", key=key)
        out[key] = _coerce(key, value)
    return out


def resolve(
    preset: str | None = None,
    file: str | Path | None = None,
    overrides: list[str] | None = None,
) -> dict[str, object]:
    """Build the fully resolved config: defaults < preset < file < overrides."""
    cfg = {key: default for key, (default, _) in DEFAULTS.items()}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        cfg.update(PRESETS[preset])
    if file is not None:
        cfg.update(parse_file(file))
    if overrides:
        cfg.update(parse_overrides(overrides))
    _validate(cfg)
    return cfg


def seed_for(cfg: dict[str, object], key: str) -> int:
    """Module seed, falling back to the global run seed."""
    value = cfg.get(key)
    return int(cfg["run.seed"]) if value is None else int(value)


def _format_value(value: object) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def serialize(cfg: dict[str, object]) -> str:
    lines = [f"{key} = {_format_value(cfg[key])}" for key in sorted(cfg)]
    return "\n".join(lines) + "\n"


def write_resolved(cfg: dict[str, object], path: str | Path) -> None:
    Path(path).write_text(serialize(cfg))


def load_resolved(path: str | Path) -> dict[str, object]:
    cfg = resolve(file=path)
    present = parse_file(path)
    missing = set(DEFAULTS) - set(present)
    if missing:
        raise ConfigError(f"resolved config {path} is missing keys: {sorted(missing)[:5]} ...")
    return cfg


def config_hash(cfg: dict[str, object]) -> str:
    return hashlib.sha256(serialize(cfg).encode()).hexdigest()
