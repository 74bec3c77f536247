import pytest

from adj_sampler import config
from adj_sampler.errors import ConfigError


def test_defaults_resolve_and_validate():
    cfg = config.resolve()
    assert cfg["schedule.kind"] == "constant"
    assert cfg["buffer.capacity"] == 10000
    assert cfg["energy.clip_norm"] is None


def test_parse_file_and_overrides(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("# comment\nenergy.kind = dw4\ntrain.lr = 1e-2\n\nsde.steps=250 # inline\n")
    cfg = config.resolve(file=p, overrides=["--train.n=64", "geometry.kind=zero_com",
                                            "--geometry.k=4"])
    assert cfg["energy.kind"] == "dw4"
    assert cfg["train.lr"] == 0.01
    assert cfg["sde.steps"] == 250
    assert cfg["train.n"] == 64
    assert cfg["geometry.kind"] == "zero_com"


def test_unknown_key_rejected(tmp_path):
    p = tmp_path / "bad.cfg"
    p.write_text("energy.knid = dw4\n")
    with pytest.raises(ConfigError) as err:
        config.resolve(file=p)
    assert err.value.key == "energy.knid"
    with pytest.raises(ConfigError):
        config.resolve(overrides=["--no.such.key=1"])


def test_type_and_choice_validation():
    with pytest.raises(ConfigError):
        config.resolve(overrides=["--train.lr=abc"])
    with pytest.raises(ConfigError):
        config.resolve(overrides=["--schedule.kind=quadratic"])
    with pytest.raises(ConfigError):
        config.resolve(overrides=["--train.lr=-1"])


def test_resolved_round_trip_hash(tmp_path):
    cfg = config.resolve(preset="dw4", overrides=["--train.outer=3"])
    path = tmp_path / "resolved.cfg"
    config.write_resolved(cfg, path)
    reloaded = config.load_resolved(path)
    assert reloaded == cfg
    assert config.config_hash(reloaded) == config.config_hash(cfg)


def test_optional_none_round_trip(tmp_path):
    cfg = config.resolve(overrides=["--energy.clip_norm=none"])
    assert cfg["energy.clip_norm"] is None
    cfg2 = config.resolve(overrides=["--energy.clip_norm=5.0"])
    assert cfg2["energy.clip_norm"] == 5.0


def test_preset_values_match_published_configs():
    dw4 = config.resolve(preset="dw4")
    assert dw4["schedule.kind"] == "geometric"
    assert dw4["schedule.sigma_min"] == 1e-4
    assert dw4["schedule.sigma_max"] == 3.0
    assert dw4["net.layers"] == 3 and dw4["net.hidden"] == 128
    assert dw4["train.n"] == 512 and dw4["buffer.capacity"] == 10000
    assert dw4["train.inner"] == 500 and dw4["train.m"] == 512
    assert dw4["train.lr"] == 3e-4

    lj13 = config.resolve(preset="lj13")
    assert lj13["schedule.sigma_min"] == 1e-3
    assert lj13["net.layers"] == 5
    assert lj13["train.n"] == 1024

    lj55 = config.resolve(preset="lj55")
    assert lj55["schedule.sigma_min"] == 0.5
    assert lj55["train.n"] == 128

    gc = config.resolve(preset="gaussian-check")
    assert gc["net.kind"] == "mlp" and gc["schedule.kind"] == "constant"

    with pytest.raises(ConfigError):
        config.resolve(preset="nope")


def test_seed_fallback():
    cfg = config.resolve(overrides=["--run.seed=7"])
    assert config.seed_for(cfg, "train.seed") == 7
    cfg2 = config.resolve(overrides=["--run.seed=7", "--train.seed=9"])
    assert config.seed_for(cfg2, "train.seed") == 9
