import pytest

from gentrain.config import ConfigError, ExperimentConfig, dumps_config, load_config, loads_config, save_config

MINIMAL = """\
seeds: [0, 1]
world:
  master_seed: 3
data:
  epoch_size: 200
train:
  epochs: 5
"""


def test_minimal_config_fills_defaults():
    cfg = loads_config(MINIMAL)
    assert cfg.seeds == (0, 1)
    assert cfg.world.master_seed == 3 and cfg.world.truncation == 0.5
    assert cfg.data.epoch_size == 200 and cfg.train.epochs == 5
    assert cfg.train.lr == 0.1 and cfg.classifier.bn_alpha == 0.1


def test_round_trip(tmp_path):
    cfg = loads_config(MINIMAL + "methods:\n  hsm: true\n  replacement_fraction: 0.2\n")
    save_config(cfg, tmp_path / "c.yaml")
    assert load_config(tmp_path / "c.yaml") == cfg
    assert loads_config(dumps_config(ExperimentConfig())) == ExperimentConfig()


def test_fingerprint_ignores_key_order_and_output_dir():
    reordered = """\
train:
  epochs: 5
data:
  epoch_size: 200
world:
  master_seed: 3
seeds: [0, 1]
output_dir: elsewhere
"""
    assert loads_config(MINIMAL).fingerprint() == loads_config(reordered).fingerprint()
    changed = loads_config(MINIMAL.replace("epochs: 5", "epochs: 6"))
    assert changed.fingerprint() != loads_config(MINIMAL).fingerprint()


def test_unknown_keys_reported_with_location():
    text = MINIMAL + "trian:\n  epochs: 3\nworld_extra: 1\n"
    text = text.replace("  master_seed: 3", "  master_seed: 3\n  trunction: 0.5")
    with pytest.raises(ConfigError) as err:
        loads_config(text, "exp.yaml")
    msg = str(err.value)
    assert "exp.yaml:4:3: unknown key world.'trunction'" in msg
    assert "'trian'" in msg and "'world_extra'" in msg


def test_all_missing_required_keys_listed_at_once():
    with pytest.raises(ConfigError) as err:
        loads_config("output_dir: x\n")
    msg = str(err.value)
    for key in ("seeds", "world.master_seed", "data.epoch_size", "train.epochs"):
        assert key in msg


def test_yaml_style_float_strings_accepted():
    cfg = loads_config(MINIMAL + "classifier:\n  bn_eps: 1e-5\n")
    assert cfg.classifier.bn_eps == 1e-5


def test_invalid_values_rejected():
    with pytest.raises(ConfigError):
        loads_config(MINIMAL + "sweep:\n  r_grid: [0, 2]\n")
    with pytest.raises(ConfigError):
        loads_config(MINIMAL.replace("seeds: [0, 1]", "seeds: []"))
    with pytest.raises(ConfigError):
        loads_config("[1, 2]\n")
