from fractions import Fraction

import pytest

from poisonbrew.config import (ConfigError, ExperimentConfig, as_dict, from_ini, load_config, save_config,
                               to_ini, with_overrides)


def test_default_round_trip():
    cfg = ExperimentConfig()
    assert from_ini(to_ini(cfg)) == cfg


def test_round_trip_of_changed_values(tmp_path):
    cfg = with_overrides(ExperimentConfig(), {
        "seed": "7", "model.width_scale": "3/16", "brew.dp_counter.sigma": "0.05",
        "brew.dp_counter.enabled": "true", "eval.dp_sigmas": "0, 0.1", "train.drop_epochs": "1, 2",
        "train.epochs": "4", "threat.eps_pixels": "8", "dataset.texture": "0.1"})
    assert cfg.model.width_scale == Fraction(3, 16)
    assert cfg.brew.dp_counter.enabled and cfg.brew.dp_counter.sigma == 0.05
    assert cfg.eval.dp_sigmas == (0.0, 0.1) and cfg.train.drop_epochs == (1, 2)
    save_config(tmp_path / "c.ini", cfg)
    assert load_config(tmp_path / "c.ini") == cfg


def test_float_values_survive_exactly():
    cfg = with_overrides(ExperimentConfig(), {"train.lr": 0.1 + 0.2})
    assert from_ini(to_ini(cfg)).train.lr == 0.1 + 0.2


def test_partial_file_keeps_defaults():
    cfg = from_ini("[brew]\nsteps = 7\n")
    assert cfg.brew.steps == 7 and cfg.brew.restarts == ExperimentConfig().brew.restarts


@pytest.mark.parametrize("text, match", [
    ("[brew]\nstepz = 7\n", "brew.stepz"),
    ("[nope]\nx = 1\n", "nope"),
    ("[brew]\nsteps = seven\n", "brew.steps"),
    ("[train]\ndrop_epochs = 9, 3\n", "train"),
    ("[dataset]\nsource = imagenet\n", "dataset"),
    ("not an ini", "malformed"),
])
def test_errors_name_the_field(text, match):
    with pytest.raises(ConfigError, match=match):
        from_ini(text)


def test_unknown_override():
    with pytest.raises(ConfigError, match="unknown"):
        with_overrides(ExperimentConfig(), {"brew.nope": 1})


def test_as_dict_is_flat_and_json_friendly():
    import json
    d = as_dict(ExperimentConfig())
    assert d["model.width_scale"] == "1/8" and d["brew.dp_counter.clip"] == 1.0
    json.dumps(d)
