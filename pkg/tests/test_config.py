import pytest

from prplan.config import RunConfig, load_config
from prplan.errors import ConfigurationError


def write(tmp_path, text):
    p = tmp_path / "run.ini"
    p.write_text(text)
    return p


def test_defaults_validate():
    cfg = RunConfig().validate()
    assert cfg.levels.jumps == (32, 8, 1) and cfg.planner.target == 1.0
    assert [lv.as_tuple() for lv in cfg.level_configs()] == [(129, 32, 5), (33, 8, 5), (9, 1, 9)]


def test_file_and_overrides(tmp_path):
    path = write(tmp_path, "[run]\nenv = runner\nseed = 4\n\n[levels]\njumps = 16, 4, 1\nhorizon = 65\n")
    cfg = load_config(path, {"backbone.guidance": "0.5", "planner.select_every_level": "no"})
    assert (cfg.run.env, cfg.run.seed) == ("runner", 4)
    assert cfg.levels.jumps == (16, 4, 1) and cfg.levels.horizon == 65
    assert cfg.backbone.guidance == 0.5 and cfg.planner.select_every_level is False


def test_mode_changes_geometry():
    cfg = load_config(None, {"run.mode": "only-last-level"})
    assert [lv.as_tuple() for lv in cfg.level_configs()] == [(9, 1, 9)]
    cfg = load_config(None, {"run.mode": "one-shot"})
    assert [lv.as_tuple() for lv in cfg.level_configs()] == [(129, 1, 129)]


@pytest.mark.parametrize("overrides", [
    {"run.colour": "red"},
    {"nosuch.key": "1"},
    {"run.seed": "x"},
    {"run.seed": "1.5"},
    {"run.env": "hopper"},
    {"run.mode": "two-shot"},
    {"levels.jumps": "32, 8, 2"},
    {"backbone.kind": "gan"},
    {"critic.kind": "q"},
    {"backbone.keep_prob": "1.5"},
    {"critic.gamma": "0"},
    {"backbone.lr": "0"},
    {"planner.candidates": "0"},
    {"train.steps": "-1"},
    {"backbone.sampling_steps": "2000"},
    {"data.mix": "expert=0.5,wizard=0.5"},
    {"planner.select_every_level": "maybe"},
])
def test_bad_values_rejected(overrides):
    with pytest.raises(ConfigurationError):
        load_config(None, overrides)


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(ConfigurationError):
        load_config(tmp_path / "absent.ini")
    with pytest.raises(ConfigurationError):
        load_config(write(tmp_path, "no section header\n"))
    with pytest.raises(ConfigurationError):
        load_config(write(tmp_path, "[planner]\ncandidate = 3\n"))


def test_dict_round_trip():
    cfg = load_config(None, {"levels.jumps": "8, 1", "levels.horizon": "33", "critic.kind": "reward",
                             "data.mix": "expert=1"})
    back = RunConfig.from_dict(cfg.to_dict())
    assert back == cfg


def test_dumps_round_trip(tmp_path):
    cfg = load_config(None, {"backbone.kind": "rf", "planner.target": "0.25", "reflow.pairs": "100"})
    assert load_config(write(tmp_path, cfg.dumps())) == cfg


def test_reflow_pairs_default():
    cfg = RunConfig()
    assert cfg.reflow_pairs(300) == 15000
    cfg.reflow.pairs = 7
    assert cfg.reflow_pairs(300) == 7
