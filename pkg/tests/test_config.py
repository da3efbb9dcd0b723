import pytest

from perklab.config import DEFAULTS, ConfigError, dump_config, load_config, make_config, parse_config_text


def test_every_key_has_default():
    cfg = make_config(env={})
    assert set(cfg) == set(DEFAULTS)
    assert cfg.seed == 0 and cfg["train.lr"] == 1e-5


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="nope"):
        make_config({"nope": 1}, env={})


def test_type_checks():
    with pytest.raises(ConfigError):
        make_config({"train.lr": "fast"}, env={})
    with pytest.raises(ConfigError):
        make_config({"model.rs_lora": 1}, env={})
    assert make_config({"train.lr": 1}, env={})["train.lr"] == 1.0
    assert make_config({"profile.retain": (1, 2)}, env={})["profile.retain"] == [1, 2]


def test_file_parsing(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("# comment\nseed = 3\ntask = needle  # trailing\ngrid.test = [8, 16]\ninner.optimizer = 'sgd'\n")
    cfg = load_config(p, env={})
    assert (cfg.seed, cfg.task, cfg["grid.test"], cfg["inner.optimizer"]) == (3, "needle", [8, 16], "sgd")


def test_bad_lines():
    with pytest.raises(ConfigError, match="line 1"):
        parse_config_text("just words")
    with pytest.raises(ConfigError, match="duplicate"):
        parse_config_text("seed = 1\nseed = 2")


def test_environment_seed():
    assert make_config(env={"PERKLAB_SEED": "9"}).seed == 9
    with pytest.raises(ConfigError):
        make_config(env={"PERKLAB_SEED": "x"})


def test_dump_round_trip(tmp_path):
    cfg = make_config({"task": "api", "grid.train": [4, 8]}, env={})
    p = tmp_path / "c.cfg"
    p.write_text(dump_config(cfg))
    assert load_config(p, env={}) == cfg


def test_section():
    assert make_config(env={}).section("tgu") == {"n_steps": 4, "retain": 2, "accum": 1}
