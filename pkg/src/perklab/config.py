"""Run configuration: flat ``section.key = value`` text files.

Example::

    # comments start with '#'
    seed = 3
    task = recall
    train.lr = 1e-3
    gen.lengths = [8, 16, 32]

Values are Python literals (numbers, booleans, None, lists, quoted strings);
anything else is taken as a bare string. Every key has a default and unknown
keys are rejected. ``PERKLAB_SEED`` in the environment overrides ``seed``.
"""

from __future__ import annotations

import ast
import os
from pathlib import Path

DEFAULTS: dict[str, object] = {
    "seed": 0,
    "out_dir": "runs/default",
    "data_dir": "data",
    "task": "recall",
    "method": "perk",
    # corpus generation
    "gen.n_train": 2000,
    "gen.n_val": 200,
    "gen.n_test": 200,
    "gen.n_records": 16,
    "gen.target_tokens": None,
    "gen.n_docs": 8,
    "gen.position_policy": "Rnd",
    "gen.distractors_per_support": 4,
    "gen.with_support": False,
    # model
    "model.d_model": 64,
    "model.n_layers": 2,
    "model.n_heads": 4,
    "model.max_positions": 640,
    "model.lora_rank": 8,
    "model.lora_alpha": 16.0,
    "model.rs_lora": True,
    "model.mlp_ratio": 4,
    "model.dtype": "float32",
    # frozen-base pretraining
    "pretrain.steps": 300,
    "pretrain.lr": 3e-3,
    "pretrain.batch": 16,
    "pretrain.problems": 500,
    # outer loop
    "train.lr": 1e-5,
    "train.weight_decay": 0.01,
    "train.warmup_frac": 0.03,
    "train.max_epochs": 2,
    "train.meta_batch": 4,
    "train.patience": 3,
    "train.val_interval": 50,
    "train.max_steps": None,
    "train.lr_scales": {},
    "train.val_size": 32,
    "train.checkpoint_every": 50,
    # inner loop
    "tgu.n_steps": 4,
    "tgu.retain": 2,
    "tgu.accum": 1,
    "inner.lr": 5e-5,
    "inner.optimizer": "adamw",
    "inner.weight_hidden": 32,
    "chunk.c": 64,
    # evaluation and profiling
    "eval.split": "test",
    "eval.max_new": 32,
    "eval.limit": None,
    "grid.axis": "length",
    "grid.train": [],
    "grid.test": [],
    "profile.warmup": 10,
    "profile.repeats": 3,
    "profile.retain": [1, 2, 3, 4],
    "profile.lengths": [4, 8, 16],
    "profile.accum": [1, 2, 4, 8, 16],
    "profile.node_budget": None,
    "profile.elem_budget": None,
    "profile.ft_checkpoint": None,
    "checkpoint": None,
}


class ConfigError(ValueError):
    pass


def parse_value(text: str):
    text = text.strip()
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def _coerce(key: str, value):
    default = DEFAULTS[key]
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} expects true/false, got {value!r}")
        return value
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if isinstance(default, list) and isinstance(value, tuple):
        return list(value)
    if not isinstance(value, type(default)):
        raise ConfigError(f"{key} expects {type(default).__name__}, got {value!r}")
    return value


class RunConfig(dict):
    """Mapping of every known key to its value."""

    def __getattr__(self, key):
        try:
            return self[key]
        except KeyError:
            raise AttributeError(key) from None

    def section(self, name: str) -> dict:
        n = len(name) + 1
        return {k[n:]: v for k, v in self.items() if k.startswith(name + ".")}


def make_config(overrides: dict | None = None, env: dict | None = None) -> RunConfig:
    cfg = RunConfig(DEFAULTS)
    for k, v in (overrides or {}).items():
        if k not in DEFAULTS:
            raise ConfigError(f"unknown config key {k!r}")
        cfg[k] = _coerce(k, v)
    env = os.environ if env is None else env
    if env.get("PERKLAB_SEED"):
        try:
            cfg["seed"] = int(env["PERKLAB_SEED"])
        except ValueError:
            raise ConfigError(f"PERKLAB_SEED must be an integer, got {env['PERKLAB_SEED']!r}") from None
    return cfg


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip() if not raw.strip().startswith("#") else ""
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = parse_value(value)
    return out


def load_config(path: str | Path | None = None, overrides: dict | None = None, env: dict | None = None) -> RunConfig:
    values = parse_config_text(Path(path).read_text(encoding="utf-8")) if path else {}
    values.update(overrides or {})
    return make_config(values, env)


def dump_config(cfg: dict) -> str:
    return "".join(f"{k} = {v!r}\n" for k, v in cfg.items())
