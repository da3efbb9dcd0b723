import json

import numpy as np
import pytest

from perklab.checkpoint import (
    BLOB,
    MANIFEST,
    Checkpoint,
    CheckpointIntegrityError,
    CheckpointVersionError,
    load_checkpoint,
    save_checkpoint,
)
from perklab.meta import init_meta
from perklab.model import ModelConfig, init_base
from perklab.optim import TrainConfig, train_loop
from perklab.store import load_run, restore_state, run_checkpoint


def sample(rng):
    return Checkpoint(
        {"a": rng.normal(size=(3, 4)).astype(np.float32), "b": np.arange(5, dtype=np.int64),
         "c": rng.normal(size=2)},
        {"d_model": 8}, 7, {"seed": 1}, {"note": "x"},
    )


def test_round_trip_bit_exact(tmp_path, rng):
    ck = sample(rng)
    back = load_checkpoint(save_checkpoint(tmp_path / "ck", ck))
    assert list(back.tensors) == list(ck.tensors)
    for k in ck.tensors:
        assert back.tensors[k].dtype == ck.tensors[k].dtype
        assert np.array_equal(back.tensors[k], ck.tensors[k])
    assert (back.step, back.rng, back.extra, back.model_config) == (7, {"seed": 1}, {"note": "x"}, {"d_model": 8})


def test_blob_is_little_endian(tmp_path):
    save_checkpoint(tmp_path, Checkpoint({"x": np.array([1], dtype=">i4")}))
    assert (tmp_path / BLOB).read_bytes() == b"\x01\x00\x00\x00"


def test_version_mismatch_names_both(tmp_path, rng):
    save_checkpoint(tmp_path, sample(rng))
    m = json.loads((tmp_path / MANIFEST).read_text())
    m["version"] = "v0"
    (tmp_path / MANIFEST).write_text(json.dumps(m))
    with pytest.raises(CheckpointVersionError, match="v0.*v1"):
        load_checkpoint(tmp_path)


def test_truncated_blob(tmp_path, rng):
    save_checkpoint(tmp_path, sample(rng))
    blob = (tmp_path / BLOB).read_bytes()
    (tmp_path / BLOB).write_bytes(blob[:-3])
    with pytest.raises(CheckpointIntegrityError):
        load_checkpoint(tmp_path)


def test_missing_manifest(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "nothing")


def test_run_checkpoint_holds_each_tensor_once(tmp_path, rng):
    cfg = ModelConfig(vocab_size=20, d_model=8, n_layers=1, n_heads=2, max_positions=12, lora_rank=2)
    base = init_base(cfg, rng)
    meta = init_meta(cfg, 3, rng, weight_hidden=4)
    ck = run_checkpoint("perk", base, meta)
    expect = len(base.tensors) + len(meta.named())
    assert len(ck.tensors) == expect
    save_checkpoint(tmp_path, ck)
    names = [t["name"] for t in json.loads((tmp_path / MANIFEST).read_text())["tensors"]]
    assert len(names) == len(set(names)) == expect

    _, base2, meta2 = load_run(tmp_path)
    assert all(np.array_equal(base2[k].data, v.data) for k, v in base.items())
    assert all(np.array_equal(meta2.named()[k].data, v.data) for k, v in meta.named().items())
    assert meta2.hyper.optimizer == meta.hyper.optimizer and meta2.adapter.scale == meta.adapter.scale


def test_train_state_round_trip(tmp_path, rng):
    cfg = ModelConfig(vocab_size=20, d_model=8, n_layers=1, n_heads=2, max_positions=12, lora_rank=2)
    base = init_base(cfg, rng)
    meta = init_meta(cfg, 2, rng, weight_hidden=0)
    named = meta.named()

    def grad_fn(params, idx):
        return 1.0, {k: np.ones_like(v.data) for k, v in params.items()}

    _, _, state = train_loop(named, grad_fn, lambda p: 0.3, 4, TrainConfig(max_steps=3, val_interval=1, meta_batch=1))
    save_checkpoint(tmp_path, run_checkpoint("perk", base, meta, state))
    back = restore_state(load_checkpoint(tmp_path))
    assert (back.step, back.best_val, back.best_step, back.bad_intervals, back.stopped) == \
        (state.step, state.best_val, state.best_step, state.bad_intervals, state.stopped)
    assert back.opt.t == state.opt.t
    assert all(np.array_equal(back.opt.m[k], state.opt.m[k]) for k in state.opt.m)
    assert all(np.array_equal(back.best_params[k], state.best_params[k]) for k in state.best_params)
