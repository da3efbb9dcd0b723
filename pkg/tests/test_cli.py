import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from perklab import cli
from perklab.checkpoint import load_checkpoint

SMALL = """\
seed = 1
gen.n_train = 100
gen.n_val = 20
gen.n_test = 20
gen.n_records = 2
model.d_model = 16
model.n_heads = 2
model.lora_rank = 2
pretrain.steps = 3
pretrain.problems = 10
train.lr = 1e-3
train.max_steps = 4
train.val_interval = 2
train.val_size = 3
train.checkpoint_every = 2
train.patience = 10
tgu.n_steps = 2
tgu.retain = 1
inner.lr = 1e-3
inner.weight_hidden = 4
chunk.c = 32
eval.max_new = 4
eval.limit = 4
profile.warmup = 0
profile.repeats = 1
profile.lengths = [2, 3]
profile.retain = [1, 2]
profile.accum = [1, 2]
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "run.cfg").write_text(SMALL + f"data_dir = '{d / 'data'}'\nout_dir = '{d / 'run'}'\n")
    assert cli.main(["generate", "--config", str(d / "run.cfg")]) == 0
    return d


def run(workdir, *args, **sets):
    argv = list(args) + ["--config", str(workdir / "run.cfg")]
    for k, v in sets.items():
        argv += ["--set", f"{k.replace('__', '.')}={v}"]
    return cli.main(argv)


def test_generate_line_counts(workdir):
    data = workdir / "data"
    counts = {s: len((data / f"{s}.jsonl").read_text().splitlines()) for s in ("train", "val", "test")}
    assert counts == {"train": 100, "val": 20, "test": 20}
    assert (data / "vocab.txt").exists()


def test_generate_is_byte_identical(workdir, tmp_path):
    assert run(workdir, "generate", data_dir=f"'{tmp_path}'") == 0
    for name in ("train.jsonl", "val.jsonl", "test.jsonl", "vocab.txt"):
        assert (tmp_path / name).read_bytes() == (workdir / "data" / name).read_bytes()


@pytest.fixture(scope="module")
def trained(workdir):
    assert run(workdir, "train") == 0
    return workdir / "run"


def test_train_writes_checkpoint_and_log(trained):
    ck = load_checkpoint(trained / "checkpoint")
    assert ck.extra["method"] == "perk"
    assert any(k.startswith("meta.lora.") for k in ck.tensors)
    steps = [json.loads(line)["step"] for line in (trained / "train_log.jsonl").read_text().splitlines()]
    assert steps == [1, 2, 3, 4]


def test_ft_icr_checkpoint_has_no_meta(workdir, tmp_path):
    assert run(workdir, "train", method="ft-icr", out_dir=f"'{tmp_path}'") == 0
    ck = load_checkpoint(tmp_path / "checkpoint")
    assert ck.extra["method"] == "ft-icr"
    assert not any(k.startswith("meta.") for k in ck.tensors)
    assert run(workdir, "eval", out_dir=f"'{tmp_path}'") == 0


def test_resume_matches_unbroken_run(workdir, trained, tmp_path, monkeypatch):
    real = cli.save_run

    def interrupt(path, *a, **kw):
        real(path, *a, **kw)
        if Path(path).name == "last":
            raise KeyboardInterrupt

    monkeypatch.setattr(cli, "save_run", interrupt)
    with pytest.raises(KeyboardInterrupt):
        run(workdir, "train", out_dir=f"'{tmp_path}'")
    monkeypatch.setattr(cli, "save_run", real)
    assert load_checkpoint(tmp_path / "last").step == 2
    assert run(workdir, "train", "--resume", out_dir=f"'{tmp_path}'") == 0

    a = load_checkpoint(trained / "checkpoint").tensors
    b = load_checkpoint(tmp_path / "checkpoint").tensors
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    log_a = (trained / "train_log.jsonl").read_text()
    log_b = (tmp_path / "train_log.jsonl").read_text()
    assert log_a == log_b


def test_eval_rerun_identical(workdir, trained):
    assert run(workdir, "eval") == 0
    first = (trained / "eval_test.csv").read_bytes()
    assert run(workdir, "eval") == 0
    assert (trained / "eval_test.csv").read_bytes() == first
    assert len(first.decode().splitlines()) == 1 + 4


def test_grid_header(workdir, trained):
    data = workdir / "data"
    assert run(workdir, "grid", **{"grid__train": f"['2:{trained / 'checkpoint'}']",
                                   "grid__test": f"['2:{data / 'test.jsonl'}', '3:{data / 'val.jsonl'}']"}) == 0
    lines = (trained / "grid.csv").read_text().splitlines()
    assert lines[0] == "train_length,test_length,accuracy,count,diagonal"
    assert len(lines) == 3


def test_profile_warmup_column(workdir, trained):
    assert run(workdir, "profile", profile__warmup=10) == 0
    for name in ("profile_train.csv", "profile_inference.csv"):
        lines = (trained / name).read_text().splitlines()
        col = lines[0].split(",").index("warmup_iters")
        assert all(line.split(",")[col] == "10" for line in lines[1:])


def test_input_errors_exit_2(workdir, tmp_path):
    assert run(workdir, "eval", checkpoint=f"'{tmp_path / 'none'}'") == 2
    assert run(workdir, "eval", no__such_key=1) == 2
    assert run(workdir, "train", method="'magic'", out_dir=f"'{tmp_path}'") == 2
    assert run(workdir, "train", data_dir=f"'{tmp_path}'") == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_failure_exit_3(workdir, tmp_path):
    assert run(workdir, "train", inner__lr=1e30, out_dir=f"'{tmp_path}'") == 3


def test_console_help():
    out = subprocess.run([sys.executable, "-m", "perklab.cli", "train", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "--resume" in out.stdout
