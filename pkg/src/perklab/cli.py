"""Command-line entry points: generate, train, eval, grid, profile.

Every command takes ``--config FILE`` plus any number of ``--set key=value``
overrides (see :mod:`perklab.config` for the keys). Exit status is 0 on
success, 2 for configuration or input problems and 3 for numerical failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .baseline import BaselineConfig, icr_evaluate, pretrain_base, train_ft_icr
from .checkpoint import CheckpointIntegrityError, CheckpointVersionError
from .config import ConfigError, RunConfig, dump_config, load_config, parse_value
from .harness import MissingModelError, grid_eval, profile_inference, profile_train
from .inner import InnerLoopDivergence
from .meta import TGUConfig, init_meta, meta_evaluate, meta_train
from .model import BaseParams, ModelConfig, SequenceLengthError, init_base
from .optim import NumericalError, TrainConfig
from .render import render_prompt
from .reports import write_json
from .store import load_run, restore_state, save_run
from .taskgen import (
    FAMILY,
    ApiSpec,
    NeedleSpec,
    OutOfVocabularyError,
    RecordsSpec,
    Vocabulary,
    build_vocab,
    check_disjoint,
    generate_corpus,
    read_jsonl,
    write_jsonl,
)

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3

INPUT_ERRORS = (
    ConfigError, FileNotFoundError, OutOfVocabularyError, CheckpointVersionError,
    CheckpointIntegrityError, MissingModelError, SequenceLengthError, ValueError,
)
NUMERIC_ERRORS = (NumericalError, InnerLoopDivergence, FloatingPointError)


class InputError(ValueError):
    pass


# ---------------------------------------------------------------- helpers

def task_spec(cfg: RunConfig, size: int | None = None):
    """Generator spec for ``cfg.task``; ``size`` overrides the context size."""
    fam = FAMILY.get(cfg["task"])
    policy = cfg["gen.position_policy"]
    if fam == "records":
        n = size if size is not None else cfg["gen.n_records"]
        return RecordsSpec(n_records=n, target_tokens=cfg["gen.target_tokens"] if size is None else None,
                           position_policy=policy, seed=cfg["seed"])
    if fam == "needle":
        target = size * cfg["chunk.c"] if size is not None else (cfg["gen.target_tokens"] or 512)
        return NeedleSpec(target_tokens=target, distractors_per_support=cfg["gen.distractors_per_support"],
                          position_policy=policy, seed=cfg["seed"])
    if fam == "api":
        n = size if size is not None else cfg["gen.n_docs"]
        return ApiSpec(n_docs=n, position_policy=policy, seed=cfg["seed"])
    raise ConfigError(f"unknown task {cfg['task']!r}")


def model_config(cfg: RunConfig, vocab_size: int) -> ModelConfig:
    m = cfg.section("model")
    m.pop("dtype")
    return ModelConfig(vocab_size=vocab_size, **m)


def train_config(cfg: RunConfig) -> TrainConfig:
    t = cfg.section("train")
    for k in ("val_size", "checkpoint_every"):
        t.pop(k)
    return TrainConfig(seed=cfg["seed"], **t)


def tgu_config(cfg: RunConfig) -> TGUConfig:
    return TGUConfig(cfg["tgu.n_steps"], cfg["tgu.retain"], cfg["tgu.accum"])


def corpus_path(cfg: RunConfig, split: str) -> Path:
    return Path(cfg["data_dir"]) / f"{split}.jsonl"


def load_corpus(cfg: RunConfig, split: str):
    path = corpus_path(cfg, split)
    if not path.exists():
        raise FileNotFoundError(f"corpus {path} not found; run 'perklab generate' first")
    return read_jsonl(path)


def load_vocab(cfg: RunConfig) -> Vocabulary:
    path = Path(cfg["data_dir"]) / "vocab.txt"
    if not path.exists():
        raise FileNotFoundError(f"vocabulary {path} not found; run 'perklab generate' first")
    return Vocabulary.load(path)


def checkpoint_dir(cfg: RunConfig) -> Path:
    return Path(cfg["checkpoint"] or Path(cfg["out_dir"]) / "checkpoint")


def _labelled(items: list[str], what: str) -> dict[str, str]:
    out = {}
    for item in items:
        label, sep, path = str(item).partition(":")
        if not sep or not path:
            raise ConfigError(f"{what} entries look like 'label:path', got {item!r}")
        out[label] = path
    return out


def _limit(problems, cfg: RunConfig):
    n = cfg["eval.limit"]
    return problems if n is None else problems[:n]


def evaluator(ckpt, base, meta, vocab: Vocabulary, cfg: RunConfig):
    """Scoring function for a restored run, PERK or FT-ICR."""
    c, max_new, sup = cfg["chunk.c"], cfg["eval.max_new"], cfg["gen.with_support"]
    if ckpt.extra.get("method") == "perk":
        if meta is None:
            raise InputError("perk checkpoint holds no meta-parameters")
        tgu = tgu_config(cfg)
        return lambda problems: meta_evaluate(base, meta, problems, vocab, tgu, c, max_new, sup)
    return lambda problems: icr_evaluate(base, problems, vocab, max_new, True, 8, c)


# ---------------------------------------------------------------- commands

def cmd_generate(cfg: RunConfig) -> int:
    spec = task_spec(cfg)
    out = Path(cfg["data_dir"])
    corpora = {
        split: generate_corpus(cfg["task"], spec, cfg[f"gen.n_{split}"], split, cfg["seed"])
        for split in ("train", "val", "test")
    }
    check_disjoint(corpora["train"], corpora["val"])
    check_disjoint(corpora["train"], corpora["test"])
    vocab = build_vocab([spec])
    for problems in corpora.values():
        for p in problems:
            vocab.encode(p.context), vocab.encode(p.question), vocab.encode(p.answer)
    out.mkdir(parents=True, exist_ok=True)
    for split, problems in corpora.items():
        n = write_jsonl(problems, out / f"{split}.jsonl")
        print(f"{split}: {n} problems -> {out / f'{split}.jsonl'}")
    vocab.save(out / "vocab.txt")
    (out / "generate_config.txt").write_text(dump_config(cfg), encoding="utf-8")
    print(f"vocab: {len(vocab)} tokens")
    return EXIT_OK


def cmd_train(cfg: RunConfig, resume: bool = False) -> int:
    train, val = load_corpus(cfg, "train"), load_corpus(cfg, "val")[: cfg["train.val_size"]]
    vocab = load_vocab(cfg)
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    last, best = out / "last", out / "checkpoint"
    log_path = out / "train_log.jsonl"
    method = cfg["method"]
    if method not in ("perk", "ft-icr"):
        raise ConfigError(f"method must be perk or ft-icr, not {method!r}")
    tcfg = train_config(cfg)
    rng = np.random.default_rng(cfg["seed"])
    state = None
    if resume and (last / "manifest.json").exists():
        ckpt, base, meta = load_run(last)
        if ckpt.extra.get("method") != method:
            raise InputError(f"{last} holds a {ckpt.extra.get('method')} run, not {method}")
        state = restore_state(ckpt)
        print(f"resuming from step {state.step}")
    else:
        if log_path.exists():
            log_path.unlink()
        base = init_base(model_config(cfg, len(vocab)), rng)
        base, losses = pretrain_base(
            base, train[: cfg["pretrain.problems"]], vocab, cfg["pretrain.steps"], cfg["pretrain.batch"],
            cfg["pretrain.lr"], cfg["chunk.c"], cfg["seed"],
        )
        if losses:
            print(f"pretrain: loss {losses[0]:.4f} -> {losses[-1]:.4f}")
        meta = None
        if method == "perk":
            meta = init_meta(base.config, cfg["tgu.n_steps"], rng, cfg["inner.lr"], cfg["inner.optimizer"],
                             cfg["inner.weight_hidden"])
    every = cfg["train.checkpoint_every"]
    sup = cfg["gen.with_support"]

    if method == "perk":
        frozen = base

        def on_step(params, st):
            if every and st.step % every == 0:
                save_run(last, "perk", frozen, meta.replace(params), st, cfg["seed"])

        meta_out, log, state = meta_train(frozen, meta, train, val, vocab, tcfg, tgu_config(cfg),
                                          cfg["chunk.c"], log_path, state, on_step, sup)
        save_run(best, "perk", frozen, meta_out, None, cfg["seed"], {"best_step": state.best_step})
    else:
        def on_step(params, st):
            if every and st.step % every == 0:
                # the position table may have been extended for long prompts
                config = replace(base.config, max_positions=params["wpe"].shape[0])
                save_run(last, "ft-icr", BaseParams(config, params), None, st, cfg["seed"])

        model, log, state = train_ft_icr(base, train, val, vocab, BaselineConfig(tcfg), log_path, state,
                                         on_step, sup)
        save_run(best, "ft-icr", model, None, None, cfg["seed"], {"best_step": state.best_step})
    (out / "train_config.txt").write_text(dump_config(cfg), encoding="utf-8")
    final = log[-1] if log else {}
    print(f"trained to step {state.step}; best step {state.best_step} "
          f"(val loss {state.best_val:.4f}); last train loss {final.get('train_loss', float('nan')):.4f}")
    print(f"checkpoint -> {best}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig) -> int:
    path = checkpoint_dir(cfg)
    if not (path / "manifest.json").exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    ckpt, base, meta = load_run(path)
    vocab = load_vocab(cfg)
    problems = _limit(load_corpus(cfg, cfg["eval.split"]), cfg)
    report = evaluator(ckpt, base, meta, vocab, cfg)(problems)
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    stem = f"eval_{cfg['eval.split']}"
    report.to_csv(out / f"{stem}.csv")
    write_json(report.to_json(), out / f"{stem}.json")
    print(f"{ckpt.extra.get('method')} exact match on {cfg['eval.split']}: "
          f"{report.accuracy:.4f} ({report.count} problems)")
    return EXIT_OK


def cmd_grid(cfg: RunConfig) -> int:
    runs = _labelled(cfg["grid.train"], "grid.train")
    tests = _labelled(cfg["grid.test"], "grid.test")
    if not runs or not tests:
        raise ConfigError("grid.train and grid.test must both list 'label:path' entries")
    vocab = load_vocab(cfg)
    models = {}
    for label, path in runs.items():
        if not (Path(path) / "manifest.json").exists():
            raise FileNotFoundError(f"checkpoint {path} for grid setting {label!r} not found")
        ckpt, base, meta = load_run(path)
        models[label] = evaluator(ckpt, base, meta, vocab, cfg)
    test_sets = {label: _limit(read_jsonl(path), cfg) for label, path in tests.items()}
    report = grid_eval(models, test_sets, lambda ev, problems: ev(problems), cfg["grid.axis"])
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    report.to_csv(out / "grid.csv")
    write_json(report.to_json(), out / "grid.json")
    for (tr, te), cell in sorted(report.grid.items()):
        print(f"train {tr} / test {te}: {cell['accuracy']:.4f}")
    return EXIT_OK


def cmd_profile(cfg: RunConfig) -> int:
    path = checkpoint_dir(cfg)
    if not (path / "manifest.json").exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    ckpt, base, meta = load_run(path)
    if meta is None:
        raise InputError("profiling needs a perk checkpoint")
    vocab = load_vocab(cfg)
    contexts, problems = {}, {}
    for size in cfg["profile.lengths"]:
        p = generate_corpus(cfg["task"], task_spec(cfg, size), 1, "test", cfg["seed"])[0]
        label = str(size)
        problems[label] = p
        contexts[label] = render_prompt(p, "ttl", vocab, cfg["chunk.c"], cfg["gen.with_support"])
    n = cfg["tgu.n_steps"]
    warm, reps = cfg["profile.warmup"], cfg["profile.repeats"]
    train_rep = profile_train(base, meta, contexts, [TGUConfig(n, t) for t in cfg["profile.retain"] if t <= n],
                              warm, reps, cfg["profile.node_budget"], vocab.pad_id, cfg["profile.elem_budget"])
    ft = None
    if cfg["profile.ft_checkpoint"]:
        _, ft, _ = load_run(cfg["profile.ft_checkpoint"])
    infer_rep = profile_inference(base, meta, contexts, tgu_config(cfg), cfg["profile.accum"], ft,
                                  problems if ft is not None else None, vocab, cfg["eval.max_new"], warm, reps)
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    train_rep.to_csv(out / "profile_train.csv")
    infer_rep.to_csv(out / "profile_inference.csv")
    write_json({"train": train_rep.to_json(), "inference": infer_rep.to_json()}, out / "profile.json")
    for row in train_rep.rows:
        print(f"train T={row['retain']} {row['setting']}: {row['status']} "
              f"nodes={row.get('peak_graph_nodes')} time={row.get('wall_clock_s')}")
    for row in infer_rep.rows:
        print(f"infer {row['method']} {row['setting']} accum={row['accum']}: {row['status']} "
              f"bytes={row.get('peak_bytes')} time={row.get('wall_clock_s')}")
    return EXIT_OK


# ---------------------------------------------------------------- entry

def _parse_set(items: list[str]) -> dict:
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = parse_value(value)
    return out


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="perklab", description="Meta-learned test-time context encoding.")
    sub = ap.add_subparsers(dest="command", required=True)
    helps = {
        "generate": "write train/val/test corpora and the vocabulary to data_dir",
        "train": "meta-train PERK or fine-tune the FT-ICR baseline (method=perk|ft-icr)",
        "eval": "exact-match evaluation of a checkpoint on one split",
        "grid": "every grid.train checkpoint against every grid.test corpus",
        "profile": "memory and runtime of meta-gradients and of inference",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text, description=text)
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one configuration key (repeatable)")
        if name == "train":
            p.add_argument("--resume", action="store_true", help="continue from out_dir/last if present")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, _parse_set(args.set))
        if cfg["model.dtype"] not in ("float32", "float64"):
            raise ConfigError(f"model.dtype must be float32 or float64, not {cfg['model.dtype']!r}")
        with ad.precision(np.dtype(cfg["model.dtype"])):
            if args.command == "generate":
                return cmd_generate(cfg)
            if args.command == "train":
                return cmd_train(cfg, args.resume)
            if args.command == "eval":
                return cmd_eval(cfg)
            if args.command == "grid":
                return cmd_grid(cfg)
            return cmd_profile(cfg)
    except NUMERIC_ERRORS as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except INPUT_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
