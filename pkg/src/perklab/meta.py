"""Outer loop: truncated meta-gradients, meta-training and evaluation."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .inner import (
    AdaptationTrace,
    InnerHyper,
    TokenWeightNet,
    adapt,
    answer_with_adapter,
    init_hyper,
    init_weight_net,
)
from .model import BaseParams, LoraAdapter, ModelConfig, TokenSeq, forward_logits, init_lora, reasoning_loss
from .optim import TrainConfig, TrainState, train_loop
from .render import TTLPrompt, render_prompt
from .reports import EvalReport, exact_match
from .taskgen.problem import ReasoningProblem
from .taskgen.vocab import Vocabulary

WNET_NAMES = ("w1", "b1", "w2", "b2")


@dataclass
class TGUConfig:
    n_steps: int = 4
    retain: int = 2
    accum: int = 1

    def __post_init__(self):
        if not 1 <= self.retain <= self.n_steps:
            raise ValueError(f"retain T={self.retain} must satisfy 1 <= T <= N={self.n_steps}")
        if self.accum < 1:
            raise ValueError("accum must be >= 1")


@dataclass
class MetaParams:
    """Adapter initialization, inner learning-rate table and token-weight net."""

    adapter: LoraAdapter
    hyper: InnerHyper
    weight_net: TokenWeightNet | None = None

    def named(self) -> dict[str, Tensor]:
        out = {}
        for layer, (a, b) in self.adapter.factors.items():
            out[f"lora.{layer}.A"] = a
            out[f"lora.{layer}.B"] = b
        out["lr_table"] = self.hyper.lr_table
        if self.weight_net is not None:
            for n, t in zip(WNET_NAMES, self.weight_net.tensors()):
                out[f"wnet.{n}"] = t
        return out

    def replace(self, named: dict[str, Tensor]) -> "MetaParams":
        adapter = LoraAdapter(
            {k: (named[f"lora.{k}.A"], named[f"lora.{k}.B"]) for k in self.adapter.factors},
            self.adapter.scale,
        )
        hyper = InnerHyper(named["lr_table"], self.hyper.optimizer, self.hyper.betas, self.hyper.eps,
                           self.hyper.weight_decay)
        wnet = None
        if self.weight_net is not None:
            wnet = TokenWeightNet(*(named[f"wnet.{n}"] for n in WNET_NAMES))
        return MetaParams(adapter, hyper, wnet)

    def copy(self) -> "MetaParams":
        return self.replace({k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.named().items()})


def init_meta(
    config: ModelConfig,
    n_steps: int,
    rng: np.random.Generator,
    inner_lr: float = 5e-5,
    optimizer: str = "adamw",
    weight_hidden: int = 32,
) -> MetaParams:
    """Fresh meta-parameters; ``weight_hidden=0`` drops the token-weight net."""
    adapter = init_lora(config, rng)
    for t in adapter.tensors():
        t.requires_grad = True
    hyper = init_hyper(config, n_steps, inner_lr, optimizer)
    wnet = init_weight_net(config.d_model, weight_hidden, rng) if weight_hidden else None
    return MetaParams(adapter, hyper, wnet)


def run_adapt(base: BaseParams, meta: MetaParams, prompt: TTLPrompt, tgu: TGUConfig, retain=None,
              accum=None, pad_id: int = 0) -> AdaptationTrace:
    return adapt(
        base, meta.adapter, meta.hyper, prompt.batch, tgu.n_steps,
        tgu.retain if retain is None else retain,
        tgu.accum if accum is None else min(accum, len(prompt.batch)),
        meta.weight_net, pad_id,
    )


def tgu_meta_gradient(
    base: BaseParams,
    meta: MetaParams,
    trace: AdaptationTrace,
    target: TokenSeq,
) -> tuple[float, dict[str, np.ndarray]]:
    """Reasoning loss of the adapted model and its gradient for every meta-parameter.

    The gradient reaching the window's entry proxies is passed on unchanged to
    the adapter initialization; earlier steps count as constants.
    """
    if not trace.entry:
        raise ValueError("trace has no retained window (retain=0)")
    loss = reasoning_loss(forward_logits(base, trace.final, target), target)
    named = meta.named()
    extra = [k for k in named if not k.startswith("lora.")]
    grads = ad.backward(loss, list(trace.entry) + [named[k] for k in extra])
    lora_names = [k for k in named if k.startswith("lora.")]
    out = {k: g.data for k, g in zip(lora_names, grads[: len(lora_names)])}
    out.update({k: g.data for k, g in zip(extra, grads[len(lora_names):])})
    return float(loss.data), out


def problem_gradient(base, meta, prompt: TTLPrompt, tgu: TGUConfig, pad_id: int = 0):
    trace = run_adapt(base, meta, prompt, tgu, accum=1, pad_id=pad_id)
    return tgu_meta_gradient(base, meta, trace, prompt.target)


def adapted_loss(base, meta, prompt: TTLPrompt, tgu: TGUConfig, pad_id: int = 0) -> float:
    """Reasoning loss after a first-order adaptation; nothing is retained."""
    trace = run_adapt(base, meta, prompt, tgu, retain=0, pad_id=pad_id)
    with ad.no_grad():
        return float(reasoning_loss(forward_logits(base, trace.final, prompt.target), prompt.target).data)


def meta_batch_gradient(base, meta, prompts: Sequence[TTLPrompt], idx, tgu, pad_id=0):
    """Mean loss and gradient over ``prompts[idx]``, reduced in ascending index order."""
    total_loss = 0.0
    acc: dict[str, np.ndarray] = {}
    for i in sorted(int(j) for j in idx):
        loss, g = problem_gradient(base, meta, prompts[i], tgu, pad_id)
        total_loss += loss
        for k, v in g.items():
            acc[k] = v.copy() if k not in acc else acc[k] + v
    n = len(idx)
    return total_loss / n, {k: v / n for k, v in acc.items()}


def meta_train(
    base: BaseParams,
    meta: MetaParams,
    train: Sequence[ReasoningProblem],
    val: Sequence[ReasoningProblem],
    vocab: Vocabulary,
    cfg: TrainConfig,
    tgu: TGUConfig,
    c: int | None = 64,
    log_path: str | Path | None = None,
    state: TrainState | None = None,
    on_step=None,
    with_support: bool = False,
) -> tuple[MetaParams, list[dict], TrainState]:
    """Meta-train on ``train`` with early stopping on the mean adapted
    reasoning loss of ``val``. The base model is never updated."""
    if not train:
        raise ValueError("empty training set")
    seen = {(p.context, p.question) for p in train}
    if any((p.context, p.question) in seen for p in val):
        raise ValueError("train and validation sets overlap")
    train_prompts = [render_prompt(p, "ttl", vocab, c, with_support) for p in train]
    val_prompts = [render_prompt(p, "ttl", vocab, c, with_support) for p in val]
    pad = vocab.pad_id

    def grad_fn(params, idx):
        return meta_batch_gradient(base, meta.replace(params), train_prompts, idx, tgu, pad)

    def val_fn(params):
        m = meta.replace(params)
        return float(np.mean([adapted_loss(base, m, p, tgu, pad) for p in val_prompts]))

    params, log, state = train_loop(
        meta.named(), grad_fn, val_fn if val_prompts else None, len(train_prompts), cfg,
        log_path, state, on_step,
    )
    return meta.replace(params), log, state


def decoded_answer(vocab: Vocabulary, ids: np.ndarray, with_support: bool = False) -> str:
    ids = [int(i) for i in ids]
    if with_support and vocab.q_id in ids:
        ids = ids[len(ids) - ids[::-1].index(vocab.q_id):]
    return vocab.decode(ids)


def meta_evaluate(
    base: BaseParams,
    meta: MetaParams,
    problems: Sequence[ReasoningProblem],
    vocab: Vocabulary,
    tgu: TGUConfig,
    c: int | None = 64,
    max_new: int = 64,
    with_support: bool = False,
) -> EvalReport:
    """Adapt to each context, answer from the question alone, score by exact match."""
    report = EvalReport()
    for p in problems:
        prompt = render_prompt(p, "ttl", vocab, c, with_support)
        trace = run_adapt(base, meta, prompt, tgu, retain=0, pad_id=vocab.pad_id)
        out = answer_with_adapter(base, trace, prompt.question, max_new, vocab.eos_id, vocab.pad_id)
        pred = decoded_answer(vocab, out.ids, with_support)
        report.rows.append({
            "uid": p.uid, "task": p.task, "n_chunks": len(prompt.batch), "length_tokens": p.length_tokens,
            "position": p.position_policy, "gold": p.answer, "pred": pred,
            "correct": exact_match(p.answer, pred),
        })
    return report
