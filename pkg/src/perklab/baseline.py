"""Full-model training: base pretraining and the in-context (FT-ICR) baseline.

The frozen base the meta-learner adapts needs to know the surface form of the
corpus, so it is first trained as a plain causal LM on training contexts.
The FT-ICR baseline then fine-tunes every weight of a copy of that base to
answer from the full context placed in one prompt.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import (
    BaseParams,
    SequenceLengthError,
    TokenSeq,
    batch_greedy_decode,
    extend_positions,
    forward_logits,
    masked_mean_nll,
)
from .optim import AdamWState, TrainConfig, TrainState, adamw_step, cosine_lr, train_loop
from .render import chunk_problem, render_prompt
from .reports import EvalReport, exact_match
from .taskgen.problem import ReasoningProblem
from .taskgen.vocab import Vocabulary


def pad_batch(seqs: Sequence[TokenSeq], pad_id: int) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), pad_id, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s.ids
        mask[i, : len(s)] = s.loss_mask
    return ids, mask


def _grads_of(base: BaseParams, loss: Tensor) -> dict[str, np.ndarray]:
    names = list(base.tensors)
    gs = ad.backward(loss, [base[n] for n in names])
    return {n: g.data for n, g in zip(names, gs)}


def pretrain_base(
    base: BaseParams,
    problems: Sequence[ReasoningProblem],
    vocab: Vocabulary,
    steps: int = 300,
    batch: int = 16,
    lr: float = 3e-3,
    c: int | None = 64,
    seed: int = 0,
) -> tuple[BaseParams, list[float]]:
    """Causal-LM training of every base weight on context chunks."""
    seqs: list[TokenSeq] = []
    for p in problems:
        seqs.extend(render_prompt(p, "ttl", vocab, c).batch.chunks)
    params = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in base.tensors.items()}
    state = AdamWState()
    rng = np.random.default_rng(seed)
    losses = []
    for step in range(steps):
        pick = rng.choice(len(seqs), size=min(batch, len(seqs)), replace=False)
        ids, mask = pad_batch([seqs[i] for i in pick], vocab.pad_id)
        cur = BaseParams(base.config, params)
        loss = masked_mean_nll(forward_logits(cur, None, ids), ids, mask)
        losses.append(float(loss.data))
        grads = _grads_of(cur, loss)
        params = adamw_step(params, grads, state, cosine_lr(step, steps, lr, 0.03), 0.0)
    out = BaseParams(base.config, {k: Tensor(v.data) for k, v in params.items()})
    return out, losses


@dataclass
class BaselineConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    interpolate: bool = True
    batch_pad: int = 0


def icr_prompts(problems, vocab, base: BaseParams, interpolate: bool, with_support: bool = False):
    prompts = [render_prompt(p, "icr", vocab, with_support=with_support) for p in problems]
    need = max(len(p.full) for p in prompts)
    if need > base.config.max_positions:
        if not interpolate:
            raise SequenceLengthError(
                f"icr prompt of {need} tokens exceeds max_positions {base.config.max_positions}; "
                "enable position interpolation (extend_positions)"
            )
        base = extend_positions(base, need)
    return prompts, base


def icr_batch_loss(base: BaseParams, prompts, idx, pad_id: int) -> Tensor:
    """Mean masked NLL over the answer tokens of several prompts."""
    ids, mask = pad_batch([prompts[i].full for i in idx], pad_id)
    return masked_mean_nll(forward_logits(base, None, ids), ids, mask)


def train_ft_icr(
    base: BaseParams,
    train: Sequence[ReasoningProblem],
    val: Sequence[ReasoningProblem],
    vocab: Vocabulary,
    cfg: BaselineConfig,
    log_path: str | Path | None = None,
    state: TrainState | None = None,
    on_step=None,
    with_support: bool = False,
) -> tuple[BaseParams, list[dict], TrainState]:
    """Fine-tune all weights on full-context prompts, with the meta-learner's
    schedule, sampler and early stopping."""
    prompts, base = icr_prompts(train, vocab, base, cfg.interpolate, with_support)
    val_prompts = [render_prompt(p, "icr", vocab, with_support=with_support) for p in val]
    if val_prompts and max(len(p.full) for p in val_prompts) > base.config.max_positions:
        raise SequenceLengthError("validation prompts are longer than the training prompts allow")
    config = base.config
    pad = vocab.pad_id

    def grad_fn(params, idx):
        cur = BaseParams(config, params)
        loss = icr_batch_loss(cur, prompts, sorted(int(i) for i in idx), pad)
        return float(loss.data), _grads_of(cur, loss)

    def val_fn(params):
        cur = BaseParams(config, params)
        with ad.no_grad():
            losses = [
                float(icr_batch_loss(cur, val_prompts, range(s, min(s + 8, len(val_prompts))), pad).data)
                * len(range(s, min(s + 8, len(val_prompts))))
                for s in range(0, len(val_prompts), 8)
            ]
        return sum(losses) / len(val_prompts)

    start = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in base.tensors.items()}
    params, log, state = train_loop(start, grad_fn, val_fn if val_prompts else None, len(prompts),
                                    cfg.train, log_path, state, on_step)
    return BaseParams(config, {k: Tensor(v.data) for k, v in params.items()}), log, state


def icr_evaluate(
    model: BaseParams,
    problems: Sequence[ReasoningProblem],
    vocab: Vocabulary,
    max_new: int = 64,
    interpolate: bool = True,
    batch: int = 8,
    c: int | None = 64,
) -> EvalReport:
    """Greedy answers from the full-context prompt, scored by exact match."""
    prompts = [render_prompt(p, "icr", vocab) for p in problems]
    need = max(len(p.prompt) for p in prompts) + max_new
    if need > model.config.max_positions:
        if not interpolate:
            raise SequenceLengthError(f"prompt needs {need} positions; enable interpolation")
        model = extend_positions(model, need)
    report = EvalReport()
    for s in range(0, len(problems), batch):
        chunk = list(range(s, min(s + batch, len(problems))))
        outs = batch_greedy_decode(model, None, [prompts[i].prompt for i in chunk], max_new,
                                   vocab.eos_id, vocab.pad_id)
        for i, out in zip(chunk, outs):
            p = problems[i]
            pred = vocab.decode(out.ids)
            report.rows.append({
                "uid": p.uid, "task": p.task, "n_chunks": len(chunk_problem(p, vocab, c)),
                "length_tokens": p.length_tokens,
                "position": p.position_policy, "gold": p.answer, "pred": pred,
                "correct": exact_match(p.answer, pred),
            })
    return report
