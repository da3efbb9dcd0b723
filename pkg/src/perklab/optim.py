"""Outer optimizer, learning-rate schedule and the shared training loop.

Both the meta-learner and the in-context baseline train through
:func:`train_loop`, so they see the same sampler, schedule and early stopping.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class NumericalError(FloatingPointError):
    """Training hit a non-finite loss."""


@dataclass
class TrainConfig:
    lr: float = 1e-5
    weight_decay: float = 0.01
    warmup_frac: float = 0.03
    max_epochs: int = 2
    meta_batch: int = 4
    patience: int = 3
    val_interval: int = 50
    max_steps: int | None = None
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    # per-parameter multipliers on the scheduled rate, keyed by parameter name
    lr_scales: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ValueError("warmup_frac must lie in [0, 1)")
        if self.meta_batch < 1 or self.max_epochs < 1 or self.val_interval < 1:
            raise ValueError("meta_batch, max_epochs and val_interval must be positive")

    def total_steps(self, n_train: int) -> int:
        per_epoch = math.ceil(n_train / self.meta_batch)
        total = per_epoch * self.max_epochs
        return total if self.max_steps is None else min(total, self.max_steps)


def cosine_lr(step: int, total: int, peak: float, warmup_frac: float) -> float:
    """Linear warm-up from 0 to ``peak``, then cosine decay to 0 at ``total``."""
    warm = int(round(warmup_frac * total))
    if step < warm:
        return peak * step / warm
    if total <= warm:
        return peak
    progress = min(1.0, (step - warm) / (total - warm))
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamWState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adamw_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: AdamWState,
    lr: float,
    weight_decay: float = 0.01,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    lr_scales: Mapping[str, float] | None = None,
) -> dict[str, Tensor]:
    """AdamW with decoupled weight decay. Returns new tensors; inputs are left alone.

    ``lr_scales`` multiplies the rate of the named parameters, which lets
    small-magnitude tensors such as step sizes move in proportion to their size."""
    b1, b2 = betas
    t = state.t + 1
    out = {}
    for name, p in params.items():
        g = np.asarray(grads[name])
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        m = state.m.get(name, np.zeros_like(p.data)) * b1 + (1 - b1) * g
        v = state.v.get(name, np.zeros_like(p.data)) * b2 + (1 - b2) * g * g
        state.m[name], state.v[name] = m.astype(p.dtype), v.astype(p.dtype)
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        step_lr = lr * (lr_scales or {}).get(name, 1.0)
        new = p.data - step_lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * p.data)
        out[name] = Tensor(new.astype(p.dtype), requires_grad=p.requires_grad)
    state.t = t
    return out


@dataclass
class TrainState:
    """Everything needed to continue a run: the sampler is a pure function of
    (seed, epoch), so the step counter doubles as the RNG position."""

    step: int = 0
    opt: AdamWState = field(default_factory=AdamWState)
    best_val: float = math.inf
    best_step: int = 0
    best_params: dict[str, np.ndarray] | None = None
    bad_intervals: int = 0
    stopped: bool = False


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    """Uniform sampling without replacement within an epoch."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def batch_indices(cfg: TrainConfig, step: int, n_train: int) -> np.ndarray:
    per_epoch = math.ceil(n_train / cfg.meta_batch)
    epoch, j = divmod(step, per_epoch)
    order = epoch_order(cfg.seed, epoch, n_train)
    return order[j * cfg.meta_batch : (j + 1) * cfg.meta_batch]


GradFn = Callable[[dict[str, Tensor], np.ndarray], tuple[float, dict[str, np.ndarray]]]


def train_loop(
    params: dict[str, Tensor],
    grad_fn: GradFn,
    val_fn: Callable[[dict[str, Tensor]], float] | None,
    n_train: int,
    cfg: TrainConfig,
    log_path: str | Path | None = None,
    state: TrainState | None = None,
    on_step: Callable[[dict[str, Tensor], TrainState], None] | None = None,
) -> tuple[dict[str, Tensor], list[dict], TrainState]:
    """Outer loop with cosine schedule and validation-loss early stopping.

    ``grad_fn(params, indices)`` returns the mean loss and gradients over the
    problems at ``indices``. Returns the best-validation parameters (the last
    ones when there is no validation), the log records and the final state.
    """
    if n_train < 1:
        raise ValueError("empty training set")
    total = cfg.total_steps(n_train)
    state = state or TrainState()
    log: list[dict] = []
    fh = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        while state.step < total and not state.stopped:
            idx = batch_indices(cfg, state.step, n_train)
            ad.reset_peak_nodes()
            loss, grads = grad_fn(params, idx)
            if not math.isfinite(loss):
                raise NumericalError(f"non-finite training loss at step {state.step}")
            peak = ad.graph_census()["peak"]
            lr = cosine_lr(state.step, total, cfg.lr, cfg.warmup_frac)
            params = adamw_step(params, grads, state.opt, lr, cfg.weight_decay, cfg.betas, cfg.eps,
                                cfg.lr_scales)
            state.step += 1
            rec = {"step": state.step, "train_loss": loss, "val_loss": None, "lr": lr, "peak_graph_nodes": peak}
            if val_fn is not None and (state.step % cfg.val_interval == 0 or state.step == total):
                val = val_fn(params)
                if not math.isfinite(val):
                    raise NumericalError(f"non-finite validation loss at step {state.step}")
                rec["val_loss"] = val
                if val < state.best_val:
                    state.best_val, state.best_step, state.bad_intervals = val, state.step, 0
                    state.best_params = {k: v.data.copy() for k, v in params.items()}
                else:
                    state.bad_intervals += 1
                    if state.bad_intervals >= cfg.patience:
                        state.stopped = True
            log.append(rec)
            if fh:
                fh.write(json.dumps(rec) + "\n")
                fh.flush()
            if on_step is not None:
                on_step(params, state)
    finally:
        if fh:
            fh.close()
    if state.best_params is not None:
        params = {k: Tensor(state.best_params[k], requires_grad=params[k].requires_grad) for k in params}
    return params, log, state


def state_to_json(state: TrainState) -> dict:
    """JSON-safe scalars of a TrainState; arrays travel through the checkpoint blob."""
    d = asdict(state)
    d.pop("opt")
    d.pop("best_params")
    d["opt_t"] = state.opt.t
    if not math.isfinite(d["best_val"]):
        d["best_val"] = None
    return d
