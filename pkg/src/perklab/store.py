"""Saving and restoring trained runs through the checkpoint format."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .checkpoint import Checkpoint, config_dict, load_checkpoint, save_checkpoint
from .inner import InnerHyper, TokenWeightNet
from .meta import WNET_NAMES, MetaParams
from .model import BaseParams, LoraAdapter, ModelConfig
from .optim import AdamWState, TrainState, state_to_json


def model_config_from(d: dict) -> ModelConfig:
    d = dict(d)
    d["adapted_modules"] = tuple(d["adapted_modules"])
    return ModelConfig(**d)


def run_checkpoint(
    method: str,
    base: BaseParams,
    meta: MetaParams | None = None,
    state: TrainState | None = None,
    seed: int = 0,
    extra: dict | None = None,
) -> Checkpoint:
    tensors = {f"base.{k}": v.data for k, v in base.tensors.items()}
    info = {"method": method, **(extra or {})}
    if meta is not None:
        tensors.update({f"meta.{k}": v.data for k, v in meta.named().items()})
        info.update({
            "inner_optimizer": meta.hyper.optimizer,
            "inner_betas": list(meta.hyper.betas),
            "inner_eps": meta.hyper.eps,
            "lora_scale": meta.adapter.scale,
            "weight_net": meta.weight_net is not None,
        })
    step = 0
    if state is not None:
        step = state.step
        info["train_state"] = state_to_json(state)
        tensors.update({f"opt.m.{k}": v for k, v in state.opt.m.items()})
        tensors.update({f"opt.v.{k}": v for k, v in state.opt.v.items()})
        if state.best_params is not None:
            tensors.update({f"best.{k}": v for k, v in state.best_params.items()})
    rng = {"seed": seed, "sampler": "permutation(default_rng([seed, epoch]))", "step": step}
    return Checkpoint(tensors, config_dict(base.config), step, rng, info)


def save_run(path: str | Path, *args, **kwargs) -> Path:
    return save_checkpoint(path, run_checkpoint(*args, **kwargs))


def restore_base(ckpt: Checkpoint) -> BaseParams:
    cfg = model_config_from(ckpt.model_config)
    return BaseParams(cfg, {k: Tensor(v) for k, v in ckpt.group("base").items()})


def restore_meta(ckpt: Checkpoint, config: ModelConfig) -> MetaParams | None:
    t = ckpt.group("meta")
    if not t:
        return None
    info = ckpt.extra
    adapter = LoraAdapter(
        {layer: (Tensor(t[f"lora.{layer}.A"], requires_grad=True), Tensor(t[f"lora.{layer}.B"], requires_grad=True))
         for layer in config.adapted_layers()},
        info["lora_scale"],
    )
    hyper = InnerHyper(Tensor(t["lr_table"], requires_grad=True), info["inner_optimizer"],
                       tuple(info["inner_betas"]), info["inner_eps"])
    wnet = None
    if info.get("weight_net"):
        wnet = TokenWeightNet(*(Tensor(t[f"wnet.{n}"], requires_grad=True) for n in WNET_NAMES))
    return MetaParams(adapter, hyper, wnet)


def restore_state(ckpt: Checkpoint) -> TrainState | None:
    js = ckpt.extra.get("train_state")
    if js is None:
        return None
    best = ckpt.group("best") or None
    return TrainState(
        step=js["step"],
        opt=AdamWState(ckpt.group("opt.m"), ckpt.group("opt.v"), js["opt_t"]),
        best_val=np.inf if js["best_val"] is None else js["best_val"],
        best_step=js["best_step"],
        best_params=best,
        bad_intervals=js["bad_intervals"],
        stopped=js["stopped"],
    )


def load_run(path: str | Path):
    """(checkpoint, base, meta or None)."""
    ckpt = load_checkpoint(path)
    base = restore_base(ckpt)
    return ckpt, base, restore_meta(ckpt, base.config)
