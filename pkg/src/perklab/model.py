"""Tiny GPT-2 style causal LM with LoRA adapters on every attention/MLP linear."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LINEARS = ("q", "k", "v", "o", "fc", "proj")


class SequenceLengthError(ValueError):
    pass


class VocabError(ValueError):
    pass


class EmptyLossError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_positions: int = 512
    lora_rank: int = 8
    lora_alpha: float = 16.0
    rs_lora: bool = True
    adapted_modules: tuple[str, ...] = LINEARS
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.lora_rank < 1:
            raise ValueError("lora_rank must be >= 1")
        unknown = set(self.adapted_modules) - set(LINEARS)
        if unknown:
            raise ValueError(f"unknown adapted modules {sorted(unknown)}")

    @property
    def lora_scale(self) -> float:
        return lora_scale(self.lora_alpha, self.lora_rank, self.rs_lora)

    def linear_shape(self, name: str) -> tuple[int, int]:
        """(d_in, d_out) of a block linear."""
        d, h = self.d_model, self.d_model * self.mlp_ratio
        return {"fc": (d, h), "proj": (h, d)}.get(name, (d, d))

    def adapted_layers(self) -> list[str]:
        return [f"h{i}.{m}" for i in range(self.n_layers) for m in self.adapted_modules]


def lora_scale(alpha: float, rank: int, rs_lora: bool) -> float:
    return alpha / math.sqrt(rank) if rs_lora else alpha / rank


@dataclass
class TokenSeq:
    ids: np.ndarray
    loss_mask: np.ndarray | None = None

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.loss_mask is None:
            self.loss_mask = np.ones(len(self.ids), dtype=bool)
        self.loss_mask = np.asarray(self.loss_mask, dtype=bool)
        if self.loss_mask.shape != self.ids.shape:
            raise ValueError("loss_mask length must equal ids length")

    def __len__(self):
        return len(self.ids)


@dataclass
class BaseParams:
    config: ModelConfig
    tensors: dict[str, Tensor]

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.tensors.items())

    def set_trainable(self, flag: bool) -> None:
        for t in self.tensors.values():
            t.requires_grad = flag

    def copy(self) -> "BaseParams":
        return BaseParams(self.config, {k: Tensor(v.data.copy()) for k, v in self.tensors.items()})


def init_base(config: ModelConfig, rng: np.random.Generator, std: float = 0.02) -> BaseParams:
    dt = ad.get_default_dtype()
    d = config.d_model

    def normal(*shape, scale=std):
        return Tensor(rng.normal(0.0, scale, size=shape).astype(dt))

    t: dict[str, Tensor] = {
        "wte": normal(config.vocab_size, d),
        "wpe": normal(config.max_positions, d, scale=0.01),
    }
    proj_std = std / math.sqrt(2 * config.n_layers)
    for i in range(config.n_layers):
        for ln in ("ln1", "ln2"):
            t[f"h{i}.{ln}.g"] = Tensor(np.ones(d, dtype=dt))
            t[f"h{i}.{ln}.b"] = Tensor(np.zeros(d, dtype=dt))
        for name in LINEARS:
            d_in, d_out = config.linear_shape(name)
            s = proj_std if name in ("o", "proj") else std
            t[f"h{i}.{name}.w"] = normal(d_in, d_out, scale=s)
            t[f"h{i}.{name}.b"] = Tensor(np.zeros(d_out, dtype=dt))
    t["ln_f.g"] = Tensor(np.ones(d, dtype=dt))
    t["ln_f.b"] = Tensor(np.zeros(d, dtype=dt))
    t["head.w"] = normal(d, config.vocab_size)
    t["head.b"] = Tensor(np.zeros(config.vocab_size, dtype=dt))
    return BaseParams(config, t)


@dataclass
class LoraAdapter:
    """Low-rank factors per adapted linear: ``A`` is (r, d_in), ``B`` is (d_out, r).

    Factors may carry a leading batch axis, in which case row ``i`` of the
    input batch uses adapter ``i``.
    """

    factors: dict[str, tuple[Tensor, Tensor]]
    scale: float

    def names(self) -> list[str]:
        return list(self.factors)

    def tensors(self) -> list[Tensor]:
        return [x for a, b in self.factors.values() for x in (a, b)]

    def with_tensors(self, flat: list[Tensor]) -> "LoraAdapter":
        it = iter(flat)
        return LoraAdapter({k: (next(it), next(it)) for k in self.factors}, self.scale)

    def map(self, fn) -> "LoraAdapter":
        return self.with_tensors([fn(t) for t in self.tensors()])


def init_lora(config: ModelConfig, rng: np.random.Generator) -> LoraAdapter:
    """Kaiming-uniform ``A`` and zero ``B``, so the adapter starts as a no-op."""
    dt = ad.get_default_dtype()
    r = config.lora_rank
    factors = {}
    for name in config.adapted_layers():
        d_in, d_out = config.linear_shape(name.split(".")[1])
        bound = 1.0 / math.sqrt(d_in)
        a = Tensor(rng.uniform(-bound, bound, size=(r, d_in)).astype(dt))
        b = Tensor(np.zeros((d_out, r), dtype=dt))
        factors[name] = (a, b)
    return LoraAdapter(factors, config.lora_scale)


# --------------------------------------------------------------------------
# forward


def lora_linear(x: Tensor, w: Tensor, bias: Tensor | None, lora=None, scale: float = 1.0) -> Tensor:
    """``x W + b + scale * (x A^T) B^T``."""
    y = ad.matmul(x, w)
    if bias is not None:
        y = y + bias
    if lora is not None:
        a, b = lora
        h = ad.matmul(x, ad.swapaxes(a, -1, -2))
        y = y + ad.matmul(h, ad.swapaxes(b, -1, -2)) * scale
    return y


def layer_norm(x: Tensor, g: Tensor, b: Tensor, eps: float = 1e-5) -> Tensor:
    mu = ad.mean(x, -1, keepdims=True)
    xc = x - mu
    var = ad.mean(xc * xc, -1, keepdims=True)
    inv = ad.power(var + eps, -0.5)
    return xc * inv * g + b


_MASKS: dict[tuple[int, str], np.ndarray] = {}


def _causal_mask(n: int, dtype) -> np.ndarray:
    key = (n, np.dtype(dtype).str)
    m = _MASKS.get(key)
    if m is None:
        m = np.triu(np.full((n, n), -1e9, dtype=dtype), k=1)
        _MASKS[key] = m
    return m


def _check_ids(ids: np.ndarray, config: ModelConfig) -> None:
    if ids.shape[-1] > config.max_positions:
        raise SequenceLengthError(
            f"sequence length {ids.shape[-1]} exceeds max_positions {config.max_positions}"
        )
    if ids.size and (ids.max() >= config.vocab_size or ids.min() < 0):
        raise VocabError(f"token id out of range for vocab of {config.vocab_size}")


def hidden_states(base: BaseParams, adapter: LoraAdapter | None, ids: np.ndarray) -> Tensor:
    """Final (post-ln_f) hidden states, shape (..., L, d)."""
    cfg = base.config
    ids = np.asarray(ids)
    _check_ids(ids, cfg)
    L = ids.shape[-1]
    x = ad.take_rows(base["wte"], ids) + ad.getitem(base["wpe"], slice(0, L))
    mask = _causal_mask(L, x.dtype)
    H = cfg.n_heads
    dh = cfg.d_model // H
    lead = ids.shape[:-1]
    fac = adapter.factors if adapter is not None else {}
    scale = adapter.scale if adapter is not None else 1.0
    for i in range(cfg.n_layers):
        p = f"h{i}"
        hx = layer_norm(x, base[f"{p}.ln1.g"], base[f"{p}.ln1.b"])
        q = lora_linear(hx, base[f"{p}.q.w"], base[f"{p}.q.b"], fac.get(f"{p}.q"), scale)
        k = lora_linear(hx, base[f"{p}.k.w"], base[f"{p}.k.b"], fac.get(f"{p}.k"), scale)
        v = lora_linear(hx, base[f"{p}.v.w"], base[f"{p}.v.b"], fac.get(f"{p}.v"), scale)
        nd = len(lead)
        perm = tuple(range(nd)) + (nd + 1, nd, nd + 2)
        q = ad.transpose(ad.reshape(q, lead + (L, H, dh)), perm)
        k = ad.transpose(ad.reshape(k, lead + (L, H, dh)), perm)
        v = ad.transpose(ad.reshape(v, lead + (L, H, dh)), perm)
        att = ad.matmul(q, ad.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh)) + mask
        att = ad.softmax(att, -1)
        o = ad.reshape(ad.transpose(ad.matmul(att, v), perm), lead + (L, cfg.d_model))
        x = x + lora_linear(o, base[f"{p}.o.w"], base[f"{p}.o.b"], fac.get(f"{p}.o"), scale)
        hx = layer_norm(x, base[f"{p}.ln2.g"], base[f"{p}.ln2.b"])
        hx = lora_linear(hx, base[f"{p}.fc.w"], base[f"{p}.fc.b"], fac.get(f"{p}.fc"), scale)
        hx = ad.gelu(hx)
        x = x + lora_linear(hx, base[f"{p}.proj.w"], base[f"{p}.proj.b"], fac.get(f"{p}.proj"), scale)
    return layer_norm(x, base["ln_f.g"], base["ln_f.b"])


def forward_logits(base: BaseParams, adapter: LoraAdapter | None, seq) -> Tensor:
    """Logits of shape (..., L, vocab). ``seq`` is a TokenSeq or an int array (..., L).

    A batched adapter (factors with a leading axis) needs a 2-d id array whose
    first axis matches it.
    """
    ids = seq.ids if isinstance(seq, TokenSeq) else np.asarray(seq)
    h = hidden_states(base, adapter, ids)
    return lora_linear(h, base["head.w"], base["head.b"])


# --------------------------------------------------------------------------
# losses


def token_nll(logits: Tensor, ids: np.ndarray) -> Tensor:
    """Per-position NLL of ``ids[..., 1:]`` under ``logits[..., :-1, :]``; shape (..., L-1)."""
    ids = np.asarray(ids)
    sl = (Ellipsis, slice(0, ids.shape[-1] - 1), slice(None))
    logp = ad.log_softmax(ad.getitem(logits, sl), -1)
    return ad.neg(ad.pick(logp, ids[..., 1:]))


def masked_mean_nll(logits: Tensor, ids: np.ndarray, mask: np.ndarray) -> Tensor:
    """Sum of NLL over target positions with ``mask`` true, divided by their count.

    ``mask`` is indexed like ``ids``; position 0 can never be a target.
    """
    mask = np.asarray(mask, dtype=bool)[..., 1:]
    count = int(mask.sum())
    if count == 0:
        raise EmptyLossError("no predicted positions selected by the mask")
    nll = token_nll(logits, ids)
    w = mask.astype(nll.dtype) / count
    return ad.tsum(nll * w)


def nll_loss(logits: Tensor, seq, pad_id: int | None = None) -> Tensor:
    """Mean token-level NLL over every predicted position (all but the first).

    For a batch (2-d ids) the mean is over all predicted tokens of the batch,
    i.e. normalised by the total token count. Targets equal to ``pad_id`` are
    skipped.
    """
    ids = seq.ids if isinstance(seq, TokenSeq) else np.asarray(seq)
    mask = np.ones(ids.shape, dtype=bool)
    if pad_id is not None:
        mask &= ids != pad_id
    return masked_mean_nll(logits, ids, mask)


def reasoning_loss(logits: Tensor, seq, loss_mask: np.ndarray | None = None) -> Tensor:
    """NLL restricted to answer positions, normalised by the number of answer tokens."""
    if isinstance(seq, TokenSeq):
        ids, mask = seq.ids, seq.loss_mask
    else:
        ids, mask = np.asarray(seq), loss_mask
    if mask is None or not np.asarray(mask)[..., 1:].any():
        raise EmptyLossError("reasoning loss needs at least one answer position")
    return masked_mean_nll(logits, ids, mask)


# --------------------------------------------------------------------------
# decoding / positions


def greedy_decode(
    base: BaseParams,
    adapter: LoraAdapter | None,
    prompt: TokenSeq,
    max_new: int = 64,
    eos_id: int = 1,
) -> TokenSeq:
    """Append argmax tokens until ``eos_id`` or ``max_new`` tokens; ties go to the lowest id."""
    return batch_greedy_decode(base, adapter, [prompt], max_new, eos_id)[0]


def batch_greedy_decode(
    base: BaseParams,
    adapter: LoraAdapter | None,
    prompts: list[TokenSeq],
    max_new: int = 64,
    eos_id: int = 1,
    pad_id: int = 0,
) -> list[TokenSeq]:
    """Greedy decoding for several prompts at once.

    ``adapter`` may be shared or batched with one row per prompt. The returned
    sequences hold only generated tokens and never include ``eos_id``.
    """
    cfg = base.config
    lengths = np.array([len(p) for p in prompts])
    if lengths.max() + max_new > cfg.max_positions:
        raise SequenceLengthError(
            f"prompt of {lengths.max()} tokens plus {max_new} new tokens exceeds max_positions {cfg.max_positions}"
        )
    buf = np.full((len(prompts), int(lengths.max()) + max_new), pad_id, dtype=np.int64)
    for i, p in enumerate(prompts):
        buf[i, : len(p)] = p.ids
    out: list[list[int]] = [[] for _ in prompts]
    done = np.zeros(len(prompts), dtype=bool)
    cur = lengths.copy()
    rows = np.arange(len(prompts))
    with ad.no_grad():
        for _ in range(max_new):
            if done.all():
                break
            width = int(cur.max())
            logits = forward_logits(base, adapter, buf[:, :width]).data
            nxt = np.argmax(logits[rows, cur - 1], axis=-1)
            for i in rows:
                if done[i]:
                    continue
                tok = int(nxt[i])
                if tok == eos_id:
                    done[i] = True
                    continue
                out[i].append(tok)
                buf[i, cur[i]] = tok
                cur[i] += 1
    return [TokenSeq(np.array(o, dtype=np.int64)) for o in out]


def extend_positions(base: BaseParams, new_max: int) -> BaseParams:
    """Grow the positional table by linear interpolation of the existing rows.

    Position ``p`` of the new table reads the old table at fractional
    coordinate ``p * (M - 1) / (new_max - 1)``; both endpoints map onto the old
    endpoints exactly.
    """
    cfg = base.config
    old_max = cfg.max_positions
    if new_max <= old_max:
        raise ValueError(f"new_max ({new_max}) must exceed max_positions ({old_max})")
    old = base["wpe"].data
    coords = np.arange(new_max) * (old_max - 1) / (new_max - 1)
    lo = np.floor(coords).astype(int)
    hi = np.minimum(lo + 1, old_max - 1)
    frac = (coords - lo)[:, None].astype(old.dtype)
    table = old[lo] * (1 - frac) + old[hi] * frac
    tensors = dict(base.tensors)
    tensors["wpe"] = Tensor(table.astype(old.dtype), requires_grad=base["wpe"].requires_grad)
    return BaseParams(replace(cfg, max_positions=new_max), tensors)
