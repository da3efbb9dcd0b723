"""Test-time learning: encode a chunk batch into LoRA weights with N optimizer steps.

Only the last ``T`` steps record a differentiable graph. The state entering
that window is wrapped in :func:`leaf_proxy`, so the outer loss sees earlier
steps as constants and its gradient at the proxy is the truncated
meta-gradient for the adapter initialization.

Chunk gradients are computed per chunk (the adapter is broadcast into one copy
per chunk) and summed in canonical chunk order. The sum therefore does not
depend on how chunks are split into accumulation sub-batches or on the order
in which they were listed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .chunking import ChunkBatch, weighted_nll
from .model import BaseParams, LoraAdapter, ModelConfig, TokenSeq, batch_greedy_decode, forward_logits, hidden_states


class InnerLoopDivergence(FloatingPointError):
    """The inner loop produced a non-finite loss or gradient."""


@dataclass
class InnerHyper:
    """Per-layer-per-step learning rates plus optimizer settings.

    ``lr_table[l, n]`` is the step size of adapted linear ``l`` (both LoRA
    factors) at inner step ``n``.
    """

    lr_table: Tensor
    optimizer: str = "adamw"
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.optimizer not in ("adamw", "sgd"):
            raise ValueError(f"inner optimizer must be 'adamw' or 'sgd', not {self.optimizer!r}")

    @property
    def n_steps(self) -> int:
        return self.lr_table.shape[1]


def init_hyper(config: ModelConfig, n_steps: int, lr: float = 5e-5, optimizer: str = "adamw") -> InnerHyper:
    n_layers = len(config.adapted_layers())
    table = np.full((n_layers, n_steps), lr, dtype=ad.get_default_dtype())
    return InnerHyper(Tensor(table, requires_grad=True), optimizer)


# softplus(_BIAS0) == 1, so an untrained net weighs every token equally
_BIAS0 = math.log(math.e - 1.0)


@dataclass
class TokenWeightNet:
    """Two-layer MLP from a token feature to a non-negative weight."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def tensors(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]

    def raw(self, feats: Tensor) -> Tensor:
        h = ad.tanh(ad.matmul(feats, self.w1) + self.b1)
        return ad.softplus(ad.reshape(ad.matmul(h, self.w2), h.shape[:-1]) + self.b2)

    def __call__(self, feats: Tensor, mask: np.ndarray) -> Tensor:
        """Weights over all masked tokens of the batch, renormalised to mean 1."""
        m = np.asarray(mask, dtype=feats.dtype)
        count = float(m.sum())
        if count == 0:
            raise ValueError("no tokens to weigh")
        w = self.raw(feats) * m
        return w * (count / ad.tsum(w))


def init_weight_net(d_model: int, hidden: int, rng: np.random.Generator) -> TokenWeightNet:
    dt = ad.get_default_dtype()
    bound = 1.0 / math.sqrt(d_model)
    return TokenWeightNet(
        Tensor(rng.uniform(-bound, bound, size=(d_model, hidden)).astype(dt), requires_grad=True),
        Tensor(np.zeros(hidden, dtype=dt), requires_grad=True),
        # zero output layer: the net starts at uniform weights
        Tensor(np.zeros((hidden, 1), dtype=dt), requires_grad=True),
        Tensor(np.full(1, _BIAS0, dtype=dt), requires_grad=True),
    )


@dataclass
class OptState:
    m: list[Tensor] | None = None
    v: list[Tensor] | None = None
    t: int = 0


def _layer_of(i: int) -> int:
    # adapter tensors come as (A, B) pairs, one pair per adapted linear
    return i // 2


def inner_step(
    phi: list[Tensor],
    state: OptState,
    hyper: InnerHyper,
    grads: list[Tensor] | Tensor,
    step: int,
    differentiable: bool = True,
) -> tuple[list[Tensor], OptState]:
    """One update of the adapter tensors ``phi``.

    ``grads`` may be the gradients or a scalar loss to differentiate. Without
    ``differentiable`` the update is computed from detached inputs and the
    outputs carry no graph.
    """
    if isinstance(grads, Tensor):
        grads = ad.backward(grads, phi, create_graph=differentiable)
    for g in grads:
        if not np.all(np.isfinite(g.data)):
            raise InnerLoopDivergence(f"non-finite inner gradient at step {step}")
    lr_table = hyper.lr_table
    if not differentiable:
        phi = [ad.detach(p) for p in phi]
        grads = [ad.detach(g) for g in grads]
        lr_table = ad.detach(lr_table)
        if state.m is not None:
            state = OptState([ad.detach(x) for x in state.m], [ad.detach(x) for x in state.v], state.t)

    with ad.enable_grad() if differentiable else ad.no_grad():
        lrs = [ad.getitem(lr_table, (_layer_of(i), step)) for i in range(len(phi))]
        if hyper.optimizer == "sgd":
            new = [p - lr * g for p, lr, g in zip(phi, lrs, grads)]
            return new, OptState(t=state.t + 1)

        b1, b2 = hyper.betas
        t = state.t + 1
        # moments start at zero, so every step records the same graph shape
        m_prev = state.m or [Tensor(np.zeros_like(p.data)) for p in phi]
        v_prev = state.v or [Tensor(np.zeros_like(p.data)) for p in phi]
        m_new, v_new, new = [], [], []
        for p, lr, g, m, v in zip(phi, lrs, grads, m_prev, v_prev):
            m = m * b1 + g * (1 - b1)
            v = v * b2 + g * g * (1 - b2)
            m_hat = m * (1.0 / (1 - b1**t))
            v_hat = v * (1.0 / (1 - b2**t))
            upd = m_hat / (ad.sqrt(v_hat) + hyper.eps)
            if hyper.weight_decay:
                upd = upd + p * hyper.weight_decay
            new.append(p - lr * upd)
            m_new.append(m)
            v_new.append(v)
        return new, OptState(m_new, v_new, t)


@dataclass
class AdaptationTrace:
    """What an adaptation leaves behind.

    ``states[n]`` is the adapter after ``n`` steps; states up to the window
    entry are detached, later ones carry graph. ``entry`` holds the proxies
    the window starts from, ``losses[n]`` the inner loss before step ``n``.
    """

    states: list[LoraAdapter]
    entry: list[Tensor]
    losses: list[float]
    retained_steps: int
    n_chunks: int
    peak_nodes: int = 0

    @property
    def final(self) -> LoraAdapter:
        return self.states[-1]


def token_weights(
    base: BaseParams,
    net: TokenWeightNet | None,
    ids: np.ndarray,
    mask: np.ndarray,
) -> Tensor:
    """Per-target weights of shape (C, L-1); zero on padding."""
    target_mask = mask[:, 1:]
    if net is None:
        return Tensor(target_mask.astype(ad.get_default_dtype()))
    with ad.no_grad():
        feats = ad.detach(hidden_states(base, None, ids))
    # the feature of a target token is the frozen model's state at that token
    feats = ad.getitem(feats, (slice(None), slice(1, ids.shape[1])))
    return net(feats, target_mask)


def sub_batches(n: int, accum: int) -> list[np.ndarray]:
    """``accum`` consecutive groups of size ``ceil(n / accum)`` (the last may be short)."""
    size = math.ceil(n / accum)
    return [np.arange(s, min(n, s + size)) for s in range(0, n, size)]


def chunk_gradients(
    base: BaseParams,
    phi: list[Tensor],
    template: LoraAdapter,
    ids: np.ndarray,
    weights: Tensor,
    total: Tensor,
    accum: int,
    create_graph: bool,
) -> tuple[list[Tensor], float]:
    """Gradient of the weighted chunk NLL w.r.t. ``phi``, summed chunk by chunk
    in row order. Returns the gradients and the loss value."""
    C = ids.shape[0]
    per_chunk: list[list[Tensor]] = [[] for _ in phi]
    loss_val = 0.0
    for rows in sub_batches(C, accum):
        n = len(rows)
        copies = [ad.broadcast_to(ad.reshape(p, (1,) + p.shape), (n,) + p.shape) for p in phi]
        logits = forward_logits(base, template.with_tensors(copies), ids[rows])
        w = weights if n == C else ad.getitem(weights, rows)
        loss = weighted_nll(logits, ids[rows], w, total)
        if not np.isfinite(loss.data):
            raise InnerLoopDivergence("non-finite inner loss")
        loss_val += float(loss.data)
        for i, g in enumerate(ad.backward(loss, copies, create_graph=create_graph)):
            per_chunk[i].append(g)
    grads = []
    for parts in per_chunk:
        stacked = parts[0] if len(parts) == 1 else ad.concat(parts, 0)
        grads.append(ad.seq_sum(stacked))
    return grads, loss_val


def adapt(
    base: BaseParams,
    adapter: LoraAdapter,
    hyper: InnerHyper,
    batch: ChunkBatch,
    n_steps: int | None = None,
    retain: int | None = None,
    accum: int = 1,
    weight_net: TokenWeightNet | None = None,
    pad_id: int = 0,
) -> AdaptationTrace:
    """Run ``n_steps`` inner steps on the chunk batch; the last ``retain`` are differentiable.

    ``retain=0`` runs every step first-order (inference and validation).
    """
    N = hyper.n_steps if n_steps is None else n_steps
    T = N if retain is None else retain
    if N > hyper.n_steps:
        raise ValueError(f"{N} inner steps but the lr table has {hyper.n_steps} columns")
    if not 0 <= T <= N:
        raise ValueError(f"retention T={T} must satisfy 0 <= T <= N={N}")
    C = len(batch)
    if not 1 <= accum <= C:
        raise ValueError(f"accum={accum} must be between 1 and the chunk count {C}")
    if batch.max_len > base.config.max_positions:
        raise ValueError(f"chunk of {batch.max_len} tokens exceeds max_positions {base.config.max_positions}")

    order = batch.canonical_order()
    ids, mask = batch.permuted(order).padded(pad_id)
    weights = token_weights(base, weight_net, ids, mask)
    total = ad.tsum(weights)
    w_const, total_const = ad.detach(weights), ad.detach(total)

    def grad_fn(phi, n, retained):
        w, tot = (weights, total) if retained else (w_const, total_const)
        return chunk_gradients(base, phi, adapter, ids, w, tot, accum, create_graph=retained)

    ad.reset_peak_nodes()
    phis, entry, losses = unroll(list(adapter.tensors()), grad_fn, hyper, N, T)
    states = [adapter.with_tensors(p) for p in phis]
    return AdaptationTrace(states, entry, losses, T, C, ad.graph_census()["peak"])


def unroll(theta: list[Tensor], grad_fn, hyper: InnerHyper, n_steps: int, retain: int):
    """Truncated unroll of ``n_steps`` inner steps starting from ``theta``.

    ``grad_fn(phi, n, retained)`` returns ``(grads, loss value)``; it must build
    the gradients with graph when ``retained``. Steps before ``n_steps - retain``
    run on detached proxies and record nothing. Returns the per-step states,
    the window's entry proxies and the losses.
    """
    N, T = n_steps, retain
    phi = list(theta)
    states = [[ad.detach(p) for p in phi]]
    entry: list[Tensor] = []
    losses: list[float] = []
    state = OptState()
    for n in range(N):
        retained = n >= N - T
        if not retained or n == N - T:
            phi = [ad.leaf_proxy(p) for p in phi]
            if retained:
                entry = phi
        grads, lv = grad_fn(phi, n, retained)
        losses.append(lv)
        phi, state = inner_step(phi, state, hyper, grads, n, differentiable=retained)
        states.append(phi)
    return states, entry, losses


def answer_with_adapter(
    base: BaseParams,
    trace_or_adapter,
    questions: TokenSeq | list[TokenSeq],
    max_new: int = 64,
    eos_id: int = 1,
    pad_id: int = 0,
):
    """Greedy answers from the adapted model. The prompts hold the question only."""
    adapter = trace_or_adapter.final if isinstance(trace_or_adapter, AdaptationTrace) else trace_or_adapter
    adapter = adapter.map(ad.detach)
    single = isinstance(questions, TokenSeq)
    qs = [questions] if single else list(questions)
    out = batch_greedy_decode(base, adapter, qs, max_new, eos_id, pad_id)
    return out[0] if single else out
