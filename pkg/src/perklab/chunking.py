"""Splitting a long context into a parallel batch of short chunks."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import TokenSeq, token_nll
from .taskgen.vocab import Vocabulary


@dataclass
class ChunkBatch:
    """Chunks of one context. Every chunk starts with a BOS token that is never
    a target; all payload tokens are targets of the inner loss.

    ``provenance`` has one ``(chunk index, payload offset)`` per fact or
    relevant document.
    """

    chunks: list[TokenSeq]
    effective_len: int | None
    provenance: list[tuple[int, int]] = field(default_factory=list)

    def __len__(self):
        return len(self.chunks)

    @property
    def max_len(self) -> int:
        return max(len(c) for c in self.chunks)

    def payloads(self) -> list[np.ndarray]:
        return [c.ids[1:] for c in self.chunks]

    def padded(self, pad_id: int = 0, width: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        """(ids, mask) arrays of shape (C, width); mask marks real target tokens."""
        width = width or self.max_len
        ids = np.full((len(self.chunks), width), pad_id, dtype=np.int64)
        mask = np.zeros((len(self.chunks), width), dtype=bool)
        for i, c in enumerate(self.chunks):
            ids[i, : len(c)] = c.ids
            mask[i, : len(c)] = c.loss_mask
        return ids, mask

    def canonical_order(self) -> list[int]:
        """Chunk indices sorted by token content. Adaptation always walks chunks
        in this order, which makes it blind to how the chunks were listed."""
        return sorted(range(len(self.chunks)), key=lambda i: tuple(self.chunks[i].ids.tolist()))

    def permuted(self, order: Sequence[int]) -> "ChunkBatch":
        inv = {old: new for new, old in enumerate(order)}
        prov = [(inv[c], off) for c, off in self.provenance]
        return ChunkBatch([self.chunks[i] for i in order], self.effective_len, prov)


def _bos_seq(bos_id: int, payload: Sequence[int]) -> TokenSeq:
    ids = np.concatenate([[bos_id], np.asarray(payload, dtype=np.int64)])
    mask = np.ones(len(ids), dtype=bool)
    mask[0] = False
    return TokenSeq(ids, mask)


def _encode(x, vocab: Vocabulary | None) -> list[int]:
    if isinstance(x, str):
        if vocab is None:
            raise ValueError("a vocabulary is needed to chunk raw text")
        return vocab.encode(x)
    if isinstance(x, TokenSeq):
        return x.ids.tolist()
    return [int(i) for i in x]


def balanced_sizes(total: int, n: int) -> list[int]:
    """``n`` sizes summing to ``total`` that differ by at most one."""
    base, extra = divmod(total, n)
    return [base + (1 if i < extra else 0) for i in range(n)]


def chunk_context(
    context,
    facts: Sequence = (),
    c: int = 64,
    vocab: Vocabulary | None = None,
    rng: np.random.Generator | None = None,
    bos_id: int | None = None,
) -> ChunkBatch:
    """Split a haystack into ``ceil(L / c)`` near-equal chunks and drop the facts in.

    ``context`` is text or token ids with the facts already removed. Fact ``i``
    gets the prefix ``fact i :`` and lands at a uniform position of a uniformly
    chosen chunk.
    """
    tokens = _encode(context, vocab)
    if not tokens and not facts:
        raise ValueError("cannot chunk an empty context")
    if bos_id is None:
        if vocab is None:
            raise ValueError("bos_id or vocab is required")
        bos_id = vocab.eos_id
    rng = rng if rng is not None else np.random.default_rng(0)

    fact_ids = []
    for i, f in enumerate(facts, start=1):
        fact_ids.append(_encode(f"fact {i} : ", vocab) + _encode(f, vocab))
    longest = max((len(f) for f in fact_ids), default=0)
    if c < longest:
        raise ValueError(f"effective length {c} is shorter than the longest prefixed fact ({longest})")

    n = max(1, math.ceil(len(tokens) / c))
    bounds = np.cumsum([0] + balanced_sizes(len(tokens), n))
    pieces = [tokens[bounds[i] : bounds[i + 1]] for i in range(n)]

    # placement per fact, then build chunks left to right
    placed: list[list[tuple[int, int]]] = [[] for _ in range(n)]
    for fi in range(len(fact_ids)):
        ch = int(rng.integers(n))
        pos = int(rng.integers(len(pieces[ch]) + 1))
        placed[ch].append((pos, fi))
    provenance: list[tuple[int, int]] = [(0, 0)] * len(fact_ids)
    chunks = []
    for ch in range(n):
        out: list[int] = []
        prev = 0
        for pos, fi in sorted(placed[ch]):
            out.extend(pieces[ch][prev:pos])
            provenance[fi] = (ch, len(out))
            out.extend(fact_ids[fi])
            prev = pos
        out.extend(pieces[ch][prev:])
        chunks.append(_bos_seq(bos_id, out))
    return ChunkBatch(chunks, c, provenance)


def chunk_documents(
    documents: Sequence,
    c: int | None = None,
    vocab: Vocabulary | None = None,
    relevant: Sequence[int] = (),
    bos_id: int | None = None,
) -> ChunkBatch:
    """Pack whole documents into chunks.

    With ``c=None`` every document is its own chunk. Otherwise the documents are
    split into ``ceil(total / c)`` contiguous groups of near-equal document count.
    """
    docs = [_encode(d, vocab) for d in documents]
    if not docs:
        raise ValueError("cannot chunk an empty context")
    if bos_id is None:
        if vocab is None:
            raise ValueError("bos_id or vocab is required")
        bos_id = vocab.eos_id
    if c is None:
        n = len(docs)
    else:
        n = min(len(docs), max(1, math.ceil(sum(len(d) for d in docs) / c)))
    bounds = np.cumsum([0] + balanced_sizes(len(docs), n))
    chunks, where = [], {}
    for ch in range(n):
        out: list[int] = []
        for di in range(bounds[ch], bounds[ch + 1]):
            where[di] = (ch, len(out))
            out.extend(docs[di])
        chunks.append(_bos_seq(bos_id, out))
    return ChunkBatch(chunks, c, [where[r] for r in relevant])


def weighted_nll(logits: Tensor, ids: np.ndarray, weights, total: Tensor | float | None = None) -> Tensor:
    """``sum(w_t * nll_t) / sum(w_t)`` over every predicted position.

    ``weights`` has the shape of ``ids[..., 1:]`` (zero on padding). ``total``
    overrides the normaliser, which lets a sub-batch of chunks share the
    normaliser of the whole batch.
    """
    ids = np.asarray(ids)
    w = weights if isinstance(weights, Tensor) else Tensor(np.asarray(weights, dtype=logits.dtype))
    if total is None:
        total = ad.tsum(w)
    tval = total.data if isinstance(total, Tensor) else total
    if not np.all(np.asarray(tval) > 0):
        raise ValueError("token weights sum to zero")
    nll = token_nll(logits, ids)
    return ad.tsum(nll * w) / total
