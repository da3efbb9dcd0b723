"""Turning a ReasoningProblem into token sequences.

Two layouts share the same problem files:

* ``icr``: one prompt ``<eos> context <sep> question <q> answer <eos>`` with
  the loss on the answer and the closing ``<eos>``.
* ``ttl``: the context as a chunk batch, plus a question-only prompt
  ``<eos> question <q>`` and its answer-completed target.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .chunking import ChunkBatch, chunk_context, chunk_documents
from .model import TokenSeq
from .taskgen.problem import ReasoningProblem
from .taskgen.vocab import Q, Vocabulary

NEEDLE_TASKS = ("qa1", "qa2", "qa3")


@dataclass
class ICRPrompt:
    full: TokenSeq  # prompt plus answer, loss on the answer
    prompt: TokenSeq  # up to and including <q>, for decoding


@dataclass
class TTLPrompt:
    batch: ChunkBatch
    question: TokenSeq  # decode prompt, no context tokens
    target: TokenSeq  # question prompt plus answer, loss on the answer


def answer_text(problem: ReasoningProblem, with_support: bool = False) -> str:
    if with_support and problem.support:
        return f"{problem.support} {Q} {problem.answer}"
    return problem.answer


def _with_answer(vocab: Vocabulary, prompt: list[int], answer: str) -> TokenSeq:
    ans = vocab.encode(answer) + [vocab.eos_id]
    ids = prompt + ans
    mask = np.zeros(len(ids), dtype=bool)
    mask[len(prompt):] = True
    return TokenSeq(np.array(ids), mask)


def problem_rng(problem: ReasoningProblem) -> np.random.Generator:
    """Generator seeded from the problem text, so chunking is a pure function of it."""
    return np.random.default_rng(zlib.crc32(problem.context.encode("utf-8")))


def chunk_problem(problem: ReasoningProblem, vocab: Vocabulary, c: int | None = 64) -> ChunkBatch:
    """Chunk batch for a problem: needle haystacks are re-chunked with prefixed
    facts, records packed ``c`` tokens at a time, API docs one per chunk."""
    if problem.task in NEEDLE_TASKS:
        haystack = " ".join(problem.documents)
        return chunk_context(haystack, problem.facts, c or 64, vocab, problem_rng(problem))
    if problem.task == "api":
        return chunk_documents(problem.documents, None, vocab, relevant=problem.needle_positions)
    return chunk_documents(problem.documents, c, vocab, relevant=problem.needle_positions[:2])


def render_prompt(
    problem: ReasoningProblem,
    mode: str,
    vocab: Vocabulary,
    c: int | None = 64,
    with_support: bool = False,
):
    answer = answer_text(problem, with_support)
    question = vocab.encode(problem.question)
    if mode == "icr":
        prompt = [vocab.eos_id] + vocab.encode(problem.context) + [vocab.sep_id] + question + [vocab.q_id]
        return ICRPrompt(_with_answer(vocab, prompt, answer), TokenSeq(np.array(prompt)))
    if mode == "ttl":
        prompt = [vocab.eos_id] + question + [vocab.q_id]
        return TTLPrompt(
            chunk_problem(problem, vocab, c),
            TokenSeq(np.array(prompt)),
            _with_answer(vocab, prompt, answer),
        )
    raise ValueError(f"render mode must be 'icr' or 'ttl', not {mode!r}")
