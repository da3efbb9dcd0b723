"""Seeded generators for the needle, student-records and API retrieval tasks."""

from __future__ import annotations

from typing import Sequence

import re

import numpy as np

from .api import ApiSpec, gen_api, reposition
from .needle import NeedleSpec, gen_needle
from .problem import (
    SCHEMA_VERSION,
    SPLITS,
    TASKS,
    ReasoningProblem,
    iter_jsonl,
    read_jsonl,
    write_jsonl,
)
from .records import RecordsSpec, gen_records
from .vocab import OutOfVocabularyError, Vocabulary, build_vocab, normalize_answer, tokenize

FAMILY = {
    "qa1": "needle", "qa2": "needle", "qa3": "needle",
    "recall": "records", "relation": "records", "aggregate": "records",
    "api": "api",
}


def generate(task: str, spec, split: str = "train", rng: np.random.Generator | None = None) -> ReasoningProblem:
    """Dispatch to the family generator of ``task``."""
    fam = FAMILY.get(task)
    if fam == "needle":
        return gen_needle(spec, task, split, rng)
    if fam == "records":
        return gen_records(spec, task, split, rng)
    if fam == "api":
        return gen_api(spec, split, rng)
    raise ValueError(f"unknown task {task!r}")


def generate_corpus(task: str, spec, n: int, split: str, seed: int) -> list[ReasoningProblem]:
    """``n`` problems from one seeded stream; uids are ``<split>-<index>``."""
    rng = np.random.default_rng([seed, SPLITS.index(split)])
    out = []
    for i in range(n):
        p = generate(task, spec, split, rng)
        p.uid = f"{split}-{i}"
        out.append(p)
    return out


class SplitLeakError(ValueError):
    pass


_RECORD_RE = re.compile(r"Student Id: (\d+), Student Name: (\w+) (\w+)")


def split_entities(problem: ReasoningProblem) -> set[str]:
    """Entities that must never be shared between train and evaluation splits.

    Records: every student id and name in the context. API: the gold tool.
    Needle tasks draw all splits from one shared pool and contribute nothing.
    """
    fam = FAMILY[problem.task]
    if fam == "records":
        out = set()
        for sid, first, last in _RECORD_RE.findall(problem.context):
            out.update((f"id:{sid}", f"name:{first} {last}"))
        return out
    if fam == "api":
        return {"tool:" + problem.answer.split("(", 1)[0]}
    return set()


def check_disjoint(train: Sequence[ReasoningProblem], other: Sequence[ReasoningProblem]) -> None:
    """Raise :class:`SplitLeakError` if any entity of ``other`` occurs in ``train``."""
    seen = set().union(*(split_entities(p) for p in train)) if train else set()
    for p in other:
        shared = split_entities(p) & seen
        if shared:
            raise SplitLeakError(f"{p.uid or p.split} shares {sorted(shared)[:3]} with the training split")


__all__ = [
    "SplitLeakError", "split_entities", "check_disjoint",
    "ApiSpec", "NeedleSpec", "RecordsSpec", "ReasoningProblem", "Vocabulary",
    "OutOfVocabularyError", "SCHEMA_VERSION", "SPLITS", "TASKS", "FAMILY",
    "build_vocab", "gen_api", "gen_needle", "gen_records", "generate", "generate_corpus",
    "normalize_answer", "reposition", "tokenize", "read_jsonl", "write_jsonl", "iter_jsonl",
]
