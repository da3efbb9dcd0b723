from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

SCHEMA_VERSION = "v1"
TASKS = ("qa1", "qa2", "qa3", "recall", "relation", "aggregate", "api")
SPLITS = ("train", "val", "test")


@dataclass
class ReasoningProblem:
    """One (context, question, answer) tuple plus generation metadata.

    ``documents`` holds the independent units the context is made of (records
    or API docs); for needle tasks it holds the haystack with the facts
    removed and ``facts`` the supporting/distractor facts in temporal order.
    ``needle_positions`` are character offsets of the facts in ``context``
    (needle tasks) or document slots of the relevant documents.
    """

    context: str
    question: str
    answer: str
    task: str
    hops: int
    length_tokens: int
    needle_positions: list[int]
    split: str = "train"
    documents: list[str] = field(default_factory=list)
    facts: list[str] = field(default_factory=list)
    support: str = ""
    position_policy: str = ""
    uid: str = ""

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")

    def to_json(self) -> str:
        rec = {"v": SCHEMA_VERSION}
        rec.update(asdict(self))
        return json.dumps(rec, sort_keys=True, ensure_ascii=False)

    @classmethod
    def from_json(cls, line: str) -> "ReasoningProblem":
        rec = json.loads(line)
        version = rec.pop("v", None)
        if version != SCHEMA_VERSION:
            raise ValueError(f"corpus schema version {version!r} is not {SCHEMA_VERSION!r}")
        return cls(**rec)


def write_jsonl(problems: Iterable[ReasoningProblem], path: str | Path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for p in problems:
            fh.write(p.to_json() + "\n")
            n += 1
    return n


def read_jsonl(path: str | Path) -> list[ReasoningProblem]:
    return list(iter_jsonl(path))


def iter_jsonl(path: str | Path) -> Iterator[ReasoningProblem]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                yield ReasoningProblem.from_json(line)
