"""Accuracy and profiling reports, written as CSV and JSON."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

from .taskgen.vocab import normalize_answer


def exact_match(gold: str, pred: str) -> bool:
    return normalize_answer(gold) == normalize_answer(pred)


@dataclass
class EvalReport:
    """Per-problem rows plus, for grid runs, one cell per (train, test) setting.

    Row keys: uid, task, n_chunks, length_tokens, position, gold, pred, correct.
    """

    rows: list[dict] = field(default_factory=list)
    grid: dict[tuple[str, str], dict] = field(default_factory=dict)
    axis: str = ""

    @property
    def count(self) -> int:
        return len(self.rows)

    @property
    def accuracy(self) -> float:
        return sum(r["correct"] for r in self.rows) / len(self.rows) if self.rows else 0.0

    def buckets(self, keys=("task", "n_chunks", "position")) -> dict[tuple, dict]:
        out: dict[tuple, dict] = {}
        for r in self.rows:
            cell = out.setdefault(tuple(r[k] for k in keys), {"correct": 0, "count": 0})
            cell["correct"] += int(r["correct"])
            cell["count"] += 1
        for cell in out.values():
            cell["accuracy"] = cell["correct"] / cell["count"]
        return out

    def per_task(self) -> dict[str, float]:
        return {k[0]: v["accuracy"] for k, v in self.buckets(("task",)).items()}

    def cell(self, train: str, test: str) -> float:
        return self.grid[(train, test)]["accuracy"]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            if self.grid:
                w = csv.writer(fh)
                w.writerow([f"train_{self.axis}", f"test_{self.axis}", "accuracy", "count", "diagonal"])
                for (tr, te), c in self.grid.items():
                    w.writerow([tr, te, f"{c['accuracy']:.6f}", c["count"], int(c["diagonal"])])
            else:
                cols = ["uid", "task", "n_chunks", "length_tokens", "position", "gold", "pred", "correct"]
                w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
                w.writeheader()
                for r in self.rows:
                    w.writerow({**r, "correct": int(r["correct"])})

    def to_json(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "count": self.count,
            "per_task": self.per_task(),
            "axis": self.axis,
            "grid": [{"train": tr, "test": te, **c} for (tr, te), c in self.grid.items()],
        }


@dataclass
class ProfileReport:
    """One row per measurement: method, setting, memory and timing."""

    rows: list[dict] = field(default_factory=list)
    warmup_iters: int = 10

    COLUMNS = (
        "method", "setting", "n_chunks", "retain", "n_steps", "accum", "peak_graph_nodes",
        "peak_graph_elems", "peak_bytes", "wall_clock_s", "repeats", "warmup_iters", "status",
    )

    def add(self, **row) -> dict:
        row.setdefault("warmup_iters", self.warmup_iters)
        row.setdefault("status", "ok")
        self.rows.append(row)
        return row

    def select(self, **match) -> list[dict]:
        return [r for r in self.rows if all(r.get(k) == v for k, v in match.items())]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=list(self.COLUMNS), extrasaction="ignore")
            w.writeheader()
            for r in self.rows:
                w.writerow({c: r.get(c, "") for c in self.COLUMNS})

    def to_json(self) -> dict:
        return {"warmup_iters": self.warmup_iters, "rows": self.rows}


def write_json(obj, path: str | Path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
