"""Student Records: structurally identical records, one of which holds the answer."""

from __future__ import annotations

from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

from .problem import ReasoningProblem
from .vocab import tokenize, words_of

YEARS = ("Freshman", "Sophomore", "Junior", "Senior")
SCHOOLS = ("Engineering", "Business", "Arts", "Law", "Medicine", "Sciences", "Education", "Design")
MAJORS = (
    "Computer Science", "Data Science", "Physics", "Chemistry", "Biology", "History",
    "Economics", "Mathematics", "Philosophy", "Music", "Literature", "Psychology",
)
FIRST_NAMES = (
    "Alison", "Brian", "Carla", "Derek", "Elena", "Felix", "Grace", "Hugo", "Irene", "Jonas",
    "Karen", "Liam", "Maya", "Nolan", "Olivia", "Peter", "Quinn", "Rosa", "Simon", "Tara",
    "Umar", "Vera", "Wade", "Yara",
)
LAST_NAMES = (
    "Keith", "Adams", "Baker", "Carter", "Dalton", "Evans", "Fisher", "Garcia", "Hayes", "Irwin",
    "Jensen", "Khan", "Lopez", "Morgan", "Nash", "Ortiz", "Porter", "Reyes", "Stone", "Turner",
    "Vance", "Walsh", "Young", "Zhang",
)
ATTRIBUTES = ("name", "year", "school", "major", "grade")
RELATIONS = ("grade", "major", "school", "year")
AGGREGATES = ("max", "min", "average")

# split class of an entity: train 0-7, val 8, test 9
_SPLIT_CLASSES = {"train": range(0, 8), "val": (8,), "test": (9,)}


def id_class(student_id: int) -> int:
    return sum(int(c) for c in str(student_id)) % 10


def name_class(first: str, last: str, spec: "RecordsSpec") -> int:
    return (spec.first_names.index(first) * 7 + spec.last_names.index(last) * 3) % 10


@dataclass
class RecordsSpec:
    n_records: int = 16
    target_tokens: int | None = None
    id_digits: int = 7
    years: tuple[str, ...] = YEARS
    schools: tuple[str, ...] = SCHOOLS
    majors: tuple[str, ...] = MAJORS
    first_names: tuple[str, ...] = FIRST_NAMES
    last_names: tuple[str, ...] = LAST_NAMES
    grade_range: tuple[int, int] = (0, 100)
    attributes: tuple[str, ...] = ATTRIBUTES
    position_policy: str = "Rnd"
    with_support: bool = False
    seed: int = 0

    def words(self) -> set[str]:
        return words_of(*self.years, *self.schools, *self.majors, *self.first_names, *self.last_names)


@dataclass
class Record:
    student_id: int
    first: str
    last: str
    year: str
    school: str
    major: str
    grade: int

    @property
    def name(self) -> str:
        return f"{self.first} {self.last}"

    def render(self) -> str:
        return (
            f"Student Id: {self.student_id}, Student Name: {self.name}, Year: {self.year}, "
            f"School: {self.school}, Major: {self.major}, Grade: {self.grade}"
        )

    def value(self, attr: str) -> str:
        return str(getattr(self, attr) if attr != "name" else self.name)


RECALL_TEMPLATES = {
    "name": "What is the name of student {sid}?",
    "year": "What year is student {sid} in?",
    "school": "Which school is student {sid} in?",
    "major": "What major does student {sid} study?",
    "grade": "What grade does student {sid} have?",
}
RELATION_TEMPLATES = {
    "grade": "Does student {a} have a higher grade than student {b}?",
    "major": "Do student {a} and student {b} study the same major?",
    "school": "Are student {a} and student {b} in the same school?",
    "year": "Are student {a} and student {b} in the same year?",
}
AGGREGATE_TEMPLATES = {
    "max": "What is the highest grade of all students?",
    "min": "What is the lowest grade of all students?",
    "average": "What is the average grade of all students?",
}


def template_words() -> set[str]:
    texts = [t.format(sid=1) for t in RECALL_TEMPLATES.values()]
    texts += [t.format(a=1, b=2) for t in RELATION_TEMPLATES.values()]
    texts += list(AGGREGATE_TEMPLATES.values())
    texts += ["Yes", "No", "Student Id: 1, Student Name: , Year: , School: , Major: , Grade: 1"]
    return words_of(*texts)


def _sample_id(rng: np.random.Generator, digits: int, split: str, used: set[int]) -> int:
    classes = _SPLIT_CLASSES[split]
    lo, hi = 10 ** (digits - 1), 10**digits
    while True:
        sid = int(rng.integers(lo, hi))
        if sid not in used and id_class(sid) in classes:
            used.add(sid)
            return sid


def _name_pool_size(spec: RecordsSpec, classes) -> int:
    return sum(name_class(f, la, spec) in classes for f in spec.first_names for la in spec.last_names)


def _sample_name(rng: np.random.Generator, spec: RecordsSpec, split: str, used: set, pool: int) -> tuple[str, str]:
    classes = _SPLIT_CLASSES[split]
    # questions refer to students by id, so names may repeat once the split's pool is used up
    exhausted = len(used) >= pool
    while True:
        first = spec.first_names[int(rng.integers(len(spec.first_names)))]
        last = spec.last_names[int(rng.integers(len(spec.last_names)))]
        if (exhausted or (first, last) not in used) and name_class(first, last, spec) in classes:
            used.add((first, last))
            return first, last


def _new_record(rng, spec, split, used_ids, used_names, pool) -> Record:
    first, last = _sample_name(rng, spec, split, used_names, pool)
    return Record(
        student_id=_sample_id(rng, spec.id_digits, split, used_ids),
        first=first,
        last=last,
        year=spec.years[int(rng.integers(len(spec.years)))],
        school=spec.schools[int(rng.integers(len(spec.schools)))],
        major=spec.majors[int(rng.integers(len(spec.majors)))],
        grade=int(rng.integers(spec.grade_range[0], spec.grade_range[1] + 1)),
    )


def choose_slot(policy: str, n: int, rng: np.random.Generator) -> int:
    """Slot of the relevant document under a position policy."""
    if policy == "Pre":
        return 0
    if policy == "Post":
        return n - 1
    if policy == "Mid":
        if n < 3:
            raise ValueError("Mid position policy needs at least 3 documents")
        return n // 2
    if policy == "Rnd":
        return int(rng.integers(n))
    raise ValueError(f"unknown position policy {policy!r}")


def average_string(grades: list[int]) -> str:
    mean = Decimal(sum(grades)) / Decimal(len(grades))
    return str(mean.quantize(Decimal("0.1"), rounding=ROUND_HALF_UP))


def gen_records(
    spec: RecordsSpec,
    task: str,
    split: str = "train",
    rng: np.random.Generator | None = None,
) -> ReasoningProblem:
    if task not in ("recall", "relation", "aggregate"):
        raise ValueError(f"records task must be recall/relation/aggregate, not {task!r}")
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    used_ids: set[int] = set()
    used_names: set = set()
    pool = _name_pool_size(spec, _SPLIT_CLASSES[split])

    records: list[Record] = []
    if spec.target_tokens is not None:
        total = 0
        while total <= spec.target_tokens:
            rec = _new_record(rng, spec, split, used_ids, used_names, pool)
            records.append(rec)
            total += len(tokenize(rec.render()))
    else:
        records = [_new_record(rng, spec, split, used_ids, used_names, pool) for _ in range(spec.n_records)]
    n = len(records)
    if task == "relation" and n < 2:
        raise ValueError("relation task needs at least 2 records")
    if n < 1:
        raise ValueError("need at least one record")

    if task == "recall":
        slot = choose_slot(spec.position_policy, n, rng)
        attr = spec.attributes[int(rng.integers(len(spec.attributes)))]
        rec = records[slot]
        question = RECALL_TEMPLATES[attr].format(sid=rec.student_id)
        answer = rec.value(attr)
        slots, hops = [slot], 1
    elif task == "relation":
        slot = choose_slot(spec.position_policy, n, rng)
        other = int(rng.integers(n - 1))
        other = other + 1 if other >= slot else other
        kind = RELATIONS[int(rng.integers(len(RELATIONS)))]
        a, b = records[slot], records[other]
        want_yes = bool(rng.integers(2))
        if kind == "grade":
            while a.grade == b.grade:
                b.grade = int(rng.integers(spec.grade_range[0], spec.grade_range[1] + 1))
            answer = "Yes" if a.grade > b.grade else "No"
        else:
            if want_yes:
                setattr(b, kind, getattr(a, kind))
            else:
                pool = {"major": spec.majors, "school": spec.schools, "year": spec.years}[kind]
                while getattr(b, kind) == getattr(a, kind):
                    setattr(b, kind, pool[int(rng.integers(len(pool)))])
            answer = "Yes" if getattr(a, kind) == getattr(b, kind) else "No"
        question = RELATION_TEMPLATES[kind].format(a=a.student_id, b=b.student_id)
        slots, hops = [slot, other], 2
    else:
        kind = AGGREGATES[int(rng.integers(len(AGGREGATES)))]
        grades = [r.grade for r in records]
        answer = {
            "max": lambda: str(max(grades)),
            "min": lambda: str(min(grades)),
            "average": lambda: average_string(grades),
        }[kind]()
        question = AGGREGATE_TEMPLATES[kind]
        slots, hops = list(range(n)), n

    docs = [r.render() for r in records]
    context = " ".join(docs)
    support = " ".join(docs[s] for s in slots[:2])
    return ReasoningProblem(
        context=context,
        question=question,
        answer=answer,
        task=task,
        hops=hops,
        length_tokens=len(tokenize(context)),
        needle_positions=slots,
        split=split,
        documents=docs,
        support=support,
        position_policy=spec.position_policy,
    )
