"""BabiLong-style needle tasks: agent/object event facts hidden in filler text."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .problem import ReasoningProblem
from .vocab import tokenize, words_of

AGENTS = ("Mary", "John", "Daniel", "Sandra", "Fred", "Bill", "Julie", "Emma")
LOCATIONS = ("bedroom", "garden", "office", "kitchen", "hallway", "bathroom", "cellar", "park")
OBJECTS = ("apple", "milk", "football", "book", "key", "ball")
MOVES = ("moved to the", "went to the", "journeyed to the", "travelled to the", "went back to the")
PICKS = ("picked up the", "got the", "grabbed the")
DROPS = ("dropped the", "left the", "put down the")

# 200 lowercase filler words, disjoint from the fact pools above
FILLER_WORDS = tuple(
    """
    river stone quiet light morning cloud wind field small green old new bright dark warm cold
    water fire earth sky tree leaf branch root seed flower grass hill valley mountain lake sea
    shore wave sand rock path road bridge tower wall gate door window roof floor table chair lamp
    paper letter word story song voice sound music silence dream thought idea plan reason answer
    number line circle square shape color red blue yellow white black grey soft hard
    slow fast long short wide narrow deep high low early late always never often sometimes
    people child family friend teacher student worker farmer artist writer reader city village
    country market street corner season summer winter spring autumn rain snow storm
    sun moon star night day hour minute week year history science nature culture language
    energy power motion force change growth pattern system process method result effect cause
    many few several every each some most other same different simple complex common rare
    carries holds brings finds keeps makes shows tells gives takes follows leads opens closes
    turns grows falls rises moves rests waits listens watches learns builds writes reads sings
    under over near beyond between across along around through within without toward upon
    """.split()
)
assert len(FILLER_WORDS) == len(set(FILLER_WORDS))


@dataclass
class NeedleSpec:
    target_tokens: int = 512
    agents: tuple[str, ...] = AGENTS
    locations: tuple[str, ...] = LOCATIONS
    objects: tuple[str, ...] = OBJECTS
    filler_words: tuple[str, ...] = FILLER_WORDS
    distractors_per_support: int = 4
    position_policy: str = "Rnd"
    sentence_len: tuple[int, int] = (6, 12)
    seed: int = 0

    def words(self) -> set[str]:
        return words_of(*self.agents, *self.locations, *self.objects, *self.filler_words)


QUESTIONS = {
    "qa1": "Where is {agent} located now?",
    "qa2": "Where is the {obj} now?",
    "qa3": "Where was the {obj} before the {loc}?",
}


def template_words() -> set[str]:
    return words_of(*MOVES, *PICKS, *DROPS, "fact", "the", "there",
                    *(q.format(agent="", obj="", loc="") for q in QUESTIONS.values()))


def _pick(rng, pool, exclude=()):
    choices = [p for p in pool if p not in exclude]
    return choices[int(rng.integers(len(choices)))]


def _move(rng, agent, loc):
    return f"{agent} {MOVES[int(rng.integers(len(MOVES)))]} {loc}."


def _events(spec: NeedleSpec, task: str, rng: np.random.Generator):
    """Ordered fact list plus question and answer. Supporting facts of the target
    agent are fixed first; distractors (other agents, or the target's earlier
    moves) are spliced in without changing the answer."""
    hops = {"qa1": 1, "qa2": 2, "qa3": 3}[task]
    n_distract = spec.distractors_per_support * hops
    agent = _pick(rng, spec.agents)
    others = [a for a in spec.agents if a != agent]

    if task == "qa1":
        loc = _pick(rng, spec.locations)
        core = [_move(rng, agent, loc)]
        question = QUESTIONS["qa1"].format(agent=agent)
        answer = loc
        # earlier moves of the target may only precede its final move
        n_prefix = int(rng.integers(0, min(2, n_distract) + 1))
        prefix = [_move(rng, agent, _pick(rng, spec.locations)) for _ in range(n_prefix)]
        core = prefix + core
        suffix_ok = False
    elif task == "qa2":
        obj = _pick(rng, spec.objects)
        l0 = _pick(rng, spec.locations)
        loc = _pick(rng, spec.locations, exclude=(l0,))
        core = [
            _move(rng, agent, l0),
            f"{agent} {PICKS[int(rng.integers(len(PICKS)))]} {obj} there.",
            _move(rng, agent, loc),
            f"{agent} {DROPS[int(rng.integers(len(DROPS)))]} {obj}.",
        ]
        question = QUESTIONS["qa2"].format(obj=obj)
        answer = loc
        suffix_ok = True
    elif task == "qa3":
        obj = _pick(rng, spec.objects)
        l0 = _pick(rng, spec.locations)
        l1 = _pick(rng, spec.locations, exclude=(l0,))
        l2 = _pick(rng, spec.locations, exclude=(l0, l1))
        core = [
            _move(rng, agent, l0),
            f"{agent} {PICKS[int(rng.integers(len(PICKS)))]} {obj} there.",
            _move(rng, agent, l1),
            _move(rng, agent, l2),
            f"{agent} {DROPS[int(rng.integers(len(DROPS)))]} {obj}.",
        ]
        question = QUESTIONS["qa3"].format(obj=obj, loc=l2)
        answer = l1
        suffix_ok = True
    else:
        raise ValueError(f"needle task must be qa1/qa2/qa3, not {task!r}")

    # distractors: other agents move around or pick up other objects
    tail = []
    if suffix_ok and rng.random() < 0.5:
        # the target wanders off after dropping: the object stays put
        tail = [_move(rng, agent, _pick(rng, spec.locations))]
    free_objects = [o for o in spec.objects if task == "qa1" or o != obj]
    distract = []
    placed: list[str] = []  # agents with a known location may pick things up "there"
    for _ in range(max(0, n_distract - (len(core) - hops) - len(tail))):
        if placed and free_objects and rng.random() < 0.25:
            who = placed[int(rng.integers(len(placed)))]
            o = free_objects.pop(int(rng.integers(len(free_objects))))
            distract.append(f"{who} {PICKS[int(rng.integers(len(PICKS)))]} {o} there.")
        else:
            who = others[int(rng.integers(len(others)))]
            distract.append(_move(rng, who, _pick(rng, spec.locations)))
            if who not in placed:
                placed.append(who)
    support = " ".join(core[-hops:])

    # random interleaving that preserves the order of the core facts
    slots = sorted(rng.choice(len(core) + len(distract), size=len(core), replace=False).tolist())
    facts, ci, di = [], 0, 0
    for i in range(len(core) + len(distract)):
        if ci < len(core) and slots[ci] == i:
            facts.append(core[ci])
            ci += 1
        else:
            facts.append(distract[di])
            di += 1
    return facts + tail, question, answer, hops, support


def _filler_sentence(spec: NeedleSpec, rng) -> str:
    n = int(rng.integers(spec.sentence_len[0], spec.sentence_len[1] + 1))
    words = [spec.filler_words[int(i)] for i in rng.integers(len(spec.filler_words), size=n)]
    return " ".join(words) + "."


def _gap_range(policy: str, n_gaps: int) -> tuple[int, int]:
    if policy == "Rnd":
        return 0, n_gaps
    if policy == "Pre":
        return 0, max(1, n_gaps // 4)
    if policy == "Mid":
        return 3 * n_gaps // 8, max(3 * n_gaps // 8 + 1, 5 * n_gaps // 8)
    if policy == "Post":
        return n_gaps - max(1, n_gaps // 4), n_gaps
    raise ValueError(f"unknown position policy {policy!r}")


def gen_needle(
    spec: NeedleSpec,
    task: str,
    split: str = "train",
    rng: np.random.Generator | None = None,
) -> ReasoningProblem:
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    facts, question, answer, hops, support = _events(spec, task, rng)
    fact_tokens = sum(len(tokenize(f)) for f in facts)
    if spec.target_tokens < fact_tokens:
        raise ValueError(
            f"target length {spec.target_tokens} is shorter than the {fact_tokens} tokens of facts"
        )
    filler: list[str] = []
    n_tok = fact_tokens
    while n_tok < spec.target_tokens:
        s = _filler_sentence(spec, rng)
        filler.append(s)
        n_tok += len(tokenize(s))

    lo, hi = _gap_range(spec.position_policy, len(filler) + 1)
    gaps = np.sort(rng.integers(lo, hi, size=len(facts)))
    pieces: list[str] = []
    positions: list[int] = []
    offset = 0
    fi = 0
    for g in range(len(filler) + 1):
        while fi < len(facts) and gaps[fi] == g:
            positions.append(offset)
            pieces.append(facts[fi])
            offset += len(facts[fi]) + 1
            fi += 1
        if g < len(filler):
            pieces.append(filler[g])
            offset += len(filler[g]) + 1
    context = " ".join(pieces)
    return ReasoningProblem(
        context=context,
        question=question,
        answer=answer,
        task=task,
        hops=hops,
        length_tokens=len(tokenize(context)),
        needle_positions=positions,
        split=split,
        documents=filler,
        facts=facts,
        support=support,
        position_policy=spec.position_policy,
    )
