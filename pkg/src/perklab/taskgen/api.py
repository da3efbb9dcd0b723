"""Positional API retrieval: pick the right call out of a stack of API docs.

Every document describes one tool ``<domain>_<action>`` taking a single named
argument. The instruction paraphrases the gold document's description and
names an argument value; the answer is the call string, e.g.
``hotel_book(city=Paris)``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .problem import ReasoningProblem
from .records import choose_slot
from .vocab import tokenize, words_of

DOMAINS = ("weather", "music", "hotel", "flight", "movie", "stock", "news", "recipe", "map", "email")
ACTIONS = ("search", "get", "list", "book", "cancel", "update")
VERBS = {
    "search": "searches",
    "get": "fetches",
    "list": "lists",
    "book": "books",
    "cancel": "cancels",
    "update": "updates",
}
ARG_NAMES = ("city", "user", "region", "place")
ARG_VALUES = ("Paris", "Tokyo", "Berlin", "Cairo", "Lima", "Oslo", "Delhi", "Rome", "Quito", "Seoul")

DOC_TEMPLATE = "API {name} ( {arg} ) : this tool {verb} {domain} entries for the given {arg} ."
QUESTION_TEMPLATE = "Call the tool that {verb} {domain} entries for {value} ."

_SPLIT_CLASSES = {"train": range(0, 8), "val": (8,), "test": (9,)}


def api_class(domain: str, action: str, spec: "ApiSpec") -> int:
    """Split class of a (domain, action) tool: train 0-7, val 8, test 9."""
    return (spec.domains.index(domain) * 3 + spec.actions.index(action) * 7) % 10


@dataclass
class ApiSpec:
    n_docs: int = 8
    domains: tuple[str, ...] = DOMAINS
    actions: tuple[str, ...] = ACTIONS
    arg_names: tuple[str, ...] = ARG_NAMES
    arg_values: tuple[str, ...] = ARG_VALUES
    position_policy: str = "Rnd"
    seed: int = 0

    def words(self) -> set[str]:
        return words_of(*self.domains, *self.actions, *self.arg_names, *self.arg_values,
                        *(VERBS[a] for a in self.actions))


def template_words() -> set[str]:
    return words_of(
        DOC_TEMPLATE.format(name="", arg="", verb="", domain=""),
        QUESTION_TEMPLATE.format(verb="", domain="", value=""),
    )


def api_call(domain: str, action: str, arg: str, value: str) -> str:
    return f"{domain}_{action}({arg}={value})"


def render_doc(domain: str, action: str, arg: str) -> str:
    return DOC_TEMPLATE.format(name=f"{domain}_{action}", arg=arg, verb=VERBS[action], domain=domain)


def gen_api(
    spec: ApiSpec,
    split: str = "train",
    rng: np.random.Generator | None = None,
) -> ReasoningProblem:
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    n = spec.n_docs
    if n < 2:
        raise ValueError("api task needs at least 2 documents")
    slot = choose_slot(spec.position_policy, n, rng)

    # the gold tool comes from the split's class; distractors may be any tool
    tools = [(d, a) for d in spec.domains for a in spec.actions]
    gold_pool = [t for t in tools if api_class(*t, spec) in _SPLIT_CLASSES[split]]
    gold = gold_pool[int(rng.integers(len(gold_pool)))]
    rest = [t for t in tools if t != gold]
    if len(rest) < n - 1:
        raise ValueError(f"pools allow only {len(rest) + 1} distinct tools, {n} requested")
    picks = rng.choice(len(rest), size=n - 1, replace=False)
    chosen = [rest[int(i)] for i in picks]
    chosen.insert(slot, gold)

    args = [spec.arg_names[int(rng.integers(len(spec.arg_names)))] for _ in chosen]
    docs = [render_doc(d, a, arg) for (d, a), arg in zip(chosen, args)]
    value = spec.arg_values[int(rng.integers(len(spec.arg_values)))]
    domain, action = gold
    question = QUESTION_TEMPLATE.format(verb=VERBS[action], domain=domain, value=value)
    answer = api_call(domain, action, args[slot], value)
    context = " ".join(docs)
    return ReasoningProblem(
        context=context,
        question=question,
        answer=answer,
        task="api",
        hops=1,
        length_tokens=len(tokenize(context)),
        needle_positions=[slot],
        split=split,
        documents=docs,
        support=docs[slot],
        position_policy=spec.position_policy,
    )


def reposition(problem: ReasoningProblem, policy: str, rng: np.random.Generator | None = None) -> ReasoningProblem:
    """The same problem with its gold document moved to the slot ``policy``
    picks; the other documents keep their relative order."""
    if problem.task != "api":
        raise ValueError("only api problems can be repositioned")
    rng = rng if rng is not None else np.random.default_rng(0)
    docs = list(problem.documents)
    gold = docs.pop(problem.needle_positions[0])
    slot = choose_slot(policy, len(docs) + 1, rng)
    docs.insert(slot, gold)
    return replace(problem, context=" ".join(docs), documents=docs, needle_positions=[slot],
                   position_policy=policy)
