"""Word-level vocabulary with digit-by-digit numbers."""

from __future__ import annotations

import re
from pathlib import Path
from typing import Iterable

PAD, EOS, SEP, Q = "<pad>", "<eos>", "<sep>", "<q>"
SPECIALS = (PAD, EOS, SEP, Q)
DIGITS = tuple(str(i) for i in range(10))
PUNCT = (".", ",", ":", "?", "(", ")", "_", "=", ";", "'", "-")

_TOKEN_RE = re.compile(r"<[a-z]+>|[A-Za-z]+|\d|[^\sA-Za-z\d]")
_ATTACH_LEFT = set(".,:?)_;'=")
_ATTACH_RIGHT = set("(_='")


class OutOfVocabularyError(KeyError):
    def __init__(self, word: str):
        super().__init__(word)
        self.word = word

    def __str__(self):
        return f"word {self.word!r} is not in the vocabulary"


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text)


def detokenize(tokens: Iterable[str]) -> str:
    """Join tokens back into text; digit runs and punctuation are re-attached."""
    out = ""
    prev = None
    for tok in tokens:
        if prev is None:
            out = tok
        elif tok.isdigit() and prev.isdigit():
            out += tok
        elif tok.isdigit() and prev == "." and len(out) > 1 and out[-2].isdigit():
            out += tok
        elif tok in _ATTACH_LEFT or prev in _ATTACH_RIGHT:
            out += tok
        else:
            out += " " + tok
        prev = tok
    return out


def normalize_answer(text: str) -> str:
    """Canonical form for exact match: specials dropped, one space between tokens."""
    return " ".join(t for t in tokenize(text) if t not in SPECIALS)


class Vocabulary:
    def __init__(self, tokens: Iterable[str]):
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        for s in SPECIALS:
            if s not in self.index:
                raise ValueError(f"vocabulary lacks special token {s}")

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, tok: str) -> bool:
        return tok in self.index

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    @property
    def eos_id(self) -> int:
        return self.index[EOS]

    @property
    def sep_id(self) -> int:
        return self.index[SEP]

    @property
    def q_id(self) -> int:
        return self.index[Q]

    def encode(self, text: str) -> list[int]:
        ids = []
        for tok in tokenize(text):
            try:
                ids.append(self.index[tok])
            except KeyError:
                raise OutOfVocabularyError(tok) from None
        return ids

    def decode(self, ids: Iterable[int], skip_specials: bool = True) -> str:
        toks = [self.tokens[int(i)] for i in ids]
        if skip_specials:
            toks = [t for t in toks if t not in SPECIALS]
        return detokenize(toks)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines)


def build_vocab(specs: Iterable = ()) -> Vocabulary:
    """Specials, digits and punctuation, then every word any generator can emit, sorted.

    Each spec contributes through its ``words()`` method. The generators'
    template words are always included, so ``build_vocab()`` with no specs
    already covers every task with default pools.
    """
    from . import api, needle, records

    words: set[str] = set()
    specs = list(specs) or [needle.NeedleSpec(), records.RecordsSpec(), api.ApiSpec()]
    for mod in (needle, records, api):
        words.update(mod.template_words())
    for spec in specs:
        words.update(spec.words())
    fixed = set(SPECIALS) | set(DIGITS) | set(PUNCT)
    rest = sorted(w for w in words if w not in fixed and not w.isdigit())
    for w in rest:
        if not re.fullmatch(r"[A-Za-z]+", w):
            raise ValueError(f"pool entry produced non-word token {w!r}")
    return Vocabulary(list(SPECIALS) + list(DIGITS) + list(PUNCT) + rest)


def words_of(*texts: str) -> set[str]:
    out: set[str] = set()
    for t in texts:
        out.update(tokenize(t))
    return out
