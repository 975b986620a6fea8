"""Tokenization, vocabulary handling, and tokenized corpus containers."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .errors import DegenerateInputError

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
UNK_ID = 3
RESERVED_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")
N_RESERVED = len(RESERVED_TOKENS)

# length caps applied to encoder sources and decoder summaries
SOURCE_LEN_CAP = 512
SUMMARY_LEN_CAP = 200

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def split_text(text: str) -> list[str]:
    """Lowercase and split on whitespace; punctuation marks are their own tokens."""
    return _TOKEN_RE.findall(text.lower())


@dataclass
class TokenizedDoc:
    """A token id sequence; callers truncate to the applicable length cap."""

    ids: list[int]

    def __len__(self) -> int:
        return len(self.ids)

    def truncated(self, cap: int) -> "TokenizedDoc":
        return TokenizedDoc(list(self.ids[:cap]))


@dataclass
class Pair:
    doc: TokenizedDoc
    summary: TokenizedDoc | None = None


@dataclass
class DomainCorpus:
    """Document/summary pairs for one domain, split train/dev/test."""

    name: str
    train: list[Pair] = field(default_factory=list)
    dev: list[Pair] = field(default_factory=list)
    test: list[Pair] = field(default_factory=list)


class Vocabulary:
    """Token/id mapping with fixed reserved ids pad=0, bos=1, eos=2, unk=3."""

    def __init__(self, tokens: Sequence[str]):
        # `tokens` are the non-reserved entries in id order (first gets id 4)
        self.id_to_token: list[str] = list(RESERVED_TOKENS) + list(tokens)
        self.token_to_id: dict[str, int] = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("duplicate token in vocabulary")

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def id(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def token(self, idx: int) -> str:
        return self.id_to_token[idx]


def build_vocab(corpus: Iterable[str], max_size: int) -> Vocabulary:
    """Most frequent tokens first, ties broken lexicographically ascending.

    max_size caps the number of non-reserved entries and must be at least 5.
    """
    if max_size < 5:
        raise ValueError(f"build_vocab max_size must be >= 5, got {max_size}")
    counts: Counter[str] = Counter()
    for text in corpus:
        counts.update(split_text(text))
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocabulary([t for t, _ in ranked[:max_size]])


def tokenize(text: str, vocab: Vocabulary) -> TokenizedDoc:
    """Map text to ids; out-of-vocabulary tokens become unk."""
    return TokenizedDoc([vocab.id(t) for t in split_text(text)])


def detokenize(ids: Sequence[int], vocab: Vocabulary) -> str:
    """Space-join tokens, dropping the reserved ids."""
    return " ".join(vocab.token(i) for i in ids if i >= N_RESERVED)


def top_c_tokens(docs: Sequence[TokenizedDoc], c: int) -> list[int]:
    """Ids of the c most frequent non-reserved tokens across docs.

    Frequency descending, ties by ascending id; if fewer than c distinct
    tokens exist the ranking cycles from the top until length c.
    """
    if c < 1:
        raise ValueError(f"top_c_tokens needs c >= 1, got {c}")
    counts: Counter[int] = Counter()
    for doc in docs:
        counts.update(i for i in doc.ids if i >= N_RESERVED)
    if not counts:
        raise DegenerateInputError("top_c_tokens: no non-reserved tokens in any doc")
    ranked = [i for i, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))]
    return [ranked[i % len(ranked)] for i in range(c)]


def save_vocab(vocab: Vocabulary, path: str) -> None:
    """One non-reserved token per line; line number (0-based) = id - 4."""
    with open(path, "w", encoding="utf-8") as fh:
        for token in vocab.id_to_token[N_RESERVED:]:
            fh.write(token + "\n")


def load_vocab(path: str) -> Vocabulary:
    with open(path, "r", encoding="utf-8") as fh:
        tokens = [line.rstrip("\n") for line in fh]
    return Vocabulary([t for t in tokens if t])
