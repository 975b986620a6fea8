"""Synthetic multi-domain summarization corpora.

A shared word universe w000..wNNN is sliced into per-domain vocabularies.
Documents are sampled from a small per-doc pool (so repeated tokens exist),
and the summary is a deterministic function of the document under the
domain's rule, always starting with the domain's unique style marker:

  lead-k            marker + first k document tokens
  tail-k            marker + last k document tokens
  repeated-keyword  marker + tokens appearing at least twice, in order of
                    first occurrence
  marker-template   marker + most frequent token + marker

A generic pretraining corpus mixes all four rules over the full universe,
with a per-rule cue token in the marker position, so a backbone trained on
it learns cue-conditional summarization before being frozen.
"""

from __future__ import annotations

import zlib
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, DegenerateInputError
from ..textproc import N_RESERVED, DomainCorpus, Pair, TokenizedDoc, Vocabulary, split_text

RULES = ("lead-k", "tail-k", "repeated-keyword", "marker-template")

# cue tokens stand in the marker slot during backbone pretraining
RULE_CUES = {"lead-k": "cuelead", "tail-k": "cuetail",
             "repeated-keyword": "cuekey", "marker-template": "cuetmpl"}


def fold_seed(seed: int, label: str) -> int:
    """Stable per-stage sub-seed so stages draw independent streams."""
    return (seed * 0x9E3779B1 + zlib.crc32(label.encode())) % 2 ** 32


@dataclass
class SyntheticDomainSpec:
    name: str
    rule: str
    marker: str
    vocab_lo: int
    vocab_hi: int
    k: int = 2
    min_len: int = 12
    max_len: int = 24
    n_train: int = 500
    n_dev: int = 50
    n_test: int = 100

    def __post_init__(self):
        if self.rule not in RULES:
            raise ConfigError(f"unknown rule {self.rule!r}")
        if split_text(self.marker) != [self.marker]:
            raise ConfigError(f"marker must be a single token, got {self.marker!r}")
        if not 0 <= self.vocab_lo < self.vocab_hi:
            raise ConfigError(f"bad vocab slice [{self.vocab_lo}, {self.vocab_hi})")
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if not 2 <= self.min_len <= self.max_len:
            raise ConfigError("need 2 <= min_len <= max_len")
        if self.min_len < self.k:
            raise ConfigError(f"min_len {self.min_len} shorter than k {self.k}")
        if min(self.n_train, self.n_dev, self.n_test) < 1:
            raise ConfigError("every split needs at least one pair")

    def to_json_dict(self) -> dict:
        return {"name": self.name, "rule": self.rule, "marker": self.marker,
                "vocab_lo": self.vocab_lo, "vocab_hi": self.vocab_hi,
                "k": self.k, "min_len": self.min_len, "max_len": self.max_len,
                "n_train": self.n_train, "n_dev": self.n_dev,
                "n_test": self.n_test}

    @classmethod
    def from_json_dict(cls, d: dict) -> "SyntheticDomainSpec":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__})


def word_universe(size: int) -> list[str]:
    if size < 1:
        raise ConfigError(f"universe size must be >= 1, got {size}")
    return [f"w{i:03d}" for i in range(size)]


def benchmark_vocabulary(specs, universe_size: int,
                         extra_markers=()) -> Vocabulary:
    """Universe words, then the four rule cues, then domain markers.

    Built from the specs alone, never from generated text, so the id space
    is independent of any corpus content.  Universe word i gets id
    N_RESERVED + i.
    """
    words = word_universe(universe_size)
    cues = [RULE_CUES[r] for r in RULES]
    markers: list[str] = []
    for name in [s.marker for s in specs] + list(extra_markers):
        if name in markers:
            raise ConfigError(f"duplicate domain marker {name!r}")
        markers.append(name)
    # sorted so the id space does not depend on which list a marker came from
    tokens = words + cues + sorted(markers)
    if len(set(tokens)) != len(tokens):
        raise ConfigError("marker collides with a universe word or rule cue")
    return Vocabulary(tokens)


def rule_summary(rule: str, k: int, doc_ids: list[int],
                 marker_id: int) -> list[int]:
    """Deterministic summary ids for one document, marker first."""
    if rule == "lead-k":
        return [marker_id] + doc_ids[:k]
    if rule == "tail-k":
        return [marker_id] + doc_ids[-k:]
    if rule == "repeated-keyword":
        counts = Counter(doc_ids)
        seen: list[int] = []
        for i in doc_ids:
            if counts[i] >= 2 and i not in seen:
                seen.append(i)
        return [marker_id] + seen
    if rule == "marker-template":
        best = max(Counter(doc_ids).items(),
                   key=lambda kv: (kv[1], -doc_ids.index(kv[0])))[0]
        return [marker_id, best, marker_id]
    raise ConfigError(f"unknown rule {rule!r}")


def _sample_doc(rng: np.random.Generator, lo_id: int, hi_id: int,
                min_len: int, max_len: int) -> list[int]:
    # two unique tokens at each edge around a small-pool core with repeats:
    # lead/tail summaries then pick count-1 edge tokens while keyword and
    # template summaries pick the repeated core, so the extraction rules
    # leave distinct bag-of-words signatures on the same document
    length = int(rng.integers(min_len, max_len + 1))
    n_edge = min(4, length)
    n_core = length - n_edge
    pool_size = min(max(2, -(-n_core // 3)), hi_id - lo_id - n_edge)
    # zipf-shaped draw over the slice: corpora sampled from overlapping
    # slices then agree on their most frequent tokens, like real corpora do
    ranks = np.arange(1.0, hi_id - lo_id + 1.0)
    p = (1.0 / ranks) / np.sum(1.0 / ranks)
    distinct = rng.choice(np.arange(lo_id, hi_id), size=n_edge + pool_size,
                          replace=False, p=p)
    edges = [int(x) for x in distinct[:n_edge]]
    pool = distinct[n_edge:]
    core = [int(x) for x in rng.choice(pool, size=n_core, replace=True)]
    return edges[:2] + core + edges[2:]


def generate_domain(spec: SyntheticDomainSpec, vocab: Vocabulary,
                    seed: int) -> DomainCorpus:
    """Disjoint train/dev/test pairs; same (spec, vocab, seed) → same corpus."""
    marker_id = vocab.id(spec.marker)
    if marker_id < N_RESERVED:
        raise ConfigError(f"marker {spec.marker!r} not in vocabulary")
    lo_id = N_RESERVED + spec.vocab_lo
    hi_id = N_RESERVED + spec.vocab_hi
    if hi_id > len(vocab):
        raise ConfigError(
            f"vocab slice [{spec.vocab_lo}, {spec.vocab_hi}) exceeds universe")
    rng = np.random.default_rng(fold_seed(seed, f"domain-{spec.name}"))
    total = spec.n_train + spec.n_dev + spec.n_test
    seen: set[tuple[int, ...]] = set()
    pairs: list[Pair] = []
    attempts = 0
    while len(pairs) < total:
        attempts += 1
        if attempts > 50 * total:
            raise DegenerateInputError(
                f"vocab slice too small for {total} distinct docs in {spec.name}")
        doc_ids = _sample_doc(rng, lo_id, hi_id, spec.min_len, spec.max_len)
        key = tuple(doc_ids)
        if key in seen:
            continue
        seen.add(key)
        summary = rule_summary(spec.rule, spec.k, doc_ids, marker_id)
        pairs.append(Pair(TokenizedDoc(doc_ids), TokenizedDoc(summary)))
    return DomainCorpus(spec.name, pairs[:spec.n_train],
                        pairs[spec.n_train:spec.n_train + spec.n_dev],
                        pairs[spec.n_train + spec.n_dev:])


def pretraining_pairs(universe_size: int, vocab: Vocabulary, n_pairs: int,
                      seed: int, min_len: int = 12, max_len: int = 24,
                      k: int = 2) -> list[Pair]:
    """Rule-mixture corpus over the full universe with cue-token markers."""
    if n_pairs < 1:
        raise ConfigError(f"n_pairs must be >= 1, got {n_pairs}")
    rng = np.random.default_rng(fold_seed(seed, "pretrain"))
    cue_ids = {rule: vocab.id(RULE_CUES[rule]) for rule in RULES}
    if any(i < N_RESERVED for i in cue_ids.values()):
        raise ConfigError("rule cue tokens missing from vocabulary")
    lo_id, hi_id = N_RESERVED, N_RESERVED + universe_size
    pairs = []
    for _ in range(n_pairs):
        rule = RULES[int(rng.integers(0, len(RULES)))]
        doc_ids = _sample_doc(rng, lo_id, hi_id, min_len, max_len)
        summary = rule_summary(rule, k, doc_ids, cue_ids[rule])
        pairs.append(Pair(TokenizedDoc(doc_ids), TokenizedDoc(summary)))
    return pairs


def default_benchmark() -> dict[str, SyntheticDomainSpec]:
    """Three sources, a matched target, and a spare domain for incremental adds.

    The target shares the repeated-keyword rule and most of its vocab slice
    with charlie (different marker), so exactly one source matches it.
    """
    return {
        "alpha": SyntheticDomainSpec("alpha", "lead-k", "markeralpha", 0, 80),
        "bravo": SyntheticDomainSpec("bravo", "tail-k", "markerbravo", 60, 140),
        "charlie": SyntheticDomainSpec("charlie", "repeated-keyword",
                                       "markercharlie", 120, 200),
        "tango": SyntheticDomainSpec("tango", "repeated-keyword",
                                     "markertango", 120, 196),
        "delta": SyntheticDomainSpec("delta", "marker-template",
                                     "markerdelta", 40, 120),
    }
