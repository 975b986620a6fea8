"""Domain-aligned prefix averaging: similarity scoring, weights, and merging.

Given n trained source prefixes and a small unlabeled target sample, each
prefix generates a summary per sample document; cosine similarity between a
document and its generated summary (under a deterministic bag-of-tokens
sentence encoder) fills an m x n matrix.  Column sums pass through a softmax
to give domain weights, and the target prefix is the weighted average of the
source prefixes rematerialized on target-side embedding rows.

Variant rules: per-row softmax then mean (alt), uniform weights (average),
elementwise max with contribution bookkeeping (max), per-document weighting
(inst), and embedding-level averaging (embed).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .backbone import BackboneWeights
from .decoding import DecodeConfig, generate
from .errors import ConfigError, ConfigMismatchError, DegenerateInputError
from .prefixgen import PrefixGenerator, PrefixTensors, materialize
from .textproc import N_RESERVED, SOURCE_LEN_CAP, TokenizedDoc, top_c_tokens

log = logging.getLogger(__name__)

WEIGHT_RULES = ("dapa", "alt", "uniform", "inst")


# ---------------------------------------------------------------------------
# sentence encoding


@dataclass
class SentenceEncoder:
    """Bag-of-token-counts encoder producing L2-normalized vectors.

    dim covers the whole id space; reserved ids never contribute.  An
    optional idf table (same length) reweights counts before normalization.
    """

    dim: int
    idf: np.ndarray | None = None

    def __post_init__(self):
        if self.dim <= N_RESERVED:
            raise ConfigError(f"encoder dim must exceed {N_RESERVED}, got {self.dim}")
        if self.idf is not None:
            self.idf = np.asarray(self.idf, dtype=float)
            if self.idf.shape != (self.dim,):
                raise ConfigError("idf table length must equal encoder dim")
            if np.any(self.idf < 0.0):
                raise ConfigError("idf entries must be nonnegative")


def idf_from_docs(docs, dim: int) -> np.ndarray:
    """Smoothed inverse document frequency over tokenized docs."""
    df = np.zeros(dim)
    n = 0
    for doc in docs:
        n += 1
        for i in set(doc.ids):
            if N_RESERVED <= i < dim:
                df[i] += 1.0
    return np.log((1.0 + n) / (1.0 + df)) + 1.0


def encode_text(enc: SentenceEncoder, doc: TokenizedDoc) -> np.ndarray:
    """Unit-norm count vector; empty/all-reserved docs give the zero vector."""
    v = np.zeros(enc.dim)
    for i in doc.ids:
        if N_RESERVED <= i < enc.dim:
            v[i] += 1.0
    if enc.idf is not None:
        v = v * enc.idf
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        log.warning("encode_text: no content tokens, returning zero vector")
        return v
    return v / norm


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(np.dot(u, v) / (nu * nv))


# ---------------------------------------------------------------------------
# similarity matrix and weights


@dataclass
class TargetSample:
    """Unlabeled target-domain documents used for domain weighting."""

    docs: list[TokenizedDoc]

    def __post_init__(self):
        if not self.docs:
            raise DegenerateInputError("target sample must hold at least one doc")

    @property
    def m(self) -> int:
        return len(self.docs)


@dataclass
class SimilarityMatrix:
    """m x n document/summary cosine similarities, one column per domain."""

    values: np.ndarray
    domains: list[str]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2 or self.values.size == 0:
            raise ConfigError("similarity matrix must be 2-D and nonempty")
        if self.values.shape[1] != len(self.domains):
            raise ConfigError("one domain name per column required")
        if not np.all(np.isfinite(self.values)):
            raise ConfigError("similarity entries must be finite")
        if np.any(self.values < -1.0 - 1e-12) or np.any(self.values > 1.0 + 1e-12):
            raise ConfigError("similarity entries must lie in [-1, 1]")
        self.values = np.clip(self.values, -1.0, 1.0)

    @property
    def m(self) -> int:
        return self.values.shape[0]

    @property
    def n(self) -> int:
        return self.values.shape[1]

    def to_json_dict(self) -> dict:
        return {"m": self.m, "n": self.n, "domains": list(self.domains),
                "values": [[float(x) for x in row] for row in self.values]}

    @classmethod
    def from_json_dict(cls, d: dict) -> "SimilarityMatrix":
        return cls(np.array(d["values"], dtype=float), list(d["domains"]))


@dataclass
class DomainWeights:
    """Simplex weights over source domains; renormalized at construction."""

    w: np.ndarray
    domains: list[str]
    rule: str

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=float)
        if self.rule not in WEIGHT_RULES:
            raise ConfigError(f"unknown weight rule {self.rule!r}")
        if self.w.ndim != 1 or self.w.shape[0] != len(self.domains):
            raise ConfigError("one weight per domain required")
        if not np.all(np.isfinite(self.w)) or np.any(self.w < 0.0):
            raise ConfigError("weights must be finite and nonnegative")
        total = float(self.w.sum())
        if total <= 0.0:
            raise ConfigError("weights must have positive sum")
        self.w = self.w / total

    @property
    def n(self) -> int:
        return self.w.shape[0]

    def to_json_dict(self) -> dict:
        return {"n": self.n, "rule": self.rule, "domains": list(self.domains),
                "w": [float(x) for x in self.w]}

    @classmethod
    def from_json_dict(cls, d: dict) -> "DomainWeights":
        return cls(np.array(d["w"], dtype=float), list(d["domains"]), d["rule"])


def build_similarity_matrix(sample: TargetSample, gens: list[PrefixGenerator],
                            backbone: BackboneWeights, decode_cfg: DecodeConfig,
                            enc: SentenceEncoder) -> SimilarityMatrix:
    """Generate with each source prefix's own embedding rows and score cells."""
    if not gens:
        raise DegenerateInputError("need at least one source prefix")
    values = np.zeros((sample.m, len(gens)))
    doc_vecs = [encode_text(enc, doc.truncated(SOURCE_LEN_CAP))
                for doc in sample.docs]
    with nc.no_grad():
        for j, gen in enumerate(gens):
            prefixes = materialize(gen)
            for i, doc in enumerate(sample.docs):
                summary = generate(doc.truncated(SOURCE_LEN_CAP), prefixes,
                                   backbone, decode_cfg)
                if not summary.ids:
                    log.warning("empty summary for doc %d under domain %s",
                                i, gen.domain_id)
                    values[i, j] = 0.0
                    continue
                values[i, j] = cosine(doc_vecs[i], encode_text(enc, summary))
    return SimilarityMatrix(np.clip(values, -1.0, 1.0), [g.domain_id for g in gens])


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - np.max(x))
    return e / e.sum()


def dapa_weights(sim: SimilarityMatrix) -> DomainWeights:
    """Softmax over per-domain column sums of the similarity matrix."""
    return DomainWeights(_softmax(sim.values.sum(axis=0)), list(sim.domains), "dapa")


def dapa_alt_weights(sim: SimilarityMatrix) -> DomainWeights:
    """Per-document softmax across domains, then mean over documents."""
    rows = np.stack([_softmax(row) for row in sim.values])
    return DomainWeights(rows.mean(axis=0), list(sim.domains), "alt")


def uniform_weights(domains: list[str]) -> DomainWeights:
    return DomainWeights(np.full(len(domains), 1.0 / len(domains)),
                         list(domains), "uniform")


# ---------------------------------------------------------------------------
# prefix merging


def _check_merge_inputs(gens: list[PrefixGenerator], e_target: np.ndarray):
    if not gens:
        raise DegenerateInputError("need at least one source prefix")
    c, d = gens[0].prefix_length, gens[0].d
    sites = set(gens[0].sites)
    for g in gens[1:]:
        if g.prefix_length != c or g.d != d:
            raise ConfigMismatchError(
                f"prefix shapes differ: ({c}, {d}) vs ({g.prefix_length}, {g.d})")
        if set(g.sites) != sites:
            raise ConfigMismatchError("prefix generators cover different sites")
    e_target = np.asarray(e_target, dtype=float)
    if e_target.shape != (c, d):
        raise ConfigMismatchError(
            f"target embedding shape {e_target.shape} != ({c}, {d})")
    return e_target


def merge_prefixes(gens: list[PrefixGenerator], weights: DomainWeights,
                   e_target) -> PrefixTensors:
    """Weighted average of source prefixes rematerialized on target rows."""
    e_target = _check_merge_inputs(gens, e_target)
    if weights.n != len(gens):
        raise ConfigMismatchError(f"{weights.n} weights for {len(gens)} prefixes")
    merged: dict = {}
    with nc.no_grad():
        for j, gen in enumerate(gens):
            tensors = materialize(gen, e_override=e_target)
            for site, (h_k, h_v) in tensors.sites.items():
                wk = weights.w[j] * h_k.data
                wv = weights.w[j] * h_v.data
                if site in merged:
                    merged[site] = (merged[site][0] + wk, merged[site][1] + wv)
                else:
                    merged[site] = (wk, wv)
    return PrefixTensors({site: (nc.as_tensor(k), nc.as_tensor(v))
                          for site, (k, v) in merged.items()})


def merge_prefixes_max(gens: list[PrefixGenerator], e_target
                       ) -> tuple[PrefixTensors, np.ndarray]:
    """Elementwise max over rematerialized prefixes plus contribution shares.

    Returns the fraction of prefix elements each domain contributed; on exact
    ties the lowest domain index wins.
    """
    e_target = _check_merge_inputs(gens, e_target)
    with nc.no_grad():
        all_tensors = [materialize(g, e_override=e_target) for g in gens]
    sites = list(all_tensors[0].sites)
    merged: dict = {}
    counts = np.zeros(len(gens))
    total = 0
    for site in sites:
        stacked_k = np.stack([t.sites[site][0].data for t in all_tensors])
        stacked_v = np.stack([t.sites[site][1].data for t in all_tensors])
        for stacked in (stacked_k, stacked_v):
            winner = np.argmax(stacked, axis=0)  # first max wins ties
            counts += np.bincount(winner.ravel(), minlength=len(gens))
            total += winner.size
        merged[site] = (nc.as_tensor(stacked_k.max(axis=0)),
                        nc.as_tensor(stacked_v.max(axis=0)))
    return PrefixTensors(merged), counts / total


def merge_embed(gens: list[PrefixGenerator], weights: DomainWeights) -> np.ndarray:
    """Weighted average of the source embedding matrices themselves."""
    if not gens:
        raise DegenerateInputError("need at least one source prefix")
    if weights.n != len(gens):
        raise ConfigMismatchError(f"{weights.n} weights for {len(gens)} prefixes")
    c, d = gens[0].prefix_length, gens[0].d
    out = np.zeros((c, d))
    for j, gen in enumerate(gens):
        e = gen.E.value.data
        if e.shape != (c, d):
            raise ConfigMismatchError(
                f"embedding shapes differ: {e.shape} vs ({c}, {d})")
        out = out + weights.w[j] * e
    return out


def dapa_inst(doc: TokenizedDoc, gens: list[PrefixGenerator],
              backbone: BackboneWeights, decode_cfg: DecodeConfig,
              enc: SentenceEncoder) -> tuple[DomainWeights, PrefixTensors]:
    """Per-document weighting: one similarity row plus single-doc target rows."""
    sim = build_similarity_matrix(TargetSample([doc]), gens, backbone,
                                  decode_cfg, enc)
    weights = DomainWeights(dapa_weights(sim).w, list(sim.domains), "inst")
    ids = top_c_tokens([doc], gens[0].prefix_length)
    e_target = backbone.embedding.value.data[ids]
    return weights, merge_prefixes(gens, weights, e_target)
