"""Prefix generators: trainable embedding plus per-site two-layer MLPs.

Each attention site gets two MLPs (one for the key prefix, one for the value
prefix).  A prefix block is h = W2 tanh(W1 e + b1) + b2 applied rowwise to
the C embedding rows, so a C x d embedding matrix materializes into C x d key
and value rows per site.  Materializing with an overriding embedding matrix
(but the trained MLPs) is how merged prefixes are recomputed for a target
domain.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numcore as nc
from .backbone import AttentionSite, BackboneConfig
from .container import ContainerReader, read_container, serialize, write_container
from .errors import (CheckpointFormatError, ConfigError, ConfigMismatchError,
                     DimensionError)

PREFIX_MAGIC = b"DAPAPFX1"


@dataclass
class PrefixMlp:
    w1: nc.Parameter
    b1: nc.Parameter
    w2: nc.Parameter
    b2: nc.Parameter


@dataclass
class PrefixTensors:
    """Materialized prefix rows per attention site: site -> (h_K, h_V)."""

    sites: dict[AttentionSite, tuple[nc.Tensor, nc.Tensor]]

    @property
    def prefix_length(self) -> int:
        first = next(iter(self.sites.values()))
        return first[0].shape[0]

    @property
    def d(self) -> int:
        first = next(iter(self.sites.values()))
        return first[0].shape[1]


class PrefixGenerator:
    """Per-domain prefix parameters: embedding E plus K/V MLPs per site."""

    def __init__(self, domain_id: str, prefix_length: int, d: int,
                 sites: Sequence[AttentionSite], seed: int):
        if prefix_length < 1:
            raise ConfigError(f"prefix_length must be >= 1, got {prefix_length}")
        if not sites:
            raise ConfigError("prefix generator needs at least one attention site")
        self.domain_id = domain_id
        self.prefix_length = prefix_length
        self.d = d
        self.sites = list(sites)
        self.seed = seed
        bound = d ** -0.5
        rng = np.random.default_rng(seed)

        def mlp() -> PrefixMlp:
            return PrefixMlp(
                nc.Parameter(rng.uniform(-bound, bound, size=(d, d))),
                nc.Parameter(np.zeros(d)),
                nc.Parameter(rng.uniform(-bound, bound, size=(d, d))),
                nc.Parameter(np.zeros(d)))

        self.E = nc.Parameter(np.zeros((prefix_length, d)))
        # draw order is fixed: site order, K before V, w1 before w2
        self.mlps: dict[AttentionSite, dict[str, PrefixMlp]] = {
            site: {"K": mlp(), "V": mlp()} for site in self.sites}

    def parameters(self) -> list[nc.Parameter]:
        out = [self.E]
        for site in self.sites:
            for which in ("K", "V"):
                m = self.mlps[site][which]
                out += [m.w1, m.b1, m.w2, m.b2]
        return out

    def copy(self) -> "PrefixGenerator":
        clone = PrefixGenerator(self.domain_id, self.prefix_length, self.d,
                                self.sites, self.seed)
        for dst, src in zip(clone.parameters(), self.parameters()):
            dst.value.data = src.value.data.copy()
        return clone


def init_prefix_generator(config: BackboneConfig, prefix_token_ids: Sequence[int],
                          embedding_table, domain_id: str,
                          seed: int) -> PrefixGenerator:
    """Fresh generator: E copies embedding rows of the given token ids.

    The ids are typically the C most frequent tokens of the domain's training
    documents; MLP weights start uniform in (-1/sqrt(d), 1/sqrt(d)) from the
    seed, biases at zero.
    """
    if isinstance(embedding_table, nc.Parameter):
        table = embedding_table.value.data
    elif isinstance(embedding_table, nc.Tensor):
        table = embedding_table.data
    else:
        table = np.asarray(embedding_table, dtype=np.float64)
    ids = list(prefix_token_ids)
    if any(i < 0 or i >= table.shape[0] for i in ids):
        raise IndexError(f"prefix token id out of range [0, {table.shape[0]})")
    if table.shape[1] != config.d_model:
        raise DimensionError(
            f"embedding width {table.shape[1]} != d_model {config.d_model}")
    gen = PrefixGenerator(domain_id, len(ids), config.d_model, config.sites(), seed)
    gen.E.value.data = table[ids].copy()
    return gen


def _run_mlp(e: nc.Tensor, mlp: PrefixMlp) -> nc.Tensor:
    h = nc.tanh(nc.add(nc.matmul(e, mlp.w1.value), mlp.b1.value))
    return nc.add(nc.matmul(h, mlp.w2.value), mlp.b2.value)


def materialize(gen: PrefixGenerator, e_override=None) -> PrefixTensors:
    """Run every site MLP over E (or an override with the same shape).

    Pure: no state changes, repeated calls are bit-identical.  Gradients flow
    to E and the MLPs when called inside a training graph.
    """
    if e_override is None:
        e = gen.E.value
    else:
        e = nc.as_tensor(e_override)
        if e.shape != (gen.prefix_length, gen.d):
            raise DimensionError(
                f"override embedding shape {e.shape} != "
                f"({gen.prefix_length}, {gen.d})")
    sites = {}
    for site in gen.sites:
        mlps = gen.mlps[site]
        sites[site] = (_run_mlp(e, mlps["K"]), _run_mlp(e, mlps["V"]))
    return PrefixTensors(sites)


# ---------------------------------------------------------------------------
# checkpoint io


def _prefix_metadata(gen: PrefixGenerator) -> dict[str, str]:
    return {
        "C": str(gen.prefix_length),
        "d": str(gen.d),
        "domain_id": gen.domain_id,
        "seed": str(gen.seed),
        "sites": ",".join(str(s) for s in gen.sites),
    }


def prefix_bytes(gen: PrefixGenerator) -> bytes:
    arrays = [p.value.data for p in gen.parameters()]
    return serialize(PREFIX_MAGIC, _prefix_metadata(gen), arrays)


def save_prefix(gen: PrefixGenerator, path: str) -> None:
    write_container(path, PREFIX_MAGIC, _prefix_metadata(gen),
                    [p.value.data for p in gen.parameters()])


def load_prefix(path: str, expect: BackboneConfig | None = None) -> PrefixGenerator:
    reader: ContainerReader = read_container(path, PREFIX_MAGIC)
    meta = reader.metadata
    try:
        c = int(meta["C"])
        d = int(meta["d"])
        domain_id = meta["domain_id"]
        seed = int(meta["seed"])
        sites = [AttentionSite.parse(s) for s in meta["sites"].split(",")]
    except (KeyError, ValueError) as exc:
        raise CheckpointFormatError(f"prefix metadata invalid: {exc}") from exc
    if expect is not None:
        if d != expect.d_model:
            raise ConfigMismatchError(
                f"prefix d {d} does not match backbone d_model {expect.d_model}")
        if sites != expect.sites():
            raise ConfigMismatchError(
                f"prefix sites {[str(s) for s in sites]} do not match backbone sites")
    gen = PrefixGenerator(domain_id, c, d, sites, seed)
    for p in gen.parameters():
        p.value.data = reader.take(p.shape)
    reader.finish()
    return gen
