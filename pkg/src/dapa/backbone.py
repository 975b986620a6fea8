"""Mini encoder-decoder transformer with prefix injection at every attention site.

Pre-layer-norm blocks, sinusoidal position encodings, embeddings tied between
both embedding lookups and the output projection (scaled by 1/sqrt(d)).
Prefix key/value rows are concatenated in front of the real keys/values at
each attention site; the causal mask never covers prefix columns, so every
decoder position may attend to the full prefix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import numcore as nc
from .container import ContainerReader, read_container, write_container
from .errors import (CheckpointFormatError, ConfigError, ConfigMismatchError,
                     DegenerateInputError, DimensionError, SequenceLengthError)
from .textproc import SOURCE_LEN_CAP, SUMMARY_LEN_CAP, TokenizedDoc

BACKBONE_MAGIC = b"DAPABBN1"

SITE_KINDS = ("encoder-self", "decoder-self", "decoder-cross")


@dataclass(frozen=True)
class AttentionSite:
    """One prefix injection point: which attention kind, in which layer."""

    kind: str
    layer: int

    def __post_init__(self):
        if self.kind not in SITE_KINDS:
            raise ConfigError(f"unknown attention site kind {self.kind!r}")
        if self.layer < 0:
            raise ConfigError(f"attention site layer must be >= 0, got {self.layer}")

    def __str__(self) -> str:
        return f"{self.kind}:{self.layer}"

    @staticmethod
    def parse(text: str) -> "AttentionSite":
        kind, _, layer = text.rpartition(":")
        if not kind or not layer.isdigit():
            raise CheckpointFormatError(f"malformed attention site {text!r}")
        return AttentionSite(kind, int(layer))


@dataclass
class BackboneConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    n_encoder_layers: int = 2
    n_decoder_layers: int = 2
    d_ff: int = 128
    max_src_len: int = SOURCE_LEN_CAP
    max_tgt_len: int = SUMMARY_LEN_CAP

    def __post_init__(self):
        if self.vocab_size < 5:
            raise ConfigError(f"vocab_size must cover reserved ids, got {self.vocab_size}")
        if self.d_model < 1 or self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} must be a positive multiple of n_heads {self.n_heads}")
        for field_name in ("n_heads", "n_encoder_layers", "n_decoder_layers",
                          "d_ff", "max_src_len", "max_tgt_len"):
            if getattr(self, field_name) < 1:
                raise ConfigError(f"{field_name} must be >= 1")

    def sites(self) -> list[AttentionSite]:
        """Canonical order of every prefix site this architecture exposes."""
        out = [AttentionSite("encoder-self", i) for i in range(self.n_encoder_layers)]
        out += [AttentionSite("decoder-self", i) for i in range(self.n_decoder_layers)]
        out += [AttentionSite("decoder-cross", i) for i in range(self.n_decoder_layers)]
        return out


@dataclass
class LNParams:
    g: nc.Parameter
    b: nc.Parameter


@dataclass
class AttnParams:
    wq: nc.Parameter
    wk: nc.Parameter
    wv: nc.Parameter
    wo: nc.Parameter


@dataclass
class FfnParams:
    w1: nc.Parameter
    b1: nc.Parameter
    w2: nc.Parameter
    b2: nc.Parameter


@dataclass
class EncoderLayer:
    ln1: LNParams
    attn: AttnParams
    ln2: LNParams
    ffn: FfnParams


@dataclass
class DecoderLayer:
    ln1: LNParams
    self_attn: AttnParams
    ln2: LNParams
    cross_attn: AttnParams
    ln3: LNParams
    ffn: FfnParams


def _sinusoid_table(max_len: int, d: int) -> np.ndarray:
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    i = np.arange(d, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, (2.0 * np.floor(i / 2.0)) / d)
    return np.where(np.arange(d)[None, :] % 2 == 0, np.sin(angle), np.cos(angle))


class BackboneWeights:
    """All backbone parameters, with a freeze switch covering every field."""

    def __init__(self, config: BackboneConfig, seed: int):
        self.config = config
        self.seed = seed
        rng = np.random.default_rng(seed)
        d, ff, v = config.d_model, config.d_ff, config.vocab_size

        def w(shape, std):
            return nc.Parameter(rng.normal(0.0, std, size=shape))

        def ln():
            return LNParams(nc.Parameter(np.ones(d)), nc.Parameter(np.zeros(d)))

        def attn():
            s = d ** -0.5
            return AttnParams(w((d, d), s), w((d, d), s), w((d, d), s), w((d, d), s))

        def ffn():
            return FfnParams(w((d, ff), d ** -0.5), nc.Parameter(np.zeros(ff)),
                             w((ff, d), ff ** -0.5), nc.Parameter(np.zeros(d)))

        self.embedding = w((v, d), 1.0)
        self.enc_layers = [EncoderLayer(ln(), attn(), ln(), ffn())
                           for _ in range(config.n_encoder_layers)]
        self.dec_layers = [DecoderLayer(ln(), attn(), ln(), attn(), ln(), ffn())
                           for _ in range(config.n_decoder_layers)]
        self.ln_enc = ln()
        self.ln_dec = ln()
        self.pos_table = _sinusoid_table(
            max(config.max_src_len, config.max_tgt_len) + 1, d)
        self._frozen = False

    # -- parameter plumbing

    def named_parameters(self) -> list[tuple[str, nc.Parameter]]:
        out: list[tuple[str, nc.Parameter]] = [("embedding", self.embedding)]

        def push(prefix: str, obj) -> None:
            for field_name in obj.__dataclass_fields__:
                child = getattr(obj, field_name)
                if isinstance(child, nc.Parameter):
                    out.append((f"{prefix}.{field_name}", child))
                else:
                    push(f"{prefix}.{field_name}", child)

        for i, layer in enumerate(self.enc_layers):
            push(f"enc{i}", layer)
        for i, layer in enumerate(self.dec_layers):
            push(f"dec{i}", layer)
        push("ln_enc", self.ln_enc)
        push("ln_dec", self.ln_dec)
        return out

    def parameters(self) -> list[nc.Parameter]:
        return [p for _, p in self.named_parameters()]

    @property
    def frozen(self) -> bool:
        return self._frozen

    def freeze(self) -> None:
        self._frozen = True
        for p in self.parameters():
            p.trainable = False

    def unfreeze(self) -> None:
        self._frozen = False
        for p in self.parameters():
            p.trainable = True

    def copy(self) -> "BackboneWeights":
        clone = BackboneWeights(self.config, self.seed)
        for (_, dst), (_, src) in zip(clone.named_parameters(), self.named_parameters()):
            dst.value.data = src.value.data.copy()
        if self._frozen:
            clone.freeze()
        return clone


# ---------------------------------------------------------------------------
# forward computation


def _prefix_for(prefixes, site: AttentionSite):
    if prefixes is None:
        return None
    table = getattr(prefixes, "sites", prefixes)
    entry = table.get(site)
    if entry is None:
        return None
    h_k, h_v = entry
    if h_k.shape != h_v.shape:
        raise DimensionError(
            f"prefix K/V shapes differ at {site}: {h_k.shape} vs {h_v.shape}")
    return h_k, h_v


def attention_with_prefix(q: nc.Tensor, k: nc.Tensor, v: nc.Tensor,
                          h_k: nc.Tensor | None, h_v: nc.Tensor | None,
                          causal: bool, n_heads: int) -> nc.Tensor:
    """Multihead scaled dot-product attention over prefix-extended keys/values.

    q is (T x d); k and v are (S x d).  When a prefix is given its C rows are
    concatenated in front of k and v, and the causal mask (if any) only masks
    the real key positions, so prefix columns stay visible to every query.
    """
    if (h_k is None) != (h_v is None):
        raise DimensionError("prefix must supply both h_K and h_V or neither")
    d = q.shape[-1]
    if d % n_heads != 0:
        raise DimensionError(f"d_model {d} not divisible by n_heads {n_heads}")
    t, s = q.shape[0], k.shape[0]
    c = 0
    if h_k is not None:
        c = h_k.shape[0]
        k = nc.concat_rows(h_k, k)
        v = nc.concat_rows(h_v, v)
    qh = nc.split_heads(q, n_heads)
    kh = nc.split_heads(k, n_heads)
    vh = nc.split_heads(v, n_heads)
    scores = nc.scale(nc.matmul(qh, nc.transpose(kh)), (d // n_heads) ** -0.5)
    if causal:
        if t != s:
            raise DimensionError(f"causal attention needs square q/k, got {t} x {s}")
        mask = np.zeros((t, c + s))
        mask[:, c:][np.triu_indices(t, k=1)] = nc.NEG_INF
        scores = nc.shift(scores, mask)
    return nc.merge_heads(nc.matmul(nc.softmax_rows(scores), vh))


def _attn_sublayer(x: nc.Tensor, kv: nc.Tensor, ln: LNParams, attn: AttnParams,
                   prefix, causal: bool, n_heads: int,
                   kv_is_x: bool) -> nc.Tensor:
    xn = nc.layer_norm(x, ln.g.value, ln.b.value)
    kv_in = xn if kv_is_x else kv
    q = nc.matmul(xn, attn.wq.value)
    k = nc.matmul(kv_in, attn.wk.value)
    v = nc.matmul(kv_in, attn.wv.value)
    h_k, h_v = prefix if prefix is not None else (None, None)
    out = attention_with_prefix(q, k, v, h_k, h_v, causal, n_heads)
    return nc.add(x, nc.matmul(out, attn.wo.value))


def _ffn_sublayer(x: nc.Tensor, ln: LNParams, ffn: FfnParams) -> nc.Tensor:
    xn = nc.layer_norm(x, ln.g.value, ln.b.value)
    h = nc.relu(nc.add(nc.matmul(xn, ffn.w1.value), ffn.b1.value))
    return nc.add(x, nc.add(nc.matmul(h, ffn.w2.value), ffn.b2.value))


def _ids(doc) -> list[int]:
    return list(doc.ids) if isinstance(doc, TokenizedDoc) else list(doc)


def _embed(ids: Sequence[int], weights: BackboneWeights) -> nc.Tensor:
    x = nc.embedding(weights.embedding.value, ids)
    return nc.shift(x, weights.pos_table[:len(ids)])


def encode(src, prefixes, weights: BackboneWeights) -> nc.Tensor:
    """Encoder stack output, shape (len(src) x d)."""
    ids = _ids(src)
    if not ids:
        raise DegenerateInputError("encode: empty source")
    if len(ids) > weights.config.max_src_len:
        raise SequenceLengthError(
            f"source length {len(ids)} exceeds cap {weights.config.max_src_len}")
    x = _embed(ids, weights)
    for i, layer in enumerate(weights.enc_layers):
        x = _attn_sublayer(x, x, layer.ln1, layer.attn,
                           _prefix_for(prefixes, AttentionSite("encoder-self", i)),
                           causal=False, n_heads=weights.config.n_heads, kv_is_x=True)
        x = _ffn_sublayer(x, layer.ln2, layer.ffn)
    return nc.layer_norm(x, weights.ln_enc.g.value, weights.ln_enc.b.value)


def decoder_logits(enc_states: nc.Tensor, tgt_in, prefixes,
                   weights: BackboneWeights) -> nc.Tensor:
    """Teacher-forced logits over the decoder input (bos-first), (len(tgt) x V)."""
    ids = _ids(tgt_in)
    if not ids:
        raise DegenerateInputError("decoder: empty target input")
    # decoder input is bos plus up to max_tgt_len summary tokens
    if len(ids) > weights.config.max_tgt_len + 1:
        raise SequenceLengthError(
            f"decoder input length {len(ids)} exceeds cap {weights.config.max_tgt_len + 1}")
    x = _embed(ids, weights)
    n_heads = weights.config.n_heads
    for i, layer in enumerate(weights.dec_layers):
        x = _attn_sublayer(x, x, layer.ln1, layer.self_attn,
                           _prefix_for(prefixes, AttentionSite("decoder-self", i)),
                           causal=True, n_heads=n_heads, kv_is_x=True)
        x = _attn_sublayer(x, enc_states, layer.ln2, layer.cross_attn,
                           _prefix_for(prefixes, AttentionSite("decoder-cross", i)),
                           causal=False, n_heads=n_heads, kv_is_x=False)
        x = _ffn_sublayer(x, layer.ln3, layer.ffn)
    x = nc.layer_norm(x, weights.ln_dec.g.value, weights.ln_dec.b.value)
    logits = nc.matmul(x, nc.transpose(weights.embedding.value))
    return nc.scale(logits, weights.config.d_model ** -0.5)


def forward(src, tgt_in, prefixes, weights: BackboneWeights) -> nc.Tensor:
    """Full teacher-forced pass; row t predicts the token after tgt_in[:t+1]."""
    return decoder_logits(encode(src, prefixes, weights), tgt_in, prefixes, weights)


def decode_step(enc_states: nc.Tensor, generated: Sequence[int], prefixes,
                weights: BackboneWeights) -> np.ndarray:
    """Next-token logits given everything generated so far (bos included)."""
    ids = _ids(generated)
    if not ids:
        raise DegenerateInputError("decode_step needs at least the bos token")
    with nc.no_grad():
        logits = decoder_logits(enc_states, ids, prefixes, weights)
    return logits.data[-1]


# ---------------------------------------------------------------------------
# checkpoint io


def _config_metadata(config: BackboneConfig, seed: int) -> dict[str, str]:
    return {
        "kind": "backbone",
        "d_model": str(config.d_model),
        "n_heads": str(config.n_heads),
        "n_encoder_layers": str(config.n_encoder_layers),
        "n_decoder_layers": str(config.n_decoder_layers),
        "d_ff": str(config.d_ff),
        "vocab_size": str(config.vocab_size),
        "max_src_len": str(config.max_src_len),
        "max_tgt_len": str(config.max_tgt_len),
        "seed": str(seed),
    }


def save_backbone(weights: BackboneWeights, path: str) -> None:
    arrays = [p.value.data for _, p in weights.named_parameters()]
    write_container(path, BACKBONE_MAGIC,
                    _config_metadata(weights.config, weights.seed), arrays)


def load_backbone(path: str) -> BackboneWeights:
    reader: ContainerReader = read_container(path, BACKBONE_MAGIC)
    meta = reader.metadata
    try:
        config = BackboneConfig(
            vocab_size=int(meta["vocab_size"]), d_model=int(meta["d_model"]),
            n_heads=int(meta["n_heads"]),
            n_encoder_layers=int(meta["n_encoder_layers"]),
            n_decoder_layers=int(meta["n_decoder_layers"]), d_ff=int(meta["d_ff"]),
            max_src_len=int(meta["max_src_len"]), max_tgt_len=int(meta["max_tgt_len"]))
        seed = int(meta["seed"])
    except (KeyError, ValueError) as exc:
        raise CheckpointFormatError(f"backbone metadata invalid: {exc}") from exc
    weights = BackboneWeights(config, seed)
    for _, p in weights.named_parameters():
        p.value.data = reader.take(p.shape)
    reader.finish()
    return weights


def check_same_architecture(a: BackboneConfig, b: BackboneConfig) -> None:
    if a != b:
        raise ConfigMismatchError(f"backbone configs differ: {a} vs {b}")
