"""Training loops for prefixes and backbones with ROUGE-based early stopping.

Modes: prefix-tune (one prefix per source domain, frozen backbone),
erm-prefix / erm-finetune (pooled source domains), and the target-side
regimes finetune-target / prefix-target (m labeled pairs) and full-finetune /
full-prefix (entire target train split).  Prefix modes use a constant 5e-3
learning rate, finetuning modes 5e-4, both under Adam with bias correction.

Single-domain and target-side training stop once dev ROUGE-L fails to improve
for `patience` epochs; pooled training stops as soon as any domain's dev
ROUGE-L drops below its previous epoch.  Both retain and return the
best-scoring parameter snapshot, never a later, worse one.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numcore as nc
from .backbone import BackboneWeights, decoder_logits, encode
from .decoding import DecodeConfig, generate
from .errors import ConfigError, DegenerateInputError
from .metrics import RougeScore, corpus_rouge
from .prefixgen import PrefixGenerator, init_prefix_generator, materialize
from .textproc import BOS_ID, EOS_ID, DomainCorpus, Pair, TokenizedDoc, top_c_tokens

MODES = ("prefix-tune", "erm-prefix", "erm-finetune", "finetune-target",
         "prefix-target", "full-finetune", "full-prefix")
PREFIX_MODES = ("prefix-tune", "erm-prefix", "prefix-target", "full-prefix")

PREFIX_LR = 5e-3
FINETUNE_LR = 5e-4


@dataclass
class TrainConfig:
    mode: str
    learning_rate: float | None = None  # None resolves per mode
    batch_size: int = 5
    max_epochs: int = 10
    patience: int = 1
    prefix_length: int = 50
    seed: int = 0
    dev_decode: DecodeConfig = field(
        default_factory=lambda: DecodeConfig(beam_size=1))

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown training mode {self.mode!r}")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ConfigError("batch_size, max_epochs and patience must be >= 1")
        if self.prefix_length < 1:
            raise ConfigError(f"prefix_length must be >= 1, got {self.prefix_length}")
        if self.dev_decode.beam_size != 1:
            raise ConfigError("dev evaluation decodes greedily (beam_size 1)")

    @property
    def lr(self) -> float:
        if self.learning_rate is not None:
            return self.learning_rate
        return PREFIX_LR if self.mode in PREFIX_MODES else FINETUNE_LR


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    dev_rouge_l: float
    dev_by_domain: dict[str, float]


@dataclass
class TrainReport:
    mode: str
    domains: list[str]
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False
    wall_time_s: float = 0.0

    def log_lines(self) -> list[str]:
        lines = [f"mode={self.mode} domains={','.join(self.domains)}"]
        for rec in self.epochs:
            per_dom = " ".join(f"{k}={v:.4f}" for k, v in rec.dev_by_domain.items())
            lines.append(f"epoch {rec.epoch}: loss={rec.train_loss:.6f} "
                         f"dev_rougeL={rec.dev_rouge_l:.4f} {per_dom}")
        lines.append(f"best_epoch={self.best_epoch} stopped_early={self.stopped_early} "
                     f"wall_time_s={self.wall_time_s:.2f}")
        return lines

    def to_json_dict(self) -> dict:
        return {
            "mode": self.mode, "domains": self.domains,
            "best_epoch": self.best_epoch, "stopped_early": self.stopped_early,
            "wall_time_s": self.wall_time_s,
            "epochs": [{"epoch": e.epoch, "train_loss": e.train_loss,
                        "dev_rouge_l": e.dev_rouge_l,
                        "dev_by_domain": e.dev_by_domain} for e in self.epochs],
        }


# ---------------------------------------------------------------------------
# optimizer


class AdamState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self, params: Sequence[nc.Parameter]):
        self.m = [np.zeros(p.shape) for p in params]
        self.v = [np.zeros(p.shape) for p in params]
        self.t = 0


def sgd_adam_step(params: Sequence[nc.Parameter], grads: Sequence[np.ndarray],
                  state: AdamState, lr: float,
                  beta1: float = 0.9, beta2: float = 0.999,
                  eps: float = 1e-8) -> None:
    """One bias-corrected Adam update; mutates params and state in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ConfigError("optimizer state does not match parameter list")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * (g * g)
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        p.value.data = p.value.data - lr * m_hat / (np.sqrt(v_hat) + eps)


# ---------------------------------------------------------------------------
# loss and evaluation


def pair_loss(pair: Pair, prefixes, backbone: BackboneWeights) -> nc.Tensor:
    """Teacher-forced cross entropy for one document/summary pair."""
    if pair.summary is None:
        raise DegenerateInputError("training pair has no summary")
    cfg = backbone.config
    src = pair.doc.truncated(cfg.max_src_len)
    summary = pair.summary.truncated(cfg.max_tgt_len)
    dec_in = [BOS_ID] + summary.ids
    targets = summary.ids + [EOS_ID]
    logits = decoder_logits(encode(src, prefixes, backbone), dec_in,
                            prefixes, backbone)
    return nc.cross_entropy(logits, targets)


def evaluate_dev(backbone: BackboneWeights, prefixes, pairs: Sequence[Pair],
                 decode_cfg: DecodeConfig) -> dict[str, RougeScore]:
    """Greedy-decode every dev doc and score against its reference."""
    scored = []
    for pair in pairs:
        if pair.summary is None:
            raise DegenerateInputError("dev pair has no summary")
        hyp = generate(pair.doc.truncated(backbone.config.max_src_len),
                       prefixes, backbone, decode_cfg)
        scored.append((hyp.ids, pair.summary.ids))
    return corpus_rouge(scored)


# ---------------------------------------------------------------------------
# epoch loop


def _train_pairs(pairs: list[Pair], dev_by_domain: dict[str, list[Pair]],
                 params: list[nc.Parameter], make_prefixes, backbone: BackboneWeights,
                 cfg: TrainConfig, pooled_stop: bool,
                 report: TrainReport) -> dict[int, np.ndarray]:
    """Shared epoch loop; returns the best parameter snapshot by dev ROUGE-L."""
    if not pairs:
        raise DegenerateInputError("no training pairs")
    rng = np.random.default_rng(cfg.seed)
    opt = AdamState(params)
    best_snapshot = {i: p.value.data.copy() for i, p in enumerate(params)}
    best_score = -1.0
    prev_by_domain: dict[str, float] = {}
    bad_epochs = 0
    start = time.perf_counter()

    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(pairs))
        losses = []
        for lo in range(0, len(order), cfg.batch_size):
            batch = [pairs[i] for i in order[lo:lo + cfg.batch_size]]
            nc.zero_grads(params)
            prefixes = make_prefixes()
            total = None
            for pair in batch:
                loss = pair_loss(pair, prefixes, backbone)
                total = loss if total is None else nc.add(total, loss)
            mean_loss = nc.scale(total, 1.0 / len(batch))
            nc.backward(mean_loss)
            sgd_adam_step(params, [p.grad for p in params], opt, cfg.lr)
            losses.append(mean_loss.item())

        with nc.no_grad():
            eval_prefixes = make_prefixes()
            dom_scores = {
                name: evaluate_dev(backbone, eval_prefixes, dev,
                                   cfg.dev_decode)["rougeL"].f1
                for name, dev in dev_by_domain.items()}
        mean_dev = sum(dom_scores.values()) / len(dom_scores)
        report.epochs.append(EpochRecord(epoch, float(np.mean(losses)),
                                         mean_dev, dom_scores))

        if mean_dev > best_score:
            best_score = mean_dev
            best_snapshot = {i: p.value.data.copy() for i, p in enumerate(params)}
            report.best_epoch = epoch
            bad_epochs = 0
        else:
            bad_epochs += 1

        if pooled_stop:
            dropped = [name for name, score in dom_scores.items()
                       if name in prev_by_domain and score < prev_by_domain[name]]
            prev_by_domain = dom_scores
            if dropped:
                report.stopped_early = True
                break
        elif bad_epochs >= cfg.patience:
            report.stopped_early = True
            break

    for i, p in enumerate(params):
        p.value.data = best_snapshot[i]
    report.wall_time_s = time.perf_counter() - start
    return best_snapshot


def _prefix_token_ids(pairs: Sequence[Pair], c: int) -> list[int]:
    docs = []
    for pair in pairs:
        docs.append(pair.doc)
        if pair.summary is not None:
            docs.append(pair.summary)
    return top_c_tokens(docs, c)


def _require_frozen(backbone: BackboneWeights) -> None:
    if not backbone.frozen:
        raise ConfigError("prefix training requires a frozen backbone")


# ---------------------------------------------------------------------------
# public training entry points


def train_source_prefix(domain: DomainCorpus, backbone: BackboneWeights,
                        cfg: TrainConfig) -> tuple[PrefixGenerator, TrainReport]:
    """Prefix-tune one domain against the frozen backbone."""
    _require_frozen(backbone)
    gen = init_prefix_generator(
        backbone.config, _prefix_token_ids(domain.train, cfg.prefix_length),
        backbone.embedding, domain.name, cfg.seed)
    report = TrainReport(mode=cfg.mode, domains=[domain.name])
    params = gen.parameters()
    _train_pairs(list(domain.train), {domain.name: list(domain.dev)}, params,
                 lambda: materialize(gen), backbone, cfg, pooled_stop=False,
                 report=report)
    return gen, report


def train_erm(domains: Sequence[DomainCorpus], backbone: BackboneWeights,
              cfg: TrainConfig):
    """Pooled-source training: one prefix (erm-prefix) or a finetuned backbone.

    A single-domain erm-prefix run takes the exact train_source_prefix path,
    so it produces identical parameters to prefix-tuning that domain.
    """
    if not domains:
        raise DegenerateInputError("train_erm needs at least one domain")
    if cfg.mode == "erm-prefix":
        _require_frozen(backbone)
        if len(domains) == 1:
            return train_source_prefix(domains[0], backbone, cfg)
        pooled = [p for d in domains for p in d.train]
        gen = init_prefix_generator(
            backbone.config, _prefix_token_ids(pooled, cfg.prefix_length),
            backbone.embedding, "erm", cfg.seed)
        report = TrainReport(mode=cfg.mode, domains=[d.name for d in domains])
        _train_pairs(pooled, {d.name: list(d.dev) for d in domains},
                     gen.parameters(), lambda: materialize(gen), backbone, cfg,
                     pooled_stop=True, report=report)
        return gen, report
    if cfg.mode == "erm-finetune":
        model = backbone.copy()
        model.unfreeze()
        pooled = [p for d in domains for p in d.train]
        report = TrainReport(mode=cfg.mode, domains=[d.name for d in domains])
        _train_pairs(pooled, {d.name: list(d.dev) for d in domains},
                     model.parameters(), lambda: None, model, cfg,
                     pooled_stop=len(domains) > 1, report=report)
        model.freeze()
        return model, report
    raise ConfigError(f"train_erm does not handle mode {cfg.mode!r}")


def train_target(target: DomainCorpus, m: int, backbone: BackboneWeights,
                 cfg: TrainConfig):
    """Target-side training regimes (labeled-target upper bounds).

    finetune-target / prefix-target use the first m labeled target train
    pairs; full-finetune / full-prefix use the entire target train split.
    Early stopping monitors the target dev split.
    """
    if cfg.mode in ("finetune-target", "prefix-target"):
        if m < 1 or m > len(target.train):
            raise DegenerateInputError(
                f"need 1 <= m <= {len(target.train)} labeled target pairs, got {m}")
        pairs = list(target.train[:m])
    elif cfg.mode in ("full-finetune", "full-prefix"):
        pairs = list(target.train)
    else:
        raise ConfigError(f"train_target does not handle mode {cfg.mode!r}")
    dev = {target.name: list(target.dev)}
    report = TrainReport(mode=cfg.mode, domains=[target.name])

    if cfg.mode in ("prefix-target", "full-prefix"):
        _require_frozen(backbone)
        gen = init_prefix_generator(
            backbone.config, _prefix_token_ids(pairs, cfg.prefix_length),
            backbone.embedding, target.name, cfg.seed)
        _train_pairs(pairs, dev, gen.parameters(), lambda: materialize(gen),
                     backbone, cfg, pooled_stop=False, report=report)
        return gen, report

    model = backbone.copy()
    model.unfreeze()
    _train_pairs(pairs, dev, model.parameters(), lambda: None, model, cfg,
                 pooled_stop=False, report=report)
    model.freeze()
    return model, report
