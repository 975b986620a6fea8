"""End-to-end experiment orchestration.

A run builds its vocabulary from the domain specs, generates corpora,
pretrains a backbone on the generic rule mixture and freezes it, then
branches by method: merge methods train one prefix per source and combine
them; erm methods train one pooled prefix or finetuned model; target methods
train on labeled target pairs.  Evaluation decodes the target test split and
scores ROUGE.

Every stage derives its randomness from (config, seed) alone, so a repeated
run produces a byte-identical result record.  Wall-clock times go to the run
log, never into the result record.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .. import numcore as nc
from ..backbone import (AttentionSite, BackboneWeights, load_backbone,
                        save_backbone)
from ..container import atomic_write_bytes, read_container, write_container
from ..decoding import generate
from ..errors import ConfigError, DegenerateInputError
from ..merging import (DomainWeights, SentenceEncoder, SimilarityMatrix,
                       TargetSample, build_similarity_matrix, dapa_alt_weights,
                       dapa_inst, dapa_weights, idf_from_docs, merge_embed,
                       merge_prefixes, merge_prefixes_max, uniform_weights)
from ..metrics import RougeScore, corpus_rouge
from ..prefixgen import PrefixTensors, load_prefix, materialize, save_prefix
from ..textproc import (N_RESERVED, DomainCorpus, Vocabulary, load_vocab,
                        save_vocab, top_c_tokens)
from ..training import (TrainConfig, TrainReport, _train_pairs, train_erm,
                        train_source_prefix, train_target)
from .config import (MERGE_METHODS, SCHEMA_VERSION, TARGET_LABEL_METHODS,
                     ExperimentConfig, load_config)
from .report import render_table
from .synth import (SyntheticDomainSpec, benchmark_vocabulary, fold_seed,
                    generate_domain, pretraining_pairs)

RESULT_SCHEMA = 1
MERGED_MAGIC = b"DAPAMRG1"


# ---------------------------------------------------------------------------
# result record


def rouge_json(scores: dict[str, RougeScore]) -> dict:
    return {k: {"precision": s.precision, "recall": s.recall, "f1": s.f1}
            for k, s in scores.items()}


@dataclass
class RunResult:
    method: str
    target: str
    seed: int
    rouge: dict[str, dict[str, float]]
    weights: dict | None = None
    extras: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {"schema": RESULT_SCHEMA, "method": self.method,
                "target": self.target, "seed": self.seed, "rouge": self.rouge,
                "weights": self.weights, "extras": self.extras}

    def canonical_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json_dict(cls, d: dict) -> "RunResult":
        if d.get("schema") != RESULT_SCHEMA:
            raise ConfigError(f"unsupported result schema {d.get('schema')!r}")
        return cls(d["method"], d["target"], d["seed"], d["rouge"],
                   d.get("weights"), d.get("extras", {}))


# ---------------------------------------------------------------------------
# merged-prefix persistence


def save_merged(tensors: PrefixTensors, path: str) -> None:
    sites = sorted(tensors.sites, key=str)
    meta = {"kind": "merged-prefix",
            "c": str(tensors.prefix_length), "d": str(tensors.d),
            "sites": ",".join(str(s) for s in sites)}
    arrays = []
    for site in sites:
        h_k, h_v = tensors.sites[site]
        arrays += [h_k.data, h_v.data]
    write_container(str(path), MERGED_MAGIC, meta, arrays)


def load_merged(path: str) -> PrefixTensors:
    reader = read_container(str(path), MERGED_MAGIC)
    meta = reader.metadata
    c, d = int(meta["c"]), int(meta["d"])
    sites = {}
    for token in meta["sites"].split(","):
        site = AttentionSite.parse(token)
        sites[site] = (nc.as_tensor(reader.take((c, d))),
                       nc.as_tensor(reader.take((c, d))))
    reader.finish()
    return PrefixTensors(sites)


# ---------------------------------------------------------------------------
# pipeline


class ExperimentPipeline:
    """Staged execution of one experiment; stages fill fields in order.

    Stages can be driven individually (tests replace corpora between stages
    to track data access); run() executes the method-appropriate sequence.
    """

    def __init__(self, cfg: ExperimentConfig, run_dir=None):
        self.cfg = cfg
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self._t0 = time.perf_counter()
        self.log_lines: list[str] = []
        self.vocab: Vocabulary | None = None
        self.source_corpora: dict[str, DomainCorpus] = {}
        self.target_corpus: DomainCorpus | None = None
        self.backbone: BackboneWeights | None = None
        self.gens: list = []
        self.encoder: SentenceEncoder | None = None
        self.sample: TargetSample | None = None
        self.sim: SimilarityMatrix | None = None
        self.weights: DomainWeights | None = None
        self.e_target: np.ndarray | None = None
        self.merged: PrefixTensors | None = None
        self.trained = None  # erm/target-mode artifact (generator or model)
        self.extras: dict = {}

    # -- plumbing ----------------------------------------------------------

    def _log(self, msg: str) -> None:
        self.log_lines.append(f"[t+{time.perf_counter() - self._t0:8.2f}s] {msg}")

    def _path(self, rel: str) -> Path:
        assert self.run_dir is not None
        path = self.run_dir / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        return path

    def _write_text(self, rel: str, text: str) -> None:
        if self.run_dir is not None:
            atomic_write_bytes(str(self._path(rel)), text.encode("utf-8"))

    def _train_config(self, mode: str, seed_label: str) -> TrainConfig:
        cfg = self.cfg
        return TrainConfig(
            mode=mode, learning_rate=cfg.learning_rate,
            batch_size=cfg.batch_size, max_epochs=cfg.max_epochs,
            patience=cfg.patience, prefix_length=cfg.prefix_length,
            seed=fold_seed(cfg.seed, seed_label),
            dev_decode=self._greedy_decode())

    def _greedy_decode(self):
        # greedy, penalty-free decoding for checkpoint selection and for
        # probing prefix behavior on the target sample: the test-time decode
        # recipe (beam + repetition penalty) is deliberately not part of
        # either signal, only of final evaluation
        return replace(self.cfg.decode_config(), beam_size=1,
                       repetition_penalty=1.0)

    # -- stages ------------------------------------------------------------

    def prepare_data(self) -> None:
        cfg = self.cfg
        self.vocab = benchmark_vocabulary(cfg.sources + [cfg.target],
                                          cfg.universe_size, cfg.extra_markers)
        for spec in cfg.sources:
            self.source_corpora[spec.name] = generate_domain(spec, self.vocab,
                                                             cfg.seed)
        self.target_corpus = generate_domain(cfg.target, self.vocab, cfg.seed)
        self._log(f"data: {len(self.vocab)} vocab entries, "
                  f"{len(cfg.sources)} sources, target {cfg.target.name}")
        if self.run_dir is not None:
            save_vocab(self.vocab, str(self._path("vocab.txt")))
            self._write_text("config.json", cfg.canonical_json())

    def prepare_backbone(self) -> None:
        cfg = self.cfg
        min_len = min(s.min_len for s in cfg.sources + [cfg.target])
        max_len = max(s.max_len for s in cfg.sources + [cfg.target])
        pairs = pretraining_pairs(cfg.universe_size, self.vocab,
                                  cfg.pretrain_pairs + cfg.pretrain_dev,
                                  cfg.seed, min_len, max_len)
        train, dev = pairs[:cfg.pretrain_pairs], pairs[cfg.pretrain_pairs:]
        model = BackboneWeights(cfg.backbone_config(len(self.vocab)),
                                seed=fold_seed(cfg.seed, "backbone-init"))
        # fixed-epoch pretraining: patience can never trigger, but the
        # best-dev checkpoint is still the one kept
        pre_cfg = TrainConfig(
            mode="erm-finetune", learning_rate=cfg.pretrain_lr,
            batch_size=cfg.batch_size, max_epochs=cfg.pretrain_epochs,
            patience=cfg.pretrain_epochs, seed=fold_seed(cfg.seed, "pretrain-shuffle"),
            dev_decode=self._greedy_decode())
        report = TrainReport(mode="erm-finetune", domains=["pretrain"])
        _train_pairs(train, {"pretrain": dev}, model.parameters(),
                     lambda: None, model, pre_cfg, pooled_stop=False,
                     report=report)
        model.freeze()
        self.backbone = model
        for line in report.log_lines():
            self._log(f"pretrain {line}")
        if self.run_dir is not None:
            save_backbone(model, str(self._path("backbone.ckpt")))

    def train_source_prefixes(self) -> None:
        self.gens = []
        for spec in self.cfg.sources:
            tcfg = self._train_config("prefix-tune", f"prefix-{spec.name}")
            gen, report = train_source_prefix(self.source_corpora[spec.name],
                                              self.backbone, tcfg)
            self.gens.append(gen)
            self._log(f"prefix {spec.name}: best_epoch={report.best_epoch} "
                      f"epochs={len(report.epochs)}")
            if self.run_dir is not None:
                save_prefix(gen, str(self._path(f"prefixes/{spec.name}.pfx")))

    def _build_encoder(self) -> SentenceEncoder:
        # similarity is computed over content words only: marker and cue
        # tokens sit above the word universe and carry no transfer signal
        dim = N_RESERVED + self.cfg.universe_size
        if not self.cfg.use_idf:
            return SentenceEncoder(dim=dim)
        docs = []
        for corpus in self.source_corpora.values():
            for pair in corpus.train:
                docs.append(pair.doc)
                if pair.summary is not None:
                    docs.append(pair.summary)
        return SentenceEncoder(dim=dim, idf=idf_from_docs(docs, dim))

    def _build_sample(self) -> TargetSample:
        cfg = self.cfg
        train = self.target_corpus.train
        if cfg.sample_size > len(train):
            raise DegenerateInputError(
                f"sample_size {cfg.sample_size} exceeds target train split "
                f"of {len(train)}")
        return TargetSample([p.doc for p in train[:cfg.sample_size]])

    def compute_weights(self) -> None:
        cfg = self.cfg
        self.encoder = self._build_encoder()
        self.sample = self._build_sample()
        names = [g.domain_id for g in self.gens]
        if cfg.method in ("dapa", "dapa-max", "dapa-embed", "dapa-alt"):
            self.sim = build_similarity_matrix(self.sample, self.gens,
                                               self.backbone,
                                               self._greedy_decode(),
                                               self.encoder)
            rule = dapa_alt_weights if cfg.method == "dapa-alt" else dapa_weights
            self.weights = rule(self.sim)
        elif cfg.method == "dapa-average":
            self.weights = uniform_weights(names)
        elif cfg.method == "dapa-inst":
            self.weights = None  # computed per test document
        else:
            raise ConfigError(f"method {cfg.method!r} has no weight stage")
        ids = top_c_tokens(self.sample.docs, cfg.prefix_length)
        self.e_target = self.backbone.embedding.value.data[ids].copy()
        if self.weights is not None:
            self._log(f"weights ({self.weights.rule}): " + " ".join(
                f"{n}={w:.4f}" for n, w in zip(names, self.weights.w)))
        if self.run_dir is not None:
            if self.sim is not None:
                self._write_text("sim_matrix.json", json.dumps(
                    self.sim.to_json_dict(), sort_keys=True, indent=2) + "\n")
            if self.weights is not None:
                self._write_text("weights.json", json.dumps(
                    self.weights.to_json_dict(), sort_keys=True, indent=2) + "\n")

    def build_merged(self) -> None:
        cfg = self.cfg
        if cfg.method in ("dapa", "dapa-average", "dapa-alt"):
            self.merged = merge_prefixes(self.gens, self.weights, self.e_target)
        elif cfg.method == "dapa-embed":
            e_mix = merge_embed(self.gens, self.weights)
            self.merged = merge_prefixes(self.gens, self.weights, e_mix)
        elif cfg.method == "dapa-max":
            self.merged, fractions = merge_prefixes_max(self.gens, self.e_target)
            self.extras["max_fractions"] = {
                g.domain_id: float(f) for g, f in zip(self.gens, fractions)}
            self._log("max fractions: " + " ".join(
                f"{k}={v:.4f}" for k, v in self.extras["max_fractions"].items()))
        elif cfg.method == "dapa-inst":
            self.merged = None
        else:
            raise ConfigError(f"method {cfg.method!r} has no merge stage")
        if self.run_dir is not None and self.merged is not None:
            save_merged(self.merged, str(self._path("merged.pfxt")))

    def train_adapt(self) -> None:
        """erm and labeled-target training modes."""
        cfg = self.cfg
        if cfg.method in ("erm-prefix", "erm-finetune"):
            tcfg = self._train_config(cfg.method, "erm")
            self.trained, report = train_erm(list(self.source_corpora.values()),
                                             self.backbone, tcfg)
        elif cfg.method in TARGET_LABEL_METHODS:
            tcfg = self._train_config(cfg.method, "target-adapt")
            self.trained, report = train_target(self.target_corpus,
                                                cfg.sample_size, self.backbone,
                                                tcfg)
        else:
            raise ConfigError(f"method {cfg.method!r} has no adapt stage")
        self._log(f"adapt {cfg.method}: best_epoch={report.best_epoch} "
                  f"epochs={len(report.epochs)}")
        if self.run_dir is not None:
            if isinstance(self.trained, BackboneWeights):
                save_backbone(self.trained, str(self._path("finetuned.ckpt")))
            else:
                save_prefix(self.trained, str(self._path("prefixes/adapted.pfx")))

    def evaluate(self) -> RunResult:
        cfg = self.cfg
        decode_cfg = cfg.decode_config()
        test = self.target_corpus.test
        model = self.backbone
        prefixes = None
        if cfg.method in ("erm-finetune", "finetune-target", "full-finetune"):
            model = self.trained
        elif cfg.method in ("erm-prefix", "prefix-target", "full-prefix"):
            with nc.no_grad():
                prefixes = materialize(self.trained)
        elif cfg.method != "dapa-inst":
            prefixes = self.merged

        scored = []
        gen_lines = []
        inst_weights = []
        for pair in test:
            doc = pair.doc.truncated(model.config.max_src_len)
            if cfg.method == "dapa-inst":
                w_i, tensors = dapa_inst(doc, self.gens, self.backbone,
                                         self._greedy_decode(), self.encoder)
                inst_weights.append(w_i.w)
                hyp = generate(doc, tensors, self.backbone, decode_cfg)
            else:
                hyp = generate(doc, prefixes, model, decode_cfg)
            scored.append((hyp.ids, pair.summary.ids))
            gen_lines.append(" ".join(str(i) for i in hyp.ids))
        if cfg.method == "dapa-inst":
            mean_w = np.mean(np.stack(inst_weights), axis=0)
            self.weights = DomainWeights(mean_w, [g.domain_id for g in self.gens],
                                         "inst")
            if self.run_dir is not None:
                self._write_text("weights.json", json.dumps(
                    self.weights.to_json_dict(), sort_keys=True, indent=2) + "\n")

        rouge = corpus_rouge(scored)
        self.extras["n_test"] = len(test)
        self.extras["n_sources"] = len(cfg.sources)
        result = RunResult(
            method=cfg.method, target=cfg.target.name, seed=cfg.seed,
            rouge=rouge_json(rouge),
            weights=None if self.weights is None else self.weights.to_json_dict(),
            extras=dict(self.extras))
        self._log("rouge: " + " ".join(
            f"{k}={v['f1']:.4f}" for k, v in result.rouge.items()))
        if self.run_dir is not None:
            self._write_text("result.json", result.canonical_json())
            self._write_text("generations.txt", "\n".join(gen_lines) + "\n")
            self._write_text("report.txt", render_table([result]))
            self._write_text("log.txt", "\n".join(self.log_lines) + "\n")
        return result

    def run(self) -> RunResult:
        self.prepare_data()
        self.prepare_backbone()
        if self.cfg.method in MERGE_METHODS:
            self.train_source_prefixes()
            self.compute_weights()
            self.build_merged()
        else:
            self.train_adapt()
        return self.evaluate()


def run_experiment(cfg: ExperimentConfig, run_dir=None) -> RunResult:
    return ExperimentPipeline(cfg, run_dir).run()


# ---------------------------------------------------------------------------
# sweeps


def sweep(cfg: ExperimentConfig, axis: str, values, base_dir=None) -> list[RunResult]:
    """Rerun per value; m-sweeps reuse the trained prefixes and backbone."""
    values = list(values)
    if axis not in ("C", "m"):
        raise ConfigError(f"sweep axis must be 'C' or 'm', got {axis!r}")
    if not values:
        raise ConfigError("sweep needs at least one value")
    if any((not isinstance(v, int)) or v < 1 for v in values):
        raise ConfigError("sweep values must be positive integers")

    if axis == "C":
        results = []
        for v in values:
            sub_dir = None if base_dir is None else Path(base_dir) / f"C-{v}"
            sub_cfg = ExperimentConfig.from_json_dict(
                {**cfg.to_json_dict(), "prefix_length": v})
            results.append(run_experiment(sub_cfg, sub_dir))
        return results

    if cfg.method not in MERGE_METHODS or cfg.method == "dapa-inst":
        raise ConfigError(f"m-sweep requires a sample-based merge method, "
                          f"got {cfg.method!r}")
    top = max(values)
    if top > cfg.target.n_train:
        raise ConfigError(f"m={top} exceeds target train split "
                          f"of {cfg.target.n_train}")
    base_cfg = ExperimentConfig.from_json_dict(
        {**cfg.to_json_dict(), "sample_size": top})
    pipeline = ExperimentPipeline(base_cfg, base_dir)
    pipeline.prepare_data()
    pipeline.prepare_backbone()
    pipeline.train_source_prefixes()
    results = []
    for v in values:
        sub = ExperimentPipeline(
            ExperimentConfig.from_json_dict(
                {**cfg.to_json_dict(), "sample_size": v}),
            None if base_dir is None else Path(base_dir) / f"m-{v}")
        # reuse every trained artifact; only the sample-dependent stages rerun
        sub.vocab = pipeline.vocab
        sub.source_corpora = pipeline.source_corpora
        sub.target_corpus = pipeline.target_corpus
        sub.backbone = pipeline.backbone
        sub.gens = pipeline.gens
        sub.compute_weights()
        sub.build_merged()
        results.append(sub.evaluate())
    return results


# ---------------------------------------------------------------------------
# incremental domain addition


def add_source_domain(run_dir, new_spec: SyntheticDomainSpec
                      ) -> tuple[DomainWeights, RunResult]:
    """Train only the new domain's prefix and refresh weights and result.

    Existing prefix checkpoints are read, never rewritten.  The stored
    similarity matrix gains one column (computed with the same sample and
    encoder); weights, merge, and evaluation rerun under the updated config.
    """
    run_dir = Path(run_dir)
    cfg = load_config(run_dir / "config.json")
    if cfg.method not in MERGE_METHODS:
        raise ConfigError(f"add-domain requires a merge method, got {cfg.method!r}")
    for spec in cfg.sources + [cfg.target]:
        if spec.name == new_spec.name:
            raise ConfigError(f"domain name {new_spec.name!r} already present")
        if spec.marker == new_spec.marker:
            raise ConfigError(f"domain marker {new_spec.marker!r} already present")
    vocab = load_vocab(str(run_dir / "vocab.txt"))
    if new_spec.marker not in vocab:
        raise ConfigError(
            f"marker {new_spec.marker!r} not in the run vocabulary; "
            f"regenerate the run with it listed in extra_markers")

    backbone = load_backbone(str(run_dir / "backbone.ckpt"))
    backbone.freeze()
    gens = [load_prefix(str(run_dir / f"prefixes/{s.name}.pfx"),
                        expect=backbone.config) for s in cfg.sources]

    new_cfg = ExperimentConfig.from_json_dict({
        **cfg.to_json_dict(),
        "sources": [s.to_json_dict() for s in cfg.sources] + [new_spec.to_json_dict()],
        "extra_markers": [m for m in cfg.extra_markers if m != new_spec.marker],
    })

    pipeline = ExperimentPipeline(new_cfg, run_dir)
    pipeline.vocab = vocab
    pipeline.backbone = backbone
    for spec in cfg.sources:
        pipeline.source_corpora[spec.name] = generate_domain(spec, vocab, cfg.seed)
    pipeline.target_corpus = generate_domain(new_cfg.target, vocab, cfg.seed)

    new_corpus = generate_domain(new_spec, vocab, cfg.seed)
    pipeline.source_corpora[new_spec.name] = new_corpus
    tcfg = pipeline._train_config("prefix-tune", f"prefix-{new_spec.name}")
    new_gen, _ = train_source_prefix(new_corpus, backbone, tcfg)
    save_prefix(new_gen, str(run_dir / "prefixes" / f"{new_spec.name}.pfx"))
    pipeline.gens = gens + [new_gen]

    # the encoder stays fixed to the original sources so existing similarity
    # columns remain comparable
    pipeline.source_corpora.pop(new_spec.name)
    encoder = pipeline._build_encoder()
    pipeline.source_corpora[new_spec.name] = new_corpus
    pipeline.encoder = encoder
    pipeline.sample = pipeline._build_sample()

    sim_path = run_dir / "sim_matrix.json"
    if cfg.method in ("dapa", "dapa-max", "dapa-embed", "dapa-alt"):
        with open(sim_path, "r", encoding="utf-8") as fh:
            old_sim = SimilarityMatrix.from_json_dict(json.load(fh))
        if old_sim.m != pipeline.sample.m:
            raise ConfigError(f"stored similarity matrix has m={old_sim.m}, "
                              f"sample has m={pipeline.sample.m}")
        new_col = build_similarity_matrix(pipeline.sample, [new_gen], backbone,
                                          pipeline._greedy_decode(), encoder)
        pipeline.sim = SimilarityMatrix(
            np.hstack([old_sim.values, new_col.values]),
            old_sim.domains + [new_spec.name])
        rule = dapa_alt_weights if cfg.method == "dapa-alt" else dapa_weights
        pipeline.weights = rule(pipeline.sim)
        pipeline._write_text("sim_matrix.json", json.dumps(
            pipeline.sim.to_json_dict(), sort_keys=True, indent=2) + "\n")
    elif cfg.method == "dapa-average":
        pipeline.weights = uniform_weights([g.domain_id for g in pipeline.gens])
    if pipeline.weights is not None:
        pipeline._write_text("weights.json", json.dumps(
            pipeline.weights.to_json_dict(), sort_keys=True, indent=2) + "\n")
    ids = top_c_tokens(pipeline.sample.docs, new_cfg.prefix_length)
    pipeline.e_target = backbone.embedding.value.data[ids].copy()

    pipeline.build_merged()
    result = pipeline.evaluate()
    pipeline._write_text("config.json", new_cfg.canonical_json())
    return pipeline.weights, result
