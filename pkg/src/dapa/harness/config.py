"""Experiment configuration: one versioned JSON document per run."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

from ..backbone import BackboneConfig
from ..decoding import DecodeConfig
from ..errors import ConfigError
from .synth import SyntheticDomainSpec

SCHEMA_VERSION = 1

METHODS = ("dapa", "dapa-average", "dapa-max", "dapa-inst", "dapa-embed",
           "dapa-alt", "erm-prefix", "erm-finetune", "finetune-target",
           "prefix-target", "full-finetune", "full-prefix")

# methods allowed to read labeled target training data
TARGET_LABEL_METHODS = ("finetune-target", "prefix-target", "full-finetune",
                        "full-prefix")
# methods built on merged source prefixes
MERGE_METHODS = ("dapa", "dapa-average", "dapa-max", "dapa-inst", "dapa-embed",
                 "dapa-alt")


@dataclass
class ExperimentConfig:
    sources: list[SyntheticDomainSpec]
    target: SyntheticDomainSpec
    method: str
    name: str = "run"
    prefix_length: int = 50
    sample_size: int = 50
    seed: int = 0
    universe_size: int = 200
    extra_markers: list[str] = field(default_factory=list)
    use_idf: bool = True
    # backbone architecture (vocab size comes from the generated vocabulary)
    d_model: int = 64
    n_heads: int = 4
    n_encoder_layers: int = 2
    n_decoder_layers: int = 2
    d_ff: int = 128
    max_src_len: int = 32
    max_tgt_len: int = 16
    # decoding
    beam_size: int = 10
    repetition_penalty: float = 2.5
    decode_max_len: int = 16
    length_normalization: bool = True
    # training
    batch_size: int = 5
    max_epochs: int = 10
    patience: int = 1
    learning_rate: float | None = None
    # backbone pretraining
    pretrain_pairs: int = 600
    pretrain_dev: int = 32
    pretrain_epochs: int = 6
    pretrain_lr: float = 1e-3

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}")
        if not self.sources:
            raise ConfigError("at least one source domain required")
        names = [s.name for s in self.sources] + [self.target.name]
        if len(set(names)) != len(names):
            raise ConfigError("domain names must be unique (target included)")
        markers = [s.marker for s in self.sources] + [self.target.marker]
        if len(set(markers)) != len(markers):
            raise ConfigError("domain markers must be unique (target included)")
        if self.prefix_length < 1:
            raise ConfigError(f"prefix_length must be >= 1, got {self.prefix_length}")
        if self.sample_size < 1:
            raise ConfigError(f"sample_size must be >= 1, got {self.sample_size}")
        for spec in self.sources + [self.target]:
            if spec.vocab_hi > self.universe_size:
                raise ConfigError(
                    f"domain {spec.name} slice exceeds universe {self.universe_size}")
        if self.pretrain_pairs < 1 or self.pretrain_dev < 1:
            raise ConfigError("pretraining needs at least one train and dev pair")
        if self.pretrain_epochs < 1:
            raise ConfigError("pretrain_epochs must be >= 1")
        # constructing these validates the remaining numeric fields
        self.backbone_config(vocab_size=max(8, self.universe_size))
        self.decode_config()

    def backbone_config(self, vocab_size: int) -> BackboneConfig:
        return BackboneConfig(
            vocab_size=vocab_size, d_model=self.d_model, n_heads=self.n_heads,
            n_encoder_layers=self.n_encoder_layers,
            n_decoder_layers=self.n_decoder_layers, d_ff=self.d_ff,
            max_src_len=self.max_src_len, max_tgt_len=self.max_tgt_len)

    def decode_config(self) -> DecodeConfig:
        return DecodeConfig(
            beam_size=self.beam_size,
            repetition_penalty=self.repetition_penalty,
            max_len=self.decode_max_len,
            length_normalization=self.length_normalization)

    def to_json_dict(self) -> dict:
        d = asdict(self)
        d["sources"] = [s.to_json_dict() for s in self.sources]
        d["target"] = self.target.to_json_dict()
        d["schema"] = SCHEMA_VERSION
        return d

    def canonical_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("experiment config must be a JSON object")
        if d.get("schema") != SCHEMA_VERSION:
            raise ConfigError(
                f"unsupported config schema {d.get('schema')!r}, "
                f"expected {SCHEMA_VERSION}")
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known - {"schema"}
        if extra:
            raise ConfigError(f"unknown config fields: {sorted(extra)}")
        missing = {"sources", "target", "method"} - set(d)
        if missing:
            raise ConfigError(f"missing config fields: {sorted(missing)}")
        kwargs = {k: v for k, v in d.items() if k in known}
        try:
            kwargs["sources"] = [SyntheticDomainSpec.from_json_dict(s)
                                 for s in d["sources"]]
            kwargs["target"] = SyntheticDomainSpec.from_json_dict(d["target"])
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed domain spec: {exc}") from exc
        return cls(**kwargs)


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return ExperimentConfig.from_json_dict(data)
