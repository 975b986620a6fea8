"""Command line entry points.

Subcommands cover data generation, stagewise and end-to-end runs, the two
paper-shaped sweeps, incremental domain addition, a gradient self-check, and
result reporting.  Exit codes: 0 success, 2 configuration error, 3 data or
file error, 4 violated internal invariant.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .. import numcore as nc
from ..backbone import BackboneConfig, BackboneWeights
from ..container import atomic_write_bytes
from ..errors import (CheckpointFormatError, ConfigError, DegenerateInputError,
                      InvariantError)
from ..prefixgen import init_prefix_generator, materialize
from ..textproc import Pair, TokenizedDoc, detokenize
from ..training import pair_loss
from .config import MERGE_METHODS, load_config
from .experiment import (ExperimentPipeline, RunResult, add_source_domain,
                         run_experiment, sweep)
from .report import render_table, results_to_json
from .synth import SyntheticDomainSpec

STAGES = ("data", "backbone", "prefixes", "weights", "merge")


def _pipeline_through(config_path: str, out: str | None, last_stage: str
                      ) -> ExperimentPipeline:
    """Run pipeline stages in order up to and including last_stage."""
    cfg = load_config(config_path)
    pipe = ExperimentPipeline(cfg, run_dir=out)
    for stage in STAGES[:STAGES.index(last_stage) + 1]:
        if stage in ("weights", "merge") and cfg.method not in MERGE_METHODS:
            raise ConfigError(
                f"method {cfg.method!r} has no {stage} stage; use `run`")
        if stage == "merge" and cfg.method == "dapa-inst":
            raise ConfigError(
                "dapa-inst merges per document at evaluation time")
        {"data": pipe.prepare_data,
         "backbone": pipe.prepare_backbone,
         "prefixes": pipe.train_source_prefixes,
         "weights": pipe.compute_weights,
         "merge": pipe.build_merged}[stage]()
    return pipe


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    pipe = ExperimentPipeline(cfg, run_dir=args.out)
    pipe.prepare_data()
    out = Path(args.out)
    corpora = list(pipe.source_corpora.values()) + [pipe.target_corpus]
    for corpus in corpora:
        for split in ("train", "dev", "test"):
            lines = []
            for pair in getattr(corpus, split):
                doc = detokenize(pair.doc.ids, pipe.vocab)
                summary = detokenize(pair.summary.ids, pipe.vocab)
                lines.append(f"{doc}\t{summary}")
            path = out / f"{corpus.name}.{split}.txt"
            atomic_write_bytes(str(path), ("\n".join(lines) + "\n").encode())
    counts = ", ".join(f"{c.name}: {len(c.train)}/{len(c.dev)}/{len(c.test)}"
                       for c in corpora)
    print(f"wrote corpora to {out} ({counts})")
    return 0


def cmd_train_prefix(args) -> int:
    pipe = _pipeline_through(args.config, args.out, "backbone")
    specs = pipe.cfg.sources
    if args.domain is not None:
        specs = [s for s in specs if s.name == args.domain]
        if not specs:
            raise ConfigError(f"unknown source domain {args.domain!r}")
    kept = pipe.cfg.sources
    pipe.cfg.sources = specs
    try:
        pipe.train_source_prefixes()
    finally:
        pipe.cfg.sources = kept
    for gen in pipe.gens:
        print(f"trained prefix {gen.domain_id} (C={gen.prefix_length})")
    return 0


def cmd_train_erm(args) -> int:
    cfg = load_config(args.config)
    if cfg.method in MERGE_METHODS:
        raise ConfigError(
            f"method {cfg.method!r} is a merge method; use `run` or `weights`")
    pipe = _pipeline_through(args.config, args.out, "backbone")
    pipe.train_adapt()
    print(f"trained {cfg.method} artifact for target {cfg.target.name}")
    return 0


def cmd_weights(args) -> int:
    pipe = _pipeline_through(args.config, args.out, "weights")
    if pipe.weights is None:
        print("dapa-inst computes one weight row per document at eval time")
        return 0
    for name, value in zip(pipe.weights.domains, pipe.weights.w):
        print(f"{name}\t{value:.6f}")
    return 0


def cmd_merge(args) -> int:
    pipe = _pipeline_through(args.config, args.out, "merge")
    print(f"merged prefix: C={pipe.merged.prefix_length}, d={pipe.merged.d}, "
          f"{len(pipe.merged.sites)} attention sites")
    return 0


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    result = run_experiment(cfg, run_dir=args.out)
    print(render_table([result]))
    return 0


def cmd_eval(args) -> int:
    return cmd_run(args)


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    try:
        values = [int(v) for v in args.values.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"sweep values must be integers: {exc}") from exc
    results = sweep(cfg, args.axis, values, base_dir=args.out)
    print(render_table(results))
    return 0


def cmd_add_domain(args) -> int:
    with open(args.spec, "r", encoding="utf-8") as fh:
        try:
            spec = SyntheticDomainSpec.from_json_dict(json.load(fh))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid domain spec JSON: {exc}") from exc
    weights, result = add_source_domain(args.run_dir, spec)
    for name, value in zip(weights.domains, weights.w):
        print(f"{name}\t{value:.6f}")
    print(render_table([result]))
    return 0


def run_grad_check(d_model: int = 16, n_heads: int = 2, n_layers: int = 1,
                   prefix_length: int = 4, vocab_size: int = 32,
                   seed: int = 0) -> float:
    """Max relative error of analytic vs numeric gradients of the prefix loss.

    Builds a tiny frozen backbone, a fresh prefix generator, and one random
    pair, then checks every generator parameter on the end-to-end
    cross-entropy in 64-bit arithmetic.
    """
    config = BackboneConfig(vocab_size=vocab_size, d_model=d_model,
                            n_heads=n_heads, n_encoder_layers=n_layers,
                            n_decoder_layers=n_layers, d_ff=2 * d_model,
                            max_src_len=12, max_tgt_len=8)
    backbone = BackboneWeights(config, seed=seed)
    backbone.freeze()
    rng = np.random.default_rng(seed + 1)
    gen = init_prefix_generator(
        config, list(rng.integers(4, vocab_size, size=prefix_length)),
        backbone.embedding, "gradcheck", seed + 2)
    doc = TokenizedDoc([int(x) for x in rng.integers(4, vocab_size, size=6)])
    summary = TokenizedDoc([int(x) for x in rng.integers(4, vocab_size, size=3)])
    pair = Pair(doc, summary)

    def loss() -> nc.Tensor:
        return pair_loss(pair, materialize(gen), backbone)

    # eps 1e-4 balances truncation against roundoff for a loss of order 1;
    # smaller steps put the difference quotient in the roundoff regime for
    # the smallest gradient entries
    return nc.grad_check(loss, gen.parameters(), eps=1e-4)


def cmd_grad_check(args) -> int:
    err = run_grad_check(seed=args.seed)
    print(f"max relative gradient error: {err:.3e} (tolerance {args.tol:.1e})")
    if not err <= args.tol:
        raise InvariantError(f"gradient check failed: {err:.3e} > {args.tol:.1e}")
    return 0


def _collect_results(paths: list[str]) -> list[RunResult]:
    results = []
    for raw in paths:
        path = Path(raw)
        files = sorted(path.rglob("result.json")) if path.is_dir() else [path]
        if not files:
            raise DegenerateInputError(f"no result.json files under {path}")
        for file in files:
            with open(file, "r", encoding="utf-8") as fh:
                try:
                    payload = json.load(fh)
                except json.JSONDecodeError as exc:
                    raise CheckpointFormatError(
                        f"{file}: invalid result JSON: {exc}") from exc
            records = payload if isinstance(payload, list) else [payload]
            results.extend(RunResult.from_json_dict(r) for r in records)
    return results


def cmd_report(args) -> int:
    results = _collect_results(args.results)
    print(render_table(results))
    if args.json is not None:
        atomic_write_bytes(args.json, results_to_json(results).encode())
        print(f"wrote {args.json}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dapa",
        description="prefix tuning and domain-aligned prefix averaging "
                    "on synthetic summarization corpora")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text, config=True, out_required=False):
        p = sub.add_parser(name, help=help_text)
        if config:
            p.add_argument("--config", required=True,
                           help="experiment config JSON")
            p.add_argument("--out", required=out_required, default=None,
                           help="run directory for artifacts")
        p.set_defaults(func=func)
        return p

    add("gen-data", cmd_gen_data,
        "generate the synthetic corpora as text files", out_required=True)
    p = add("train-prefix", cmd_train_prefix,
            "pretrain the backbone and train source prefixes")
    p.add_argument("--domain", default=None,
                   help="train only this source domain")
    add("train-erm", cmd_train_erm,
        "train a pooled or target-side baseline per the config method")
    add("weights", cmd_weights,
        "compute similarity matrix and domain weights")
    add("merge", cmd_merge, "build the merged prefix")
    add("eval", cmd_eval, "run the configured method and score it")
    add("run", cmd_run, "full pipeline: train, merge, evaluate")
    p = add("sweep", cmd_sweep, "rerun over prefix-length or sample-size values")
    p.add_argument("--axis", required=True, choices=("C", "m"))
    p.add_argument("--values", required=True,
                   help="comma-separated integer values")
    p = sub.add_parser("add-domain",
                       help="train one new source prefix into an existing run")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--spec", required=True, help="domain spec JSON file")
    p.set_defaults(func=cmd_add_domain)
    p = sub.add_parser("grad-check",
                       help="verify analytic gradients of the prefix loss")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-5)
    p.set_defaults(func=cmd_grad_check)
    p = sub.add_parser("report", help="render results as an aligned table")
    p.add_argument("results", nargs="+",
                   help="result.json files or run directories")
    p.add_argument("--json", default=None,
                   help="also write the canonical JSON list here")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (CheckpointFormatError, DegenerateInputError, FileNotFoundError,
            OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except InvariantError as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
