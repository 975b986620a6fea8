"""Acceptance gate: one verdict line per check.

Numeric correctness checks run first (gradients, no-op prefixes, frozen
weights, weight-rule and merge algebra, metric oracles, decoding,
serialization).  The benchmark checks then train the reduced-scale suite
once over ten seeds and assert the behavioral claims: the matched source
wins the weights, similarity weighting beats uniform averaging, supervised
target tuning bounds the merge from above, domains add incrementally, and
reruns are byte-identical.
"""

import copy
import hashlib
import time

import numpy as np
import pytest

import dapa.harness.experiment as ex
import dapa.numcore as nc
from dapa.backbone import BackboneConfig, BackboneWeights, forward
from dapa.decoding import (DecodeConfig, apply_repetition_penalty,
                           search_with_greedy_fallback)
from dapa.errors import CheckpointFormatError, ConfigMismatchError
from dapa.harness.cli import run_grad_check
from dapa.harness.config import ExperimentConfig
from dapa.harness.synth import SyntheticDomainSpec
from dapa.merging import (DomainWeights, SimilarityMatrix, dapa_alt_weights,
                          dapa_weights, merge_prefixes, merge_prefixes_max,
                          uniform_weights)
from dapa.metrics import rouge_l, rouge_n, score_pair
from dapa.prefixgen import init_prefix_generator, load_prefix, materialize, save_prefix
from dapa.textproc import BOS_ID, EOS_ID, PAD_ID

from oracles import rouge_l_prf, rouge_n_prf

SEEDS = tuple(range(10))


def verdict(name, ok, detail):
    print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    assert ok, f"{name}: {detail}"


def tiny_backbone(seed=0):
    config = BackboneConfig(vocab_size=32, d_model=16, n_heads=2,
                            n_encoder_layers=1, n_decoder_layers=1, d_ff=32,
                            max_src_len=12, max_tgt_len=8)
    return BackboneWeights(config, seed=seed)


def tiny_generators(model, count, prefix_length=4):
    rng = np.random.default_rng(9)
    gens = []
    for j in range(count):
        ids = [int(x) for x in rng.integers(4, 32, size=prefix_length)]
        gens.append(init_prefix_generator(model.config, ids, model.embedding,
                                          f"d{j}", seed=100 + j))
    return gens


# ---------------------------------------------------------------------------
# numeric correctness


def test_gradient_check_small_model():
    t0 = time.time()
    err = run_grad_check(seed=0)
    elapsed = time.time() - t0
    verdict("gradient check", err <= 1e-5 and elapsed < 60.0,
            f"max relative error {err:.3e} (tol 1e-5) in {elapsed:.1f}s (cap 60s)")


def test_empty_prefix_map_is_identity():
    model = tiny_backbone()
    model.freeze()
    rng = np.random.default_rng(1)
    mismatches = 0
    with nc.no_grad():
        for _ in range(100):
            src = [int(x) for x in rng.integers(4, 32, size=rng.integers(1, 11))]
            tgt = [BOS_ID] + [int(x) for x in rng.integers(4, 32,
                                                           size=rng.integers(1, 7))]
            with_map = forward(src, tgt, {}, model).data
            without = forward(src, tgt, None, model).data
            if not np.array_equal(with_map, without):
                mismatches += 1
    verdict("empty prefix map", mismatches == 0,
            f"logits bit-identical to vanilla backbone on {100 - mismatches}/100 inputs")


def test_backbone_frozen_under_prefix_training():
    pipe = ex.ExperimentPipeline(micro_config())
    pipe.prepare_data()
    pipe.prepare_backbone()
    before = [np.array(p.data, copy=True) for p in pipe.backbone.parameters()]
    pipe.train_source_prefixes()
    changed = sum(1 for old, p in zip(before, pipe.backbone.parameters())
                  if not np.array_equal(old, p.data))
    verdict("frozen backbone", changed == 0,
            f"{changed} of {len(before)} parameter arrays changed during prefix training")


def test_weight_rules_simplex_and_invariances():
    rng = np.random.default_rng(2)
    worst_sum = 0.0
    worst_shift = 0.0
    worst_equal = 0.0
    agree_m1 = True
    for _ in range(1000):
        m = int(rng.integers(1, 51))
        n = int(rng.integers(1, 7))
        values = rng.uniform(-0.5, 0.5, size=(m, n))
        sim = SimilarityMatrix(values, [f"d{j}" for j in range(n)])
        for w in (dapa_weights(sim), dapa_alt_weights(sim),
                  uniform_weights(sim.domains)):
            assert np.all(w.w >= 0.0)
            worst_sum = max(worst_sum, abs(float(np.sum(w.w)) - 1.0))
        shifted = SimilarityMatrix(values + rng.uniform(-0.5, 0.5),
                                   list(sim.domains))
        worst_shift = max(worst_shift, float(np.max(np.abs(
            dapa_weights(sim).w - dapa_weights(shifted).w))))
        column = rng.uniform(-1.0, 1.0, size=(m, 1))
        equal = SimilarityMatrix(np.tile(column, (1, n)),
                                 [f"d{j}" for j in range(n)])
        stacked = np.stack([dapa_weights(equal).w, dapa_alt_weights(equal).w,
                            uniform_weights(equal.domains).w])
        worst_equal = max(worst_equal, float(np.max(np.abs(
            stacked - stacked[0]))))
        row = SimilarityMatrix(rng.uniform(-1.0, 1.0, size=(1, n)),
                               [f"d{j}" for j in range(n)])
        agree_m1 &= bool(np.array_equal(dapa_weights(row).w,
                                        dapa_alt_weights(row).w))
    ok = (worst_sum <= 1e-9 and worst_shift <= 1e-12
          and worst_equal <= 1e-12 and agree_m1)
    verdict("weight rules", ok,
            f"1000 matrices: sum drift {worst_sum:.1e} (tol 1e-9), shift "
            f"{worst_shift:.1e} and equal-column {worst_equal:.1e} (tol 1e-12), "
            f"single-document agreement {agree_m1}")


def test_merge_degeneracies():
    model = tiny_backbone()
    model.freeze()
    gens = tiny_generators(model, 3)
    rng = np.random.default_rng(3)
    c, d = gens[0].prefix_length, gens[0].d
    e_target = rng.normal(size=(c, d))
    with nc.no_grad():
        single = materialize(gens[0], e_target)
        lone = merge_prefixes([gens[0]], DomainWeights(np.array([1.0]),
                                                       ["d0"], "dapa"), e_target)
        exact_single = all(
            np.array_equal(lone.sites[s][0].data, single.sites[s][0].data)
            and np.array_equal(lone.sites[s][1].data, single.sites[s][1].data)
            for s in single.sites)

        clones = [gens[0]] + [copy.deepcopy(gens[0]) for _ in range(2)]
        for j, g in enumerate(clones[1:], start=1):
            g.domain_id = f"c{j}"
        w = rng.dirichlet(np.ones(3))
        merged_clones = merge_prefixes(
            clones, DomainWeights(w, [g.domain_id for g in clones], "dapa"),
            e_target)
        clone_err = max(
            float(np.max(np.abs(merged_clones.sites[s][i].data
                                - single.sites[s][i].data)))
            for s in single.sites for i in (0, 1))

        w1 = rng.dirichlet(np.ones(3))
        w2 = rng.dirichlet(np.ones(3))
        a = 0.3
        names = [g.domain_id for g in gens]
        mix = merge_prefixes(gens, DomainWeights(a * w1 + (1 - a) * w2,
                                                 names, "dapa"), e_target)
        m1 = merge_prefixes(gens, DomainWeights(w1, names, "dapa"), e_target)
        m2 = merge_prefixes(gens, DomainWeights(w2, names, "dapa"), e_target)
        linear_err = max(
            float(np.max(np.abs(mix.sites[s][i].data
                                - (a * m1.sites[s][i].data
                                   + (1 - a) * m2.sites[s][i].data))))
            for s in mix.sites for i in (0, 1))

        merged_max, _ = merge_prefixes_max(gens, e_target)
        mats = [materialize(g, e_target) for g in gens]
        max_exact = all(
            np.array_equal(merged_max.sites[s][i].data,
                           np.maximum.reduce([m.sites[s][i].data for m in mats]))
            for s in merged_max.sites for i in (0, 1))
    ok = (exact_single and clone_err <= 1e-12 and linear_err <= 1e-12
          and max_exact)
    verdict("merge degeneracies", ok,
            f"single-source exact {exact_single}, identical-generator drift "
            f"{clone_err:.1e} and linearity drift {linear_err:.1e} (tol 1e-12), "
            f"elementwise max exact {max_exact}")


def test_rouge_agrees_with_bruteforce_oracles():
    rng = np.random.default_rng(4)
    checked = 0
    exact = True
    for _ in range(25):
        cand = [int(x) for x in rng.integers(0, 6, size=rng.integers(1, 9))]
        ref = [int(x) for x in rng.integers(0, 6, size=rng.integers(1, 9))]
        for n in (1, 2):
            got = rouge_n(cand, ref, n)
            exact &= (got.precision, got.recall, got.f1) == rouge_n_prf(cand, ref, n)
        got_l = rouge_l(cand, ref)
        exact &= (got_l.precision, got_l.recall, got_l.f1) == rouge_l_prf(cand, ref)
        checked += 1
    hand = score_pair("the cat sat".split(), "the cat was here".split())
    hand_ok = (hand["rouge1"].f1 == pytest.approx(4 / 7, abs=1e-12)
               and rouge_l("a c b".split(), "a b c".split()).f1
               == pytest.approx(2 / 3, abs=1e-12))
    verdict("rouge oracle", exact and hand_ok,
            f"exact agreement on {checked} randomized pairs, hand cases "
            f"4/7 unigram and 2/3 subsequence {hand_ok}")


def test_decoding_greedy_penalty_and_beam_ordering():
    rng = np.random.default_rng(5)
    vocab = 16
    greedy_match = 0
    penalty_noop = True
    beam_dominates = True
    for _ in range(50):
        table = rng.normal(size=(vocab, vocab))

        def step_fn(ids, table=table):
            return table[ids[-1]]

        cfg = DecodeConfig(beam_size=1, repetition_penalty=1.7, max_len=12)
        beam1 = search_with_greedy_fallback(step_fn, cfg).generated()
        ids = (BOS_ID,)
        for _ in range(cfg.max_len):
            logits = apply_repetition_penalty(step_fn(ids), set(ids[1:]),
                                              cfg.repetition_penalty)
            allowed = np.array([i for i in range(vocab)
                                if i not in (PAD_ID, BOS_ID)])
            order = np.lexsort((allowed, -logits[allowed]))
            token = int(allowed[order[0]])
            ids = ids + (token,)
            if token == EOS_ID:
                break
        reference = ids[1:-1] if ids[-1] == EOS_ID else ids[1:]
        greedy_match += beam1 == reference

        raw = rng.normal(size=vocab)
        penalty_noop &= bool(np.array_equal(
            apply_repetition_penalty(raw, {4, 5, 6}, 1.0), raw))

        wide = search_with_greedy_fallback(
            step_fn, DecodeConfig(beam_size=10, repetition_penalty=1.7,
                                  max_len=12))
        narrow = search_with_greedy_fallback(
            step_fn, DecodeConfig(beam_size=1, repetition_penalty=1.7,
                                  max_len=12))
        beam_dominates &= wide.score(True) >= narrow.score(True)
    ok = greedy_match == 50 and penalty_noop and beam_dominates
    verdict("decoding", ok,
            f"beam-1 equals greedy on {greedy_match}/50 inputs, unit penalty "
            f"no-op {penalty_noop}, beam-10 score >= beam-1 on every input "
            f"{beam_dominates}")


def test_prefix_checkpoint_roundtrip_and_rejects(tmp_path):
    model = tiny_backbone()
    gen = tiny_generators(model, 1)[0]
    first = tmp_path / "a.pfx"
    second = tmp_path / "b.pfx"
    save_prefix(gen, str(first))
    reloaded = load_prefix(str(first), expect=model.config)
    save_prefix(reloaded, str(second))
    identical = first.read_bytes() == second.read_bytes()

    corrupt = tmp_path / "c.pfx"
    blob = bytearray(first.read_bytes())
    blob[0] ^= 0xFF
    corrupt.write_bytes(bytes(blob))
    with pytest.raises(CheckpointFormatError):
        load_prefix(str(corrupt))
    wrong = BackboneConfig(vocab_size=32, d_model=24, n_heads=2,
                           n_encoder_layers=1, n_decoder_layers=1, d_ff=32,
                           max_src_len=12, max_tgt_len=8)
    with pytest.raises(ConfigMismatchError):
        load_prefix(str(first), expect=wrong)
    verdict("serialization", identical,
            "save-load-save byte-identical, corrupted magic and wrong "
            "dimensions rejected with their error classes")


# ---------------------------------------------------------------------------
# reduced-scale benchmark


def bench_spec(name, rule, marker, lo, hi):
    return SyntheticDomainSpec(name, rule, marker, lo, hi, k=2,
                               min_len=12, max_len=18,
                               n_train=100, n_dev=12, n_test=24)


def bench_config(method, seed):
    return ExperimentConfig(
        sources=[bench_spec("alpha", "lead-k", "markeralpha", 0, 80),
                 bench_spec("bravo", "tail-k", "markerbravo", 60, 140),
                 bench_spec("charlie", "repeated-keyword", "markercharlie",
                            120, 200)],
        target=bench_spec("tango", "repeated-keyword", "markertango", 120, 196),
        method=method, seed=seed,
        prefix_length=8, sample_size=64,
        universe_size=200, extra_markers=["markerdelta"],
        d_model=32, n_heads=2, n_encoder_layers=1, n_decoder_layers=1,
        d_ff=64, max_src_len=20, max_tgt_len=10,
        beam_size=4, decode_max_len=10,
        max_epochs=14, patience=3,
        pretrain_pairs=800, pretrain_dev=24, pretrain_epochs=18,
        pretrain_lr=3e-3)


def micro_config():
    """Tiny variant for the correctness checks that need a full pipeline."""
    small = dict(min_len=8, max_len=10, n_train=12, n_dev=4, n_test=6)
    return ExperimentConfig(
        sources=[SyntheticDomainSpec("alpha", "lead-k", "markeralpha", 0, 30,
                                     **small),
                 SyntheticDomainSpec("bravo", "repeated-keyword", "markerbravo",
                                     28, 60, **small)],
        target=SyntheticDomainSpec("tango", "repeated-keyword", "markertango",
                                   28, 56, **small),
        method="dapa", seed=0, prefix_length=3, sample_size=4,
        universe_size=60, d_model=16, n_heads=2, n_encoder_layers=1,
        n_decoder_layers=1, d_ff=32, max_src_len=12, max_tgt_len=8,
        beam_size=2, repetition_penalty=1.5, decode_max_len=6, batch_size=4,
        max_epochs=2, patience=1, pretrain_pairs=24, pretrain_dev=6,
        pretrain_epochs=1, pretrain_lr=1e-3)


def file_digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def share_trained(dst, src):
    # deterministic staging makes the copied artifacts bit-identical to what
    # the receiving pipeline would train itself, so methods that differ only
    # downstream of prefix training can share the expensive stages
    dst.vocab = src.vocab
    dst.source_corpora = src.source_corpora
    dst.target_corpus = src.target_corpus
    dst.backbone = src.backbone
    dst.gens = src.gens


@pytest.fixture(scope="module")
def benchmark(tmp_path_factory):
    root = tmp_path_factory.mktemp("benchmark")
    rows = {}
    result0_json = None
    for seed in SEEDS:
        run_dir = root / "seed-0" if seed == 0 else None
        pipe = ex.ExperimentPipeline(bench_config("dapa", seed), run_dir)
        pipe.prepare_data()
        pipe.prepare_backbone()
        pipe.train_source_prefixes()
        pipe.compute_weights()
        pipe.build_merged()
        res = pipe.evaluate()

        avg = ex.ExperimentPipeline(bench_config("dapa-average", seed))
        share_trained(avg, pipe)
        avg.compute_weights()
        avg.build_merged()
        res_avg = avg.evaluate()

        sup = ex.ExperimentPipeline(bench_config("prefix-target", seed))
        share_trained(sup, pipe)
        sup.train_adapt()
        res_sup = sup.evaluate()

        rows[seed] = {
            "argmax": pipe.weights.domains[int(np.argmax(pipe.weights.w))],
            "dapa": res.rouge["rouge1"]["f1"],
            "average": res_avg.rouge["rouge1"]["f1"],
            "supervised": res_sup.rouge["rouge1"]["f1"],
        }
        if seed == 0:
            result0_json = res.canonical_json()
        print(f"seed {seed}: {rows[seed]}")

    run0 = root / "seed-0"
    prior = {p: file_digest(p) for p in sorted(run0.glob("prefixes/*.pfx"))}
    prior[run0 / "backbone.ckpt"] = file_digest(run0 / "backbone.ckpt")
    trained = []
    real = ex.train_source_prefix

    def counting(corpus, backbone, tcfg):
        trained.append(corpus.name)
        return real(corpus, backbone, tcfg)

    ex.train_source_prefix = counting
    try:
        w_add, _ = ex.add_source_domain(
            run0, bench_spec("delta", "marker-template", "markerdelta", 40, 120))
    finally:
        ex.train_source_prefix = real
    return {
        "rows": rows,
        "result0_json": result0_json,
        "added": {
            "trained": trained,
            "weights": w_add,
            "prior_identical": all(file_digest(p) == h
                                   for p, h in prior.items()),
        },
    }


def test_matched_source_gets_top_weight(benchmark):
    hits = sum(1 for row in benchmark["rows"].values()
               if row["argmax"] == "charlie")
    verdict("matched-source selection", hits >= 8,
            f"argmax weight on charlie in {hits}/10 seeds (need 8)")


def test_similarity_weighting_beats_uniform_average(benchmark):
    wins = sum(1 for row in benchmark["rows"].values()
               if row["dapa"] >= row["average"])
    verdict("weighting beats averaging", wins >= 7,
            f"weighted merge rouge1 >= uniform merge in {wins}/10 seeds (need 7)")


def test_supervised_target_prefix_is_upper_bound(benchmark):
    wins = sum(1 for row in benchmark["rows"].values()
               if row["supervised"] >= row["dapa"])
    verdict("supervised upper bound", wins >= 7,
            f"target-trained prefix rouge1 >= merged prefix in {wins}/10 "
            f"seeds (need 7)")


def test_domain_addition_retrains_only_new_prefix(benchmark):
    added = benchmark["added"]
    ok = (added["trained"] == ["delta"] and added["prior_identical"]
          and added["weights"].domains == ["alpha", "bravo", "charlie", "delta"])
    verdict("incremental domain addition", ok,
            f"trained {added['trained']}, prior checkpoints byte-identical "
            f"{added['prior_identical']}, weights over "
            f"{added['weights'].domains}")


def test_rerun_reproduces_result_bytes(benchmark):
    again = ex.run_experiment(bench_config("dapa", 0))
    identical = again.canonical_json() == benchmark["result0_json"]
    verdict("end-to-end determinism", identical,
            "rerun with the same config and seed produced byte-identical "
            "result JSON")
