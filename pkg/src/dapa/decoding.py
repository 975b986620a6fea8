"""Beam search with repetition penalty and length-normalized scoring.

Hypotheses are scored by summed token log-probabilities, divided by the
generated length (exponent 1.0) when length normalization is on.  Exact score
ties resolve toward the lexicographically smaller token sequence.  The beam
always also considers the pure greedy rollout as a candidate, so widening the
beam can never return a worse-scoring summary than greedy decoding.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from . import numcore as nc
from .backbone import BackboneWeights, decode_step, encode
from .errors import ConfigError
from .textproc import BOS_ID, EOS_ID, PAD_ID, TokenizedDoc


@dataclass
class DecodeConfig:
    beam_size: int = 10
    repetition_penalty: float = 2.5
    max_len: int = 200
    length_normalization: bool = True

    def __post_init__(self):
        if self.beam_size < 1:
            raise ConfigError(f"beam_size must be >= 1, got {self.beam_size}")
        if self.repetition_penalty <= 0.0:
            raise ConfigError(
                f"repetition_penalty must be > 0, got {self.repetition_penalty}")
        if self.max_len < 1:
            raise ConfigError(f"max_len must be >= 1, got {self.max_len}")


@dataclass
class Hypothesis:
    ids: tuple[int, ...]  # starts with bos; ends with eos once finished
    logprob_sum: float
    finished: bool = False

    def generated(self) -> tuple[int, ...]:
        out = self.ids[1:]
        if out and out[-1] == EOS_ID:
            out = out[:-1]
        return out

    def score(self, length_normalization: bool) -> float:
        n = len(self.ids) - 1  # generated tokens, eos included
        if length_normalization and n > 0:
            return self.logprob_sum / float(n)
        return self.logprob_sum


def apply_repetition_penalty(logits: np.ndarray, generated_ids,
                             penalty: float) -> np.ndarray:
    """Divide positive logits / multiply negative logits of already-generated ids."""
    if penalty <= 0.0:
        raise ConfigError(f"repetition_penalty must be > 0, got {penalty}")
    out = np.array(logits, dtype=np.float64, copy=True)
    for i in set(generated_ids):
        out[i] = out[i] / penalty if out[i] > 0.0 else out[i] * penalty
    return out


def beam_tiebreak(hypotheses: Sequence[Hypothesis],
                  length_normalization: bool = True) -> Hypothesis:
    """Best score wins; exact ties go to the lexicographically smaller sequence."""
    if not hypotheses:
        raise ValueError("beam_tiebreak over no hypotheses")
    return min(hypotheses,
               key=lambda h: (-h.score(length_normalization), h.generated()))


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    return z - np.log(np.exp(z).sum())


def beam_search(step_fn: Callable[[tuple[int, ...]], np.ndarray],
                cfg: DecodeConfig) -> Hypothesis:
    """Run beam search over a next-token-logits callback.

    step_fn maps the ids generated so far (bos first) to a logit vector.  pad
    and bos are never expanded, so they cannot appear in the output.
    """
    live = [Hypothesis((BOS_ID,), 0.0)]
    finished: list[Hypothesis] = []
    for _ in range(cfg.max_len):
        candidates: list[Hypothesis] = []
        for hyp in live:
            logits = apply_repetition_penalty(
                step_fn(hyp.ids), set(hyp.ids[1:]), cfg.repetition_penalty)
            logp = _log_softmax(logits)
            allowed = np.array([i for i in range(len(logp))
                                if i not in (PAD_ID, BOS_ID)])
            # ties toward the smaller token id; lexsort's last key is primary
            order = np.lexsort((allowed, -logp[allowed]))
            for j in order[:cfg.beam_size]:
                token = int(allowed[j])
                candidates.append(Hypothesis(
                    hyp.ids + (token,), hyp.logprob_sum + float(logp[token])))
        live = []
        for cand in candidates:
            if cand.ids[-1] == EOS_ID:
                finished.append(replace(cand, finished=True))
            else:
                live.append(cand)
        live.sort(key=lambda h: (-h.score(cfg.length_normalization), h.generated()))
        live = live[:cfg.beam_size]
        if not live:
            break
    # hypotheses still open at the length cap count as finished
    finished.extend(replace(h, finished=True) for h in live)
    return beam_tiebreak(finished, cfg.length_normalization)


def search_with_greedy_fallback(step_fn: Callable[[tuple[int, ...]], np.ndarray],
                                cfg: DecodeConfig) -> Hypothesis:
    """Beam search whose candidate pool always contains the greedy rollout."""
    best = beam_search(step_fn, cfg)
    if cfg.beam_size == 1:
        return best
    greedy = beam_search(step_fn, replace(cfg, beam_size=1))
    return beam_tiebreak([best, greedy], cfg.length_normalization)


def generate(src, prefixes, weights: BackboneWeights,
             cfg: DecodeConfig) -> TokenizedDoc:
    """Summarize one source document; stops at eos or cfg.max_len tokens."""
    doc, _ = generate_with_score(src, prefixes, weights, cfg)
    return doc


def generate_with_score(src, prefixes, weights: BackboneWeights,
                        cfg: DecodeConfig) -> tuple[TokenizedDoc, float]:
    cap = min(cfg.max_len, weights.config.max_tgt_len)
    cfg = replace(cfg, max_len=cap)
    with nc.no_grad():
        enc_states = encode(src, prefixes, weights)

    def step_fn(ids: tuple[int, ...]) -> np.ndarray:
        return decode_step(enc_states, list(ids), prefixes, weights)

    best = search_with_greedy_fallback(step_fn, cfg)
    return TokenizedDoc(list(best.generated())), best.score(cfg.length_normalization)
