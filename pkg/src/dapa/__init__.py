"""Desk-scale prefix tuning and domain-aligned prefix averaging.

Subpackages cover the numeric core (autodiff), text processing, the frozen
encoder-decoder backbone, prefix generators, training loops, beam decoding,
similarity-weighted prefix merging, ROUGE metrics, and the synthetic-domain
experiment harness with its CLI.
"""

__version__ = "0.1.0"
