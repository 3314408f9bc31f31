"""Sentence/corpus BLEU, ROUGE-1/2/L F1, costs, and per-set cost rescaling.

Sentence BLEU smooths match and total counts to one for orders >= 2 (unigram
counts stay raw) so a zero higher-order match cannot zero the geometric mean;
corpus BLEU aggregates raw counts with no smoothing. Both apply the brevity
penalty min(1, exp(1 - |ref|/|hyp|)).

Inputs may be id arrays, token-string sequences, or whitespace-joined strings;
scores depend only on the match structure, never on the ids themselves.
"""

from __future__ import annotations

import dataclasses
import math
import warnings
from enum import Enum

import numpy as np

from . import kernels

MAX_PACKED_ID = 1 << 15  # n-gram keys pack 15 bits per token into an int64


class MetricKind(str, Enum):
    BLEU_SENT = "bleu_sent"
    ROUGE_1 = "rouge1"
    ROUGE_2 = "rouge2"
    ROUGE_L = "rougeL"


def _as_ids(seq) -> np.ndarray:
    """Normalize tokens to a small int64 id array (strings are interned)."""
    if isinstance(seq, str):
        seq = seq.split()
    seq = list(seq)
    if seq and isinstance(seq[0], str):
        interned: dict[str, int] = {}
        ids = [interned.setdefault(t, len(interned)) for t in seq]
        return np.array(ids, dtype=np.int64)
    arr = np.asarray(seq, dtype=np.int64)
    if arr.size and (arr.min() < 0 or arr.max() >= MAX_PACKED_ID):
        # remap: scores only depend on equality structure
        _, inv = np.unique(arr, return_inverse=True)
        return inv.astype(np.int64)
    return arr


def _pair_ids(ref, hyp) -> tuple[np.ndarray, np.ndarray]:
    """Intern ref and hyp against one shared token table."""
    if isinstance(ref, str):
        ref = ref.split()
    if isinstance(hyp, str):
        hyp = hyp.split()
    ref, hyp = list(ref), list(hyp)
    if (ref and isinstance(ref[0], str)) or (hyp and isinstance(hyp[0], str)):
        interned: dict[str, int] = {}
        r = [interned.setdefault(t, len(interned)) for t in ref]
        h = [interned.setdefault(t, len(interned)) for t in hyp]
        return np.array(r, dtype=np.int64), np.array(h, dtype=np.int64)
    both = _as_ids(list(ref) + list(hyp))
    return both[: len(ref)], both[len(ref) :]


def sentence_bleu(ref, hyp, max_order: int = 4) -> float:
    """Smoothed sentence-level BLEU in [0, 1]."""
    r, h = _pair_ids(ref, hyp)
    if r.size == 0:
        raise ValueError("empty reference")
    if h.size == 0:
        warnings.warn("empty hypothesis scored as 0", stacklevel=2)
        return 0.0
    matches, totals = kernels.ngram_stats(r, h, max_order)
    if matches[0] == 0:
        return 0.0
    log_p = math.log(matches[0] / totals[0])
    for n in range(2, max_order + 1):
        log_p += math.log((matches[n - 1] + 1.0) / (totals[n - 1] + 1.0))
    bp = min(1.0, math.exp(1.0 - r.size / h.size))
    return bp * math.exp(log_p / max_order)


def corpus_bleu(refs, hyps, max_order: int = 4) -> float:
    """Standard aggregate-count BLEU with brevity penalty, no smoothing.

    Orders with zero aggregate hypothesis n-grams are excluded from the
    geometric mean (degenerate very-short corpora); a zero match count at any
    included order gives 0.
    """
    if len(refs) != len(hyps):
        raise ValueError(f"length mismatch: {len(refs)} refs vs {len(hyps)} hyps")
    if len(refs) == 0:
        raise ValueError("empty corpus")
    matches = np.zeros(max_order, np.int64)
    totals = np.zeros(max_order, np.int64)
    ref_len = 0
    hyp_len = 0
    for ref, hyp in zip(refs, hyps):
        r, h = _pair_ids(ref, hyp)
        ref_len += r.size
        hyp_len += h.size
        if r.size == 0:
            raise ValueError("empty reference")
        if h.size == 0:
            continue
        m, t = kernels.ngram_stats(r, h, max_order)
        matches += m
        totals += t
    if hyp_len == 0:
        return 0.0
    log_p = 0.0
    used = 0
    for n in range(1, max_order + 1):
        if totals[n - 1] == 0:
            continue
        if matches[n - 1] == 0:
            return 0.0
        log_p += math.log(matches[n - 1] / totals[n - 1])
        used += 1
    bp = min(1.0, math.exp(1.0 - ref_len / hyp_len))
    return bp * math.exp(log_p / used) if used else 0.0


def rouge(ref, hyp, variant) -> float:
    """ROUGE F1: variant 1 or 2 for n-gram overlap, "L" for LCS."""
    variant = str(variant)
    r, h = _pair_ids(ref, hyp)
    if r.size == 0:
        raise ValueError("empty reference")
    if h.size == 0:
        return 0.0
    if variant in ("1", "2"):
        n = int(variant)
        matches, totals = kernels.ngram_stats(r, h, n)
        overlap = matches[n - 1]
        hyp_count = totals[n - 1]
        ref_count = r.size - n + 1
        if hyp_count <= 0 or ref_count <= 0 or overlap == 0:
            return 0.0
        p = overlap / hyp_count
        rec = overlap / ref_count
        return 2.0 * p * rec / (p + rec)
    if variant.upper() == "L":
        lcs = kernels.lcs_len(r, h)
        if lcs == 0:
            return 0.0
        p = lcs / h.size
        rec = lcs / r.size
        return 2.0 * p * rec / (p + rec)
    raise ValueError(f"unknown ROUGE variant {variant!r}")


def metric_score(ref, hyp, kind: MetricKind | str) -> float:
    kind = MetricKind(kind)
    if kind is MetricKind.BLEU_SENT:
        return sentence_bleu(ref, hyp)
    return rouge(ref, hyp, kind.value[-1])


def cost(ref, hyp, kind: MetricKind | str = MetricKind.BLEU_SENT) -> float:
    """1 - metric score, in [0, 1]."""
    return 1.0 - metric_score(ref, hyp, kind)


def rescale_costs(costs: np.ndarray) -> np.ndarray:
    """Affine map of a set's costs onto [0, 1]; all zero when the range is 0."""
    costs = np.asarray(costs, dtype=np.float64)
    lo = costs.min()
    hi = costs.max()
    if hi == lo:
        return np.zeros_like(costs)
    return (costs - lo) / (hi - lo)


def rescale_set_costs(cset):
    """Return a candidate set whose costs are rescaled onto [0, 1].

    Cost ordering (hence the pseudo-reference) is preserved; singleton sets
    are returned unchanged with a warning.
    """
    if len(cset.candidates) < 2:
        warnings.warn("singleton candidate set left unrescaled", stacklevel=2)
        return cset
    new = rescale_costs(np.array([c.cost for c in cset.candidates]))
    cands = [dataclasses.replace(c, cost=float(v)) for c, v in zip(cset.candidates, new)]
    return dataclasses.replace(cset, candidates=cands)
