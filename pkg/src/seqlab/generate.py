"""Candidate-set construction: beam search, ancestral sampling, providers.

Hypotheses never expand the pad token; bos is only the decoder start symbol.
A hypothesis is finished when it emits eos, otherwise it is truncated at
max_len and flagged unfinished. The gold reference is never inserted into a
candidate set, but a model-generated copy of it stays.

Offline cache file format (also emitted by the `generate` CLI command): one
record per line -- source index, a tab, then the candidate token-id lists
separated by '|' with ids space-separated.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .corpus import EOS_ID, PAD_ID
from .metrics import MetricKind, metric_score
from .model import Model, ScoredCandidate, log_softmax_rows, softmax_rows


@dataclass
class Hypothesis:
    tokens: tuple[int, ...]
    sum_logprob: float
    finished: bool

    @property
    def norm_logprob(self) -> float:
        return self.sum_logprob / len(self.tokens)


@dataclass
class GenerationConfig:
    k: int = 16
    max_len: int = 200
    mode: str = "beam"  # beam | sample
    online: bool = True
    seed: int = 0
    normalize: bool = True  # length-normalized beam ranking
    refresh_every: int = 0  # offline cache regeneration period in batches (0 = never)

    def validate(self) -> "GenerationConfig":
        if self.k < 1:
            raise ValueError("candidate count must be >= 1")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")
        if self.mode not in ("beam", "sample"):
            raise ValueError(f"unknown generation mode {self.mode!r}")
        return self


@dataclass
class CandidateSet:
    """Deduplicated candidates for one source with u* and u-hat indices."""

    src_id: int
    source: np.ndarray
    candidates: list[ScoredCandidate]
    pseudo_ref: int  # u*: argmax metric score, lowest index on ties
    model_best: int  # u-hat: argmax avg_score, lowest index on ties

    def __len__(self) -> int:
        return len(self.candidates)

    def avg_logprobs(self) -> np.ndarray:
        return np.array([c.avg_logprob for c in self.candidates])

    def avg_scores(self) -> np.ndarray:
        return np.array([c.avg_score for c in self.candidates])

    def costs(self) -> np.ndarray:
        return np.array([c.cost for c in self.candidates])


def strip_eos(tokens) -> tuple[int, ...]:
    out = []
    for t in tokens:
        if int(t) == EOS_ID:
            break
        out.append(int(t))
    return tuple(out)


def beam_search(model: Model, x, k: int, max_len: int = 200, normalize: bool = True) -> list[Hypothesis]:
    """Breadth-first top-k search; returns up to k finished hypotheses.

    Ranking is by length-normalized log-probability unless normalize=False
    (raw sums). Deterministic: ties resolve in (step, beam, token) order. If
    nothing finishes within max_len, the k best unfinished hypotheses are
    returned flagged.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    Z = model.encode(x)
    Zt = np.ascontiguousarray(Z.T)
    d = model.dim
    state0 = model.init_state(Z)
    beams_tok: list[tuple[int, ...]] = [()]
    beams_sum = np.zeros(1)
    prev_ids = np.array([1], dtype=np.int64)  # BOS
    H = state0.h[None, :].copy()
    FEED = state0.feed[None, :].copy()
    finished: list[Hypothesis] = []

    def rank(h: Hypothesis) -> float:
        return h.norm_logprob if normalize else h.sum_logprob
    for _ in range(max_len):
        logits, hn, ht, _ = model.step_rows(prev_ids, FEED, H, Z, Zt)
        logp = log_softmax_rows(logits)
        logp[:, PAD_ID] = -np.inf
        cand = beams_sum[:, None] + logp  # (R, V)
        V = logits.shape[1]
        flat = cand.ravel()
        # at most k actives plus one eos per beam can be consumed, so the
        # top (k + R) candidates always suffice
        top = min(k + len(beams_tok), flat.size)
        if top < flat.size:
            part = np.argpartition(-flat, top - 1)[:top]
        else:
            part = np.arange(flat.size)
        scores = flat[part]
        finite = np.isfinite(scores)
        part, scores = part[finite], scores[finite]
        order = np.lexsort((part, -scores))  # score desc, flat index asc on ties
        next_tok: list[int] = []
        next_row: list[int] = []
        next_sum: list[float] = []
        next_seq: list[tuple[int, ...]] = []
        for flat_idx, score in zip(part[order], scores[order]):
            r, v = int(flat_idx) // V, int(flat_idx) % V
            seq = beams_tok[r] + (v,)
            if v == EOS_ID:
                finished.append(Hypothesis(seq, float(score), True))
            else:
                next_tok.append(v)
                next_row.append(r)
                next_sum.append(float(score))
                next_seq.append(seq)
                if len(next_tok) >= k:
                    break
        if not next_tok:
            break
        if not normalize and len(finished) >= k:
            # raw sums only decrease with length, so no active beam can
            # still enter the top-k finished list
            best_active = max(next_sum)
            if best_active <= min(h.sum_logprob for h in finished):
                break
        rows = np.array(next_row)
        beams_tok = next_seq
        beams_sum = np.array(next_sum)
        prev_ids = np.array(next_tok, dtype=np.int64)
        H = np.ascontiguousarray(hn[rows])
        FEED = np.ascontiguousarray(ht[rows])

    if finished:
        finished.sort(key=rank, reverse=True)  # stable: insertion order breaks ties
        return finished[:k]
    unfinished = [Hypothesis(seq, float(s), False) for seq, s in zip(beams_tok, beams_sum)]
    unfinished.sort(key=rank, reverse=True)
    return unfinished[:k]


def sample_k(model: Model, x, k: int, max_len: int = 200, seed: int = 0) -> list[Hypothesis]:
    """k independent ancestral samples, reproducible per seed (duplicates kept)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = np.random.default_rng(seed)
    uniforms = rng.random((k, max_len))
    Z = model.encode(x)
    Zt = np.ascontiguousarray(Z.T)
    state0 = model.init_state(Z)
    H = np.repeat(state0.h[None, :], k, axis=0)
    FEED = np.zeros((k, model.dim))
    prev_ids = np.full(k, 1, dtype=np.int64)  # BOS
    tokens: list[list[int]] = [[] for _ in range(k)]
    sums = np.zeros(k)
    alive = np.ones(k, dtype=bool)
    for step in range(max_len):
        if not alive.any():
            break
        logits, hn, ht, _ = model.step_rows(prev_ids, FEED, H, Z, Zt)
        probs = softmax_rows(logits)
        probs[:, PAD_ID] = 0.0
        logp = log_softmax_rows(logits)
        cum = np.cumsum(probs, axis=1)
        for r in range(k):
            if not alive[r]:
                continue
            u = uniforms[r, step] * cum[r, -1]
            v = int(np.searchsorted(cum[r], u, side="right"))
            v = min(v, logits.shape[1] - 1)
            tokens[r].append(v)
            sums[r] += logp[r, v]
            if v == EOS_ID:
                alive[r] = False
            prev_ids[r] = v
        H = hn
        FEED = ht
    return [
        Hypothesis(tuple(t), float(s), bool(t and t[-1] == EOS_ID))
        for t, s in zip(tokens, sums)
    ]


def dedup_hypotheses(hyps: list[Hypothesis]) -> list[Hypothesis]:
    seen = set()
    out = []
    for h in hyps:
        if h.tokens and h.tokens not in seen:
            seen.add(h.tokens)
            out.append(h)
    return out


def make_candidate_set(
    cands: list[ScoredCandidate],
    ref,
    metric: MetricKind | str = MetricKind.BLEU_SENT,
    src_id: int = -1,
    source=None,
) -> CandidateSet:
    """Attach metric scores/costs and pick u* (best metric) and u-hat (best score)."""
    if not cands:
        raise ValueError("empty hypothesis list")
    seen: dict[tuple, int] = {}
    unique: list[ScoredCandidate] = []
    for c in cands:
        if c.tokens not in seen:
            seen[c.tokens] = len(unique)
            unique.append(c)
    ref_stripped = strip_eos(ref)
    scored = []
    for c in unique:
        s = metric_score(ref_stripped, strip_eos(c.tokens), metric)
        scored.append(replace(c, metric_score=s, cost=1.0 - s))
    scores = np.array([c.metric_score for c in scored])
    avg_scores = np.array([c.avg_score for c in scored])
    return CandidateSet(
        src_id=src_id,
        source=np.asarray(ref, dtype=np.int64) if source is None else np.asarray(source, dtype=np.int64),
        candidates=scored,
        pseudo_ref=int(np.argmax(scores)),
        model_best=int(np.argmax(avg_scores)),
    )


def generate_hypotheses(model: Model, x, config: GenerationConfig, seed_offset: int = 0) -> list[Hypothesis]:
    config.validate()
    if config.mode == "beam":
        return beam_search(model, x, config.k, config.max_len, config.normalize)
    return sample_k(model, x, config.k, config.max_len, config.seed + seed_offset)


def candidate_provider(
    config: GenerationConfig,
    model: Model,
    x,
    ref,
    cache: dict[int, list[tuple[int, ...]]] | None = None,
    src_id: int = -1,
    metric: MetricKind | str = MetricKind.BLEU_SENT,
    want_forward: bool = False,
):
    """Produce the candidate set for one source under the current parameters.

    Online: fresh generation then teacher-forced scoring. Offline: the cache
    holds token sequences only; they are re-scored under the current model so
    scores are never stale. With want_forward=True also returns the
    teacher-forced ForwardPass whose rows align with the candidate order.
    """
    if config.online:
        hyps = generate_hypotheses(model, x, config, seed_offset=src_id)
        token_lists = [h.tokens for h in dedup_hypotheses(hyps)]
    else:
        if cache is None or src_id not in cache:
            raise KeyError(f"offline cache miss for source id {src_id}")
        token_lists = [tuple(t) for t in cache[src_id]]
    if not token_lists:
        raise ValueError(f"no candidates for source id {src_id}")
    fwd = model.forward(x, [np.array(t, dtype=np.int64) for t in token_lists])
    cands = [fwd.candidate_for(i) for i in range(len(token_lists))]
    cset = make_candidate_set(cands, ref, metric, src_id=src_id, source=x)
    if want_forward:
        return cset, fwd
    return cset


def build_offline_cache(model: Model, pairs, config: GenerationConfig) -> dict[int, list[tuple[int, ...]]]:
    cache = {}
    for p in pairs:
        hyps = generate_hypotheses(model, p.src, config, seed_offset=p.idx)
        cache[p.idx] = [h.tokens for h in dedup_hypotheses(hyps)]
    return cache


def save_cache(cache: dict[int, list[tuple[int, ...]]], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for src_id in sorted(cache):
            lists = "|".join(" ".join(str(t) for t in toks) for toks in cache[src_id])
            f.write(f"{src_id}\t{lists}\n")


def load_cache(path) -> dict[int, list[tuple[int, ...]]]:
    cache: dict[int, list[tuple[int, ...]]] = {}
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                key, lists = line.split("\t")
                cache[int(key)] = [
                    tuple(int(t) for t in part.split()) for part in lists.split("|") if part.strip()
                ]
            except ValueError as e:
                raise ValueError(f"malformed cache line {line_no}") from e
    return cache
