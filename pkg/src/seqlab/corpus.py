"""Vocabulary, sentence pairs, synthetic transduction tasks, token batching.

Corpus files are UTF-8 with one whitespace-tokenized sentence per line;
parallel corpora are two line-aligned files. A vocab file has one token per
line, line index = id, with the four reserved tokens on the first four lines.
"""

from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")

DEFAULT_MAX_SENT_LEN = 175


class Vocab:
    """Token/id bijection with fixed reserved ids pad=0, bos=1, eos=2, unk=3."""

    def __init__(self, tokens):
        tokens = list(tokens)
        if tokens[:4] != list(RESERVED):
            tokens = list(RESERVED) + tokens
        if len(tokens) != len(set(tokens)):
            raise ValueError("duplicate token in vocabulary")
        if len(tokens) < 5:
            raise ValueError("vocabulary needs at least one real token (V >= 5)")
        self.tokens = tuple(tokens)
        self._index = {t: i for i, t in enumerate(self.tokens)}

    @property
    def size(self) -> int:
        return len(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        return self._index.get(token, UNK_ID)

    def token_of(self, idx: int) -> str:
        if idx < 0 or idx >= len(self.tokens):
            raise ValueError(f"invalid id {idx}")
        return self.tokens[idx]

    def real_ids(self) -> np.ndarray:
        """Ids of non-reserved tokens."""
        return np.arange(4, self.size, dtype=np.int64)

    def digest(self) -> bytes:
        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).digest()

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for t in self.tokens:
                f.write(t + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as f:
            tokens = [line.rstrip("\n") for line in f if line.rstrip("\n")]
        if tokens[:4] != list(RESERVED):
            raise ValueError("vocab file must start with the four reserved tokens")
        return cls(tokens)


def build_vocab(lines, max_size: int) -> Vocab:
    """Keep the most frequent whitespace tokens; ties break by first occurrence."""
    if max_size < 5:
        raise ValueError("max_size must be >= 5")
    counts: Counter = Counter()
    first_seen: dict[str, int] = {}
    n_tok = 0
    for line in lines:
        for tok in line.split():
            counts[tok] += 1
            if tok not in first_seen:
                first_seen[tok] = n_tok
            n_tok += 1
    if not counts:
        raise ValueError("empty corpus")
    ranked = sorted(counts, key=lambda t: (-counts[t], first_seen[t]))
    return Vocab(ranked[: max_size - 4])


def encode_line(vocab: Vocab, text: str) -> np.ndarray:
    """Whitespace-tokenize, map OOV to unk, append eos."""
    ids = [vocab.id_of(t) for t in text.split()]
    ids.append(EOS_ID)
    return np.array(ids, dtype=np.int64)


def decode_ids(vocab: Vocab, ids) -> str:
    """Inverse of encode_line for in-vocabulary text; strips the terminal eos."""
    out = []
    for i in ids:
        i = int(i)
        if i < 0 or i >= vocab.size:
            raise ValueError(f"invalid id {i}")
        if i == EOS_ID:
            break
        out.append(vocab.token_of(i))
    return " ".join(out)


@dataclass
class SentencePair:
    src: np.ndarray  # eos-terminated int64 ids
    tgt: np.ndarray
    idx: int = -1

    def __post_init__(self):
        self.src = np.asarray(self.src, dtype=np.int64)
        self.tgt = np.asarray(self.tgt, dtype=np.int64)
        for name, seq in (("source", self.src), ("target", self.tgt)):
            if seq.size == 0:
                raise ValueError(f"empty {name}")
            if seq[-1] != EOS_ID:
                raise ValueError(f"{name} must be eos-terminated")
            if np.any(seq[:-1] == PAD_ID):
                raise ValueError(f"interior pad in {name}")


@dataclass
class Batch:
    pairs: list[SentencePair]
    token_count: int = 0

    def __post_init__(self):
        if not self.pairs:
            raise ValueError("empty batch")
        if not self.token_count:
            self.token_count = sum(len(p.tgt) for p in self.pairs)

    def __len__(self) -> int:
        return len(self.pairs)


def gen_synthetic(
    task: str,
    count: int,
    len_range: tuple[int, int],
    vocab: Vocab,
    seed: int,
    p_sub: float = 0.0,
    max_len: int = DEFAULT_MAX_SENT_LEN,
) -> list[SentencePair]:
    """Deterministic synthetic transduction pairs over the real tokens.

    copy: target == source. reverse: target is the reversed source.
    noisy_copy: the target is a clean random sequence and the source is that
    sequence with each token independently substituted (by a different real
    token) with probability p_sub.
    """
    if task not in ("copy", "reverse", "noisy_copy"):
        raise ValueError(f"unknown task {task!r}")
    if not 0.0 <= p_sub < 1.0:
        raise ValueError("p_sub must be in [0, 1)")
    if vocab.size <= 5:
        raise ValueError("degenerate vocab: need more than one real token")
    lo, hi = len_range
    if lo < 1 or hi < lo or hi > max_len:
        raise ValueError(f"bad length range {len_range}")
    rng = np.random.default_rng(seed)
    real = vocab.real_ids()
    pairs = []
    for i in range(count):
        n = int(rng.integers(lo, hi + 1))
        clean = rng.choice(real, size=n)
        if task == "copy":
            src, tgt = clean, clean
        elif task == "reverse":
            src, tgt = clean, clean[::-1]
        else:
            src = clean.copy()
            hit = rng.random(n) < p_sub
            # substitute with a uniformly random *different* real token
            shift = rng.integers(1, real.size, size=n)
            subs = real[(np.searchsorted(real, clean) + shift) % real.size]
            src[hit] = subs[hit]
            tgt = clean
        pairs.append(
            SentencePair(
                src=np.concatenate((src, [EOS_ID])),
                tgt=np.concatenate((tgt, [EOS_ID])),
                idx=i,
            )
        )
    return pairs


def batch_by_tokens(
    pairs: list[SentencePair],
    max_tokens: int,
    rng: np.random.Generator | None = None,
) -> list[Batch]:
    """Greedy partition keeping per-batch target tokens <= max_tokens.

    Pass an rng to shuffle pair order first (epoch shuffling); every pair
    appears in exactly one batch either way.
    """
    order = list(range(len(pairs)))
    if rng is not None:
        rng.shuffle(order)
    batches: list[Batch] = []
    cur: list[SentencePair] = []
    cur_tokens = 0
    for i in order:
        p = pairs[i]
        n = len(p.tgt)
        if n > max_tokens:
            raise ValueError(f"pair idx={p.idx} alone exceeds max_tokens ({n} > {max_tokens})")
        if cur and cur_tokens + n > max_tokens:
            batches.append(Batch(cur, cur_tokens))
            cur, cur_tokens = [], 0
        cur.append(p)
        cur_tokens += n
    if cur:
        batches.append(Batch(cur, cur_tokens))
    return batches


def split_pairs(
    pairs: list[SentencePair], valid_fraction: float, seed: int
) -> tuple[list[SentencePair], list[SentencePair]]:
    """Deterministic train/valid split by seed."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(pairs))
    n_valid = max(1, int(round(len(pairs) * valid_fraction))) if valid_fraction > 0 else 0
    valid_idx = set(int(i) for i in order[:n_valid])
    train = [p for i, p in enumerate(pairs) if i not in valid_idx]
    valid = [p for i, p in enumerate(pairs) if i in valid_idx]
    return train, valid


def write_corpus(pairs: list[SentencePair], vocab: Vocab, src_path, tgt_path) -> None:
    with open(src_path, "w", encoding="utf-8") as fs, open(tgt_path, "w", encoding="utf-8") as ft:
        for p in pairs:
            fs.write(decode_ids(vocab, p.src) + "\n")
            ft.write(decode_ids(vocab, p.tgt) + "\n")


def load_parallel(src_path, tgt_path, vocab: Vocab, max_len: int = DEFAULT_MAX_SENT_LEN) -> list[SentencePair]:
    with open(src_path, encoding="utf-8") as f:
        src_lines = f.read().splitlines()
    with open(tgt_path, encoding="utf-8") as f:
        tgt_lines = f.read().splitlines()
    if len(src_lines) != len(tgt_lines):
        raise ValueError(
            f"parallel corpus misaligned: {len(src_lines)} source vs {len(tgt_lines)} target lines"
        )
    pairs = []
    for i, (s, t) in enumerate(zip(src_lines, tgt_lines)):
        src = encode_line(vocab, s)
        tgt = encode_line(vocab, t)
        if len(src) - 1 > max_len or len(tgt) - 1 > max_len:
            continue  # length filter, mirroring the configured cap
        if len(src) == 1 or len(tgt) == 1:
            continue  # skip empty lines
        pairs.append(SentencePair(src=src, tgt=tgt, idx=i))
    return pairs
