import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seqlab.corpus import (
    EOS_ID,
    UNK_ID,
    SentencePair,
    Vocab,
    batch_by_tokens,
    build_vocab,
    decode_ids,
    encode_line,
    gen_synthetic,
    load_parallel,
    split_pairs,
    write_corpus,
)


def test_build_vocab_frequency_order():
    v = build_vocab(["a b", "a c"], max_size=8)
    assert v.tokens == ("<pad>", "<bos>", "<eos>", "<unk>", "a", "b", "c")
    assert [v.id_of(t) for t in "abc"] == [4, 5, 6]


def test_build_vocab_truncates():
    v = build_vocab(["a a a"], max_size=5)
    assert v.tokens == ("<pad>", "<bos>", "<eos>", "<unk>", "a")


def test_build_vocab_tie_first_occurrence():
    # all counts 1: x and y kept, z falls off the size budget
    v = build_vocab(["x y z"], max_size=6)
    assert v.tokens[4:] == ("x", "y")
    assert v.id_of("z") == UNK_ID


def test_build_vocab_empty_corpus():
    with pytest.raises(ValueError, match="empty corpus"):
        build_vocab([], max_size=10)
    with pytest.raises(ValueError, match="empty corpus"):
        build_vocab(["   ", ""], max_size=10)


def test_encode_appends_eos():
    v = build_vocab(["a b"], max_size=8)
    ids = encode_line(v, "a b")
    assert ids.tolist() == [v.id_of("a"), v.id_of("b"), EOS_ID]


def test_encode_decode_round_trip():
    v = build_vocab(["a b c d"], max_size=10)
    assert decode_ids(v, encode_line(v, "a b")) == "a b"


def test_oov_maps_to_unk():
    v = build_vocab(["a b"], max_size=8)
    ids = encode_line(v, "a q")
    assert ids.tolist() == [v.id_of("a"), UNK_ID, EOS_ID]


def test_decode_invalid_id():
    v = build_vocab(["a"], max_size=5)
    with pytest.raises(ValueError, match="invalid id"):
        decode_ids(v, [v.size])


@given(st.lists(st.sampled_from("abcdef"), min_size=1, max_size=20))
@settings(max_examples=50, deadline=None)
def test_round_trip_property(tokens):
    v = build_vocab(["a b c d e f"], max_size=12)
    text = " ".join(tokens)
    assert decode_ids(v, encode_line(v, text)) == text


VOCAB = Vocab([f"w{i}" for i in range(12)])


def test_copy_task():
    pairs = gen_synthetic("copy", 50, (2, 6), VOCAB, seed=4)
    assert all(np.array_equal(p.src, p.tgt) for p in pairs)


def test_reverse_task():
    pairs = gen_synthetic("reverse", 50, (2, 6), VOCAB, seed=4)
    for p in pairs:
        assert np.array_equal(p.tgt[:-1], p.src[:-1][::-1])
        assert p.tgt[-1] == EOS_ID


def test_noisy_copy_substitution_rate():
    pairs = gen_synthetic("noisy_copy", 10000, (4, 10), VOCAB, seed=9, p_sub=0.1)
    subs = total = 0
    for p in pairs:
        subs += int(np.sum(p.src[:-1] != p.tgt[:-1]))
        total += len(p.tgt) - 1
    rate = subs / total
    assert 0.08 <= rate <= 0.12
    # substituted tokens are always different real tokens
    for p in pairs[:200]:
        diff = p.src[:-1] != p.tgt[:-1]
        assert np.all(p.src[:-1][diff] >= 4)


def test_synthetic_deterministic():
    a = gen_synthetic("noisy_copy", 30, (2, 8), VOCAB, seed=7, p_sub=0.2)
    b = gen_synthetic("noisy_copy", 30, (2, 8), VOCAB, seed=7, p_sub=0.2)
    assert all(np.array_equal(x.src, y.src) and np.array_equal(x.tgt, y.tgt) for x, y in zip(a, b))


def test_synthetic_degenerate_vocab():
    with pytest.raises(ValueError, match="degenerate"):
        gen_synthetic("copy", 5, (2, 4), Vocab(["only"]), seed=0)


def _pairs_of_target_lengths(lengths):
    out = []
    for i, n in enumerate(lengths):
        ids = np.full(n, 4, dtype=np.int64)
        ids[-1] = EOS_ID
        out.append(SentencePair(src=ids.copy(), tgt=ids.copy(), idx=i))
    return out


def test_batch_sizes_simple():
    batches = batch_by_tokens(_pairs_of_target_lengths([4, 4, 4]), max_tokens=8)
    assert sorted(len(b) for b in batches) == [1, 2]


def test_batch_singletons():
    batches = batch_by_tokens(_pairs_of_target_lengths([4, 4]), max_tokens=4)
    assert [len(b) for b in batches] == [1, 1]


def test_batch_overlong_pair():
    with pytest.raises(ValueError, match="idx=0"):
        batch_by_tokens(_pairs_of_target_lengths([9]), max_tokens=8)


@given(st.lists(st.integers(min_value=1, max_value=12), min_size=1, max_size=60), st.integers(0, 2**31))
@settings(max_examples=40, deadline=None)
def test_batching_partitions_corpus(lengths, seed):
    pairs = _pairs_of_target_lengths(lengths)
    batches = batch_by_tokens(pairs, max_tokens=12, rng=np.random.default_rng(seed))
    seen = sorted(p.idx for b in batches for p in b.pairs)
    assert seen == list(range(len(pairs)))
    assert all(b.token_count <= 12 for b in batches)
    assert sum(b.token_count for b in batches) == sum(lengths)


def test_split_is_disjoint_and_complete():
    pairs = gen_synthetic("copy", 100, (2, 5), VOCAB, seed=3)
    tr, va = split_pairs(pairs, 0.1, seed=5)
    assert len(va) == 10
    assert len(tr) + len(va) == 100
    assert {p.idx for p in tr} | {p.idx for p in va} == {p.idx for p in pairs}


def test_corpus_file_round_trip(tmp_path):
    pairs = gen_synthetic("noisy_copy", 25, (2, 6), VOCAB, seed=2, p_sub=0.3)
    write_corpus(pairs, VOCAB, tmp_path / "c.src", tmp_path / "c.tgt")
    VOCAB.save(tmp_path / "vocab.txt")
    v2 = Vocab.load(tmp_path / "vocab.txt")
    assert v2.tokens == VOCAB.tokens
    loaded = load_parallel(tmp_path / "c.src", tmp_path / "c.tgt", v2)
    assert len(loaded) == 25
    for a, b in zip(pairs, loaded):
        assert np.array_equal(a.src, b.src) and np.array_equal(a.tgt, b.tgt)


def test_load_parallel_misaligned(tmp_path):
    (tmp_path / "a.src").write_text("w0 w1\n")
    (tmp_path / "a.tgt").write_text("w0\nw1\n")
    with pytest.raises(ValueError, match="misaligned"):
        load_parallel(tmp_path / "a.src", tmp_path / "a.tgt", VOCAB)
