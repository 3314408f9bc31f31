import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seqlab import objectives as obj
from seqlab.generate import CandidateSet
from seqlab.model import Model, ScoredCandidate


def make_set(a_vals, s_vals, costs):
    """Candidate set with prescribed aggregates; u*/u-hat follow the tie rules."""
    cands = []
    for i, (a, s, c) in enumerate(zip(a_vals, s_vals, costs)):
        cands.append(
            ScoredCandidate(
                tokens=(4 + i, 2),
                tok_scores=np.array([s, s]),
                tok_logprobs=np.array([a, a]),
                avg_score=float(s),
                avg_logprob=float(a),
                metric_score=1.0 - c,
                cost=float(c),
            )
        )
    scores = np.array([c.metric_score for c in cands])
    model_scores = np.array([c.avg_score for c in cands])
    return CandidateSet(0, np.array([4, 2]), cands, int(np.argmax(scores)), int(np.argmax(model_scores)))


class TestTokNLL:
    def test_perfect_model_zero_loss(self):
        logits = np.full((3, 5), -60.0)
        logits[np.arange(3), [1, 2, 3]] = 60.0
        res = obj.tok_nll(logits, np.array([1, 2, 3]))
        assert res.value == pytest.approx(0.0, abs=1e-10)

    def test_two_step_worked_example(self):
        # p(t_1) = 0.5, p(t_2) = 0.25
        logits = np.log(np.array([[0.5, 1 / 6, 1 / 6, 1 / 6], [0.25, 0.25, 0.25, 0.25]]))
        res = obj.tok_nll(logits, np.array([0, 0]))
        assert res.value == pytest.approx(math.log(2) + math.log(4), abs=1e-12)

    def test_gradient_rows_sum_to_zero(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(size=(4, 7))
        res = obj.tok_nll(logits, np.array([1, 2, 3, 4]))
        assert np.allclose(res.d_logits.sum(axis=1), 0.0, atol=1e-12)

    def test_bad_target_id(self):
        with pytest.raises(ValueError, match="out of range"):
            obj.tok_nll(np.zeros((1, 4)), np.array([4]))


class TestTokLS:
    def test_eps_zero_equals_nll(self):
        rng = np.random.default_rng(1)
        logits = rng.normal(size=(5, 6))
        t = np.array([0, 1, 2, 3, 4])
        a = obj.tok_ls(logits, t, 0.0)
        b = obj.tok_nll(logits, t)
        assert a.value == pytest.approx(b.value, abs=1e-12)
        assert np.allclose(a.d_logits, b.d_logits, atol=1e-12)

    def test_smoothed_target_masses(self):
        # V=4, eps=0.1: q(target)=0.9, q(other)=0.025 each (total mass 0.975)
        logits = np.zeros((1, 4))
        res = obj.tok_ls(logits, np.array([2]), 0.1)
        assert res.value == pytest.approx(0.975 * math.log(4), abs=1e-12)

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(2)
        logits = rng.normal(size=(3, 5))
        t = np.array([0, 2, 4])
        res = obj.tok_ls(logits, t, 0.1)
        h = 1e-6
        for i in range(3):
            for v in range(5):
                lp = logits.copy(); lp[i, v] += h
                lm = logits.copy(); lm[i, v] -= h
                fd = (obj.tok_ls(lp, t, 0.1).value - obj.tok_ls(lm, t, 0.1).value) / (2 * h)
                assert res.d_logits[i, v] == pytest.approx(fd, abs=1e-8)


class TestSeqNLL:
    def test_worked_example(self):
        cs = make_set([math.log(3), math.log(1)], [0, 0], [0.0, 1.0])
        res = obj.seq_nll(cs)
        assert res.value == pytest.approx(math.log(4 / 3), abs=1e-12)

    def test_dominant_pseudo_ref_limit(self):
        cs = make_set([50.0, 0.0], [0, 0], [0.0, 1.0])
        assert obj.seq_nll(cs).value == pytest.approx(0.0, abs=1e-12)

    def test_gradient_sums_to_zero(self):
        cs = make_set([0.3, -0.2, 0.7], [0, 0, 0], [0.1, 0.5, 0.9])
        assert obj.seq_nll(cs).d_a.sum() == pytest.approx(0.0, abs=1e-9)

    def test_singleton_rejected(self):
        with pytest.raises(ValueError, match="degenerate partition"):
            obj.seq_nll(make_set([0.0], [0.0], [0.5]))


class TestRisk:
    def test_uniform_weights(self):
        cs = make_set([0.0, 0.0], [0, 0], [0.2, 0.4])
        assert obj.risk(cs).value == pytest.approx(0.3, abs=1e-12)

    def test_worked_example_with_gradients(self):
        cs = make_set([math.log(3), math.log(1)], [0, 0], [0.0, 1.0])
        res = obj.risk(cs)
        assert res.value == pytest.approx(0.25, abs=1e-12)
        assert np.allclose(res.d_a, [-0.1875, 0.1875], atol=1e-12)

    def test_constant_costs(self):
        cs = make_set([0.1, 0.9, -0.4], [0, 0, 0], [0.7, 0.7, 0.7])
        res = obj.risk(cs)
        assert res.value == pytest.approx(0.7, abs=1e-12)
        assert np.allclose(res.d_a, 0.0, atol=1e-12)

    def test_value_within_cost_range(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            n = rng.integers(1, 8)
            cs = make_set(rng.normal(size=n), np.zeros(n), rng.random(n))
            v = obj.risk(cs).value
            costs = cs.costs()
            assert costs.min() - 1e-12 <= v <= costs.max() + 1e-12

    @given(st.lists(st.floats(-3, 3), min_size=2, max_size=8), st.floats(-5, 5))
    @settings(max_examples=60, deadline=None)
    def test_shift_invariance(self, a_vals, shift):
        costs = [(i % 3) / 3 for i in range(len(a_vals))]
        cs1 = make_set(a_vals, np.zeros(len(a_vals)), costs)
        cs2 = make_set([a + shift for a in a_vals], np.zeros(len(a_vals)), costs)
        assert obj.risk(cs1).value == pytest.approx(obj.risk(cs2).value, abs=1e-9)

    def test_cost_shift_leaves_gradient_unchanged(self):
        a = [0.5, -0.1, 0.2]
        cs1 = make_set(a, np.zeros(3), [0.1, 0.4, 0.8])
        cs2 = make_set(a, np.zeros(3), [0.35, 0.65, 1.05])
        r1, r2 = obj.risk(cs1), obj.risk(cs2)
        assert np.allclose(r1.d_a, r2.d_a, atol=1e-12)
        assert r2.value == pytest.approx(r1.value + 0.25, abs=1e-12)


class TestMaxMargin:
    def test_uhat_equals_ustar_is_zero(self):
        cs = make_set([0, 0], [0.9, 0.1], [0.1, 0.8])  # u* = u-hat = 0
        res = obj.max_margin(cs)
        assert res.value == 0.0
        assert np.all(res.d_s == 0)

    def test_worked_example(self):
        cs = make_set([0, 0], [0.5, 0.7], [0.1, 0.4])
        res = obj.max_margin(cs, beta=1.0)
        assert res.value == pytest.approx(0.5, abs=1e-12)
        assert res.d_s.tolist() == [-1.0, 1.0]

    def test_beta_scales_margin(self):
        cs = make_set([0, 0], [0.5, 0.7], [0.1, 0.4])
        assert obj.max_margin(cs, beta=2.0).value == pytest.approx(0.8, abs=1e-12)

    def test_inactive_hinge(self):
        # equal costs and equal scores: the argument is exactly 0 -> inactive
        cs = make_set([0, 0], [0.5, 0.5], [0.3, 0.3])
        res = obj.max_margin(cs)
        assert res.value == 0.0 and np.all(res.d_s == 0)


class TestMultiMargin:
    def test_two_element_equals_maxmargin(self):
        cs = make_set([0, 0], [0.5, 0.7], [0.1, 0.4])
        a = obj.max_margin(cs, beta=1.3)
        b = obj.multi_margin(cs, beta=1.3)
        assert b.value == pytest.approx(a.value, abs=1e-12)

    def test_term_by_term(self):
        # u* = 0; terms: u1: 1*(0.5-0.1) - 0.2 + 0.6 = 0.8; u2: (0.9-0.1) - 0.2 + 0.05 = 0.65
        cs = make_set([0, 0, 0], [0.2, 0.6, 0.05], [0.1, 0.5, 0.9])
        res = obj.multi_margin(cs, beta=1.0)
        assert res.value == pytest.approx(0.8 + 0.65, abs=1e-12)
        assert res.d_s.tolist() == [-2.0, 1.0, 1.0]

    def test_singleton_zero(self):
        assert obj.multi_margin(make_set([0.0], [0.4], [0.2])).value == 0.0


class TestSoftmaxMargin:
    def test_zero_costs_equals_seqnll(self):
        cs = make_set([0.4, -0.3, 0.1], [0, 0, 0], [0.0, 0.0, 0.0])
        # pseudo_ref ties break to index 0 with equal metric scores
        assert obj.softmax_margin(cs).value == pytest.approx(obj.seq_nll(cs).value, abs=1e-12)

    def test_worked_example(self):
        cs = make_set([math.log(3), math.log(1)], [0, 0], [0.0, 1.0])
        res = obj.softmax_margin(cs)
        assert res.value == pytest.approx(math.log((3 + math.e) / 3), abs=1e-12)

    def test_gradient_sums_to_zero(self):
        cs = make_set([0.3, -0.2, 0.7], [0, 0, 0], [0.1, 0.5, 0.9])
        assert obj.softmax_margin(cs).d_a.sum() == pytest.approx(0.0, abs=1e-9)


class TestCombinations:
    def _tok_seq(self):
        rng = np.random.default_rng(4)
        logits = rng.normal(size=(3, 6))
        tok = obj.tok_ls(logits, np.array([1, 2, 3]), 0.1)
        seq = obj.risk(make_set([0.2, -0.1], [0, 0], [0.3, 0.6]))
        return tok, seq

    def test_weighted_alpha_one(self):
        tok, seq = self._tok_seq()
        res = obj.weighted(tok, seq, 1.0)
        assert res.value == pytest.approx(tok.value, abs=1e-12)
        assert np.allclose(res.d_logits, tok.d_logits, atol=1e-12)
        assert np.allclose(res.d_a, 0.0, atol=1e-12)

    def test_weighted_alpha_zero(self):
        tok, seq = self._tok_seq()
        res = obj.weighted(tok, seq, 0.0)
        assert res.value == pytest.approx(seq.value, abs=1e-12)
        assert np.allclose(res.d_a, seq.d_a, atol=1e-12)
        assert np.allclose(res.d_logits, 0.0, atol=1e-12)

    def test_weighted_arithmetic(self):
        tok = obj.LossResult(value=1.0)
        seq = obj.LossResult(value=2.0)
        assert obj.weighted(tok, seq, 0.3).value == pytest.approx(1.7, abs=1e-12)

    def test_constrained_sequence_branch(self):
        tok, seq = self._tok_seq()
        res = obj.constrained(obj.LossResult(value=1.0, d_logits=tok.d_logits), 1.2, seq)
        assert res.info["branch"] == "sequence"
        assert res.value == seq.value

    def test_constrained_token_branch(self):
        tok, seq = self._tok_seq()
        res = obj.constrained(obj.LossResult(value=1.3, d_logits=tok.d_logits), 1.2, seq)
        assert res.info["branch"] == "token"
        assert res.value == 1.3

    def test_constrained_equality_takes_sequence(self):
        tok, seq = self._tok_seq()
        res = obj.constrained(obj.LossResult(value=1.2, d_logits=tok.d_logits), 1.2, seq)
        assert res.info["branch"] == "sequence"

    def test_constrained_missing_baseline(self):
        tok, seq = self._tok_seq()
        with pytest.raises(ValueError, match="baseline"):
            obj.constrained(tok, float("nan"), seq)


class TestReductionIdentities:
    """The 1e-12 identities, on model-derived candidate sets."""

    def _model_set(self, seed=5):
        from seqlab.generate import make_candidate_set

        m = Model(9, 6, seed=seed)
        x = np.array([4, 5, 6, 2], dtype=np.int64)
        seqs = [np.array([5, 4, 2]), np.array([6, 6, 8, 2]), np.array([4, 5, 6, 2])]
        fwd = m.forward(x, seqs)
        cands = [fwd.candidate_for(i) for i in range(3)]
        return make_candidate_set(cands, x, "bleu_sent")

    def test_softmax_margin_reduces_to_seqnll(self):
        import dataclasses

        cset = self._model_set()
        zeroed = dataclasses.replace(
            cset, candidates=[dataclasses.replace(c, cost=0.0) for c in cset.candidates]
        )
        assert obj.softmax_margin(zeroed).value == pytest.approx(obj.seq_nll(zeroed).value, abs=1e-12)

    def test_multimargin_reduces_to_maxmargin_on_pair(self):
        cset = self._model_set()
        pair = [cset.candidates[cset.model_best], cset.candidates[cset.pseudo_ref]]
        scores = np.array([c.metric_score for c in pair])
        model_scores = np.array([c.avg_score for c in pair])
        sub = CandidateSet(0, cset.source, pair, int(np.argmax(scores)), int(np.argmax(model_scores)))
        assert obj.multi_margin(sub, 1.0).value == pytest.approx(obj.max_margin(sub, 1.0).value, abs=1e-12)
