"""Minimal attentional encoder-decoder with exact reverse-mode gradients.

Single-layer GRU encoder, single-layer GRU decoder with dot-product attention
and input feeding, tied to nothing: the model exposes a generic scoring
interface (encode / decoder_step / score_sequence / forward / backward) so the
sequence losses never look inside. All math is float64.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .corpus import BOS_ID, EOS_ID, PAD_ID

PARAM_NAMES = (
    "src_emb",
    "tgt_emb",
    "enc_w_ih",
    "enc_w_hh",
    "enc_b_ih",
    "enc_b_hh",
    "dec_w_ih",
    "dec_w_hh",
    "dec_b_ih",
    "dec_b_hh",
    "comb_w",
    "comb_b",
    "out_w",
    "out_b",
)


def init_params(vocab_size: int, dim: int, seed: int = 0) -> dict[str, np.ndarray]:
    """Uniform(-1/sqrt(d)) weights, zero biases, in a fixed-order dict."""
    rng = np.random.default_rng(seed)
    d = dim
    s = 1.0 / np.sqrt(d)

    def u(*shape):
        return rng.uniform(-s, s, size=shape)

    return {
        "src_emb": u(vocab_size, d),
        "tgt_emb": u(vocab_size, d),
        "enc_w_ih": u(d, 3 * d),
        "enc_w_hh": u(d, 3 * d),
        "enc_b_ih": np.zeros(3 * d),
        "enc_b_hh": np.zeros(3 * d),
        "dec_w_ih": u(2 * d, 3 * d),
        "dec_w_hh": u(d, 3 * d),
        "dec_b_ih": np.zeros(3 * d),
        "dec_b_hh": np.zeros(3 * d),
        "comb_w": u(2 * d, d),
        "comb_b": np.zeros(d),
        "out_w": u(d, vocab_size),
        "out_b": np.zeros(vocab_size),
    }


def zero_grads(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.items()}


def grads_add_(dst: dict, src: dict, scale: float = 1.0) -> dict:
    for k in dst:
        dst[k] += scale * src[k]
    return dst


def grads_scale_(grads: dict, scale: float) -> dict:
    for k in grads:
        grads[k] *= scale
    return grads


def global_norm(grads: dict) -> float:
    total = 0.0
    for v in grads.values():
        total += float(np.sum(v * v))
    return float(np.sqrt(total))


def log_softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Stable log-softmax over the last axis."""
    mx = logits.max(axis=-1, keepdims=True)
    z = logits - mx
    lse = np.log(np.sum(np.exp(z), axis=-1, keepdims=True))
    return z - lse


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    mx = logits.max(axis=-1, keepdims=True)
    ex = np.exp(logits - mx)
    return ex / ex.sum(axis=-1, keepdims=True)


@dataclass
class ScoredCandidate:
    """One hypothesis with its per-token and aggregate model quantities.

    tokens is EOS-terminated when finished; avg_score is the mean selected
    unnormalized logit s(u|x), avg_logprob the mean token log-probability
    a(u|x). metric_score/cost are attached by the candidate-set builder.
    """

    tokens: tuple[int, ...]
    tok_scores: np.ndarray
    tok_logprobs: np.ndarray
    avg_score: float
    avg_logprob: float
    metric_score: float | None = None
    cost: float | None = None
    finished: bool = True

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass
class DecoderState:
    h: np.ndarray
    feed: np.ndarray
    attn: np.ndarray | None = None


@dataclass
class ForwardPass:
    """Caches from one teacher-forced forward over R sequences of one source."""

    x: np.ndarray
    seqs: list[np.ndarray]
    lens: np.ndarray
    prev_ids: np.ndarray  # (T, R) decoder inputs
    src_emb_rows: np.ndarray
    enc_caches: tuple
    Z: np.ndarray
    Zt: np.ndarray
    logits: np.ndarray  # (T, R, V)
    dec_caches: tuple
    _logprobs: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_seqs(self) -> int:
        return len(self.seqs)

    def logits_for(self, k: int) -> np.ndarray:
        return self.logits[: self.lens[k], k, :]

    def logprobs_full(self) -> np.ndarray:
        if self._logprobs is None:
            self._logprobs = log_softmax_rows(self.logits)
        return self._logprobs

    def tok_scores_for(self, k: int) -> np.ndarray:
        n = self.lens[k]
        return self.logits[np.arange(n), k, self.seqs[k]]

    def tok_logprobs_for(self, k: int) -> np.ndarray:
        n = self.lens[k]
        return self.logprobs_full()[np.arange(n), k, self.seqs[k]]

    def candidate_for(self, k: int) -> ScoredCandidate:
        u = self.seqs[k]
        ts = self.tok_scores_for(k)
        tl = self.tok_logprobs_for(k)
        return ScoredCandidate(
            tokens=tuple(int(i) for i in u),
            tok_scores=ts,
            tok_logprobs=tl,
            avg_score=float(ts.mean()),
            avg_logprob=float(tl.mean()),
            finished=int(u[-1]) == EOS_ID,
        )


class Model:
    """Parameter container plus the forward/backward entry points."""

    def __init__(
        self,
        vocab_size: int,
        dim: int,
        seed: int = 0,
        max_len: int = 200,
        params: dict[str, np.ndarray] | None = None,
    ):
        self.vocab_size = vocab_size
        self.dim = dim
        self.max_len = max_len
        self.params = params if params is not None else init_params(vocab_size, dim, seed)
        for name in PARAM_NAMES:
            if name not in self.params:
                raise ValueError(f"missing parameter {name}")

    def copy(self) -> "Model":
        return Model(
            self.vocab_size,
            self.dim,
            max_len=self.max_len,
            params={k: v.copy() for k, v in self.params.items()},
        )

    # -- encoding ----------------------------------------------------------

    def _check_ids(self, ids: np.ndarray, what: str) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size == 0:
            raise ValueError(f"empty {what}")
        if ids.min() < 0 or ids.max() >= self.vocab_size:
            raise ValueError(f"invalid id in {what}: ids must be in [0, {self.vocab_size})")
        return ids

    def _encode_with_cache(self, x: np.ndarray):
        p = self.params
        emb = p["src_emb"][x]
        h0 = np.zeros(self.dim)
        caches = kernels.gru_forward(emb, h0, p["enc_w_ih"], p["enc_w_hh"], p["enc_b_ih"], p["enc_b_hh"])
        return emb, caches

    def encode(self, x) -> np.ndarray:
        """Encoder states z_1..z_m for an id sequence; deterministic."""
        x = self._check_ids(x, "source")
        _, caches = self._encode_with_cache(x)
        return caches[0]

    def init_state(self, Z: np.ndarray) -> DecoderState:
        return DecoderState(h=Z[-1].copy(), feed=np.zeros(self.dim))

    def decoder_step(self, state: DecoderState, prev_id: int, Z: np.ndarray):
        """One decoder step; returns (logits over V, next state with attention)."""
        p = self.params
        g = p["tgt_emb"][np.array([prev_id], dtype=np.int64)]
        Zt = np.ascontiguousarray(Z.T)
        logits, hn, ht, a = kernels.dec_step_rows(
            g,
            state.feed[None, :],
            state.h[None, :],
            Z,
            Zt,
            p["dec_w_ih"],
            p["dec_w_hh"],
            p["dec_b_ih"],
            p["dec_b_hh"],
            p["comb_w"],
            p["comb_b"],
            p["out_w"],
            p["out_b"],
        )
        return logits[0], DecoderState(h=hn[0], feed=ht[0], attn=a[0])

    def step_rows(self, prev_ids: np.ndarray, feed: np.ndarray, h: np.ndarray, Z: np.ndarray, Zt: np.ndarray):
        """Batched decoder step used by beam search and sampling."""
        p = self.params
        g = p["tgt_emb"][prev_ids]
        return kernels.dec_step_rows(
            g,
            feed,
            h,
            Z,
            Zt,
            p["dec_w_ih"],
            p["dec_w_hh"],
            p["dec_b_ih"],
            p["dec_b_hh"],
            p["comb_w"],
            p["comb_b"],
            p["out_w"],
            p["out_b"],
        )

    # -- teacher-forced scoring ---------------------------------------------

    def forward(self, x, seqs) -> ForwardPass:
        """Teacher-forced pass over several target-side sequences of one source."""
        x = self._check_ids(x, "source")
        seqs = [self._check_ids(u, "sequence") for u in seqs]
        if not seqs:
            raise ValueError("no sequences to score")
        lens = np.array([len(u) for u in seqs], dtype=np.int64)
        if lens.max() > self.max_len:
            raise ValueError(f"sequence longer than max_len={self.max_len}")
        T = int(lens.max())
        Rn = len(seqs)
        prev = np.full((T, Rn), PAD_ID, dtype=np.int64)
        for k, u in enumerate(seqs):
            prev[0, k] = BOS_ID
            prev[1 : lens[k], k] = u[:-1]
        emb, enc_caches = self._encode_with_cache(x)
        Z = enc_caches[0]
        Zt = np.ascontiguousarray(Z.T)
        h0 = Z[-1]
        p = self.params
        dec = kernels.dec_forward_rows(
            prev,
            p["tgt_emb"],
            Z,
            Zt,
            h0,
            p["dec_w_ih"],
            p["dec_w_hh"],
            p["dec_b_ih"],
            p["dec_b_hh"],
            p["comb_w"],
            p["comb_b"],
            p["out_w"],
            p["out_b"],
        )
        return ForwardPass(
            x=x,
            seqs=seqs,
            lens=lens,
            prev_ids=prev,
            src_emb_rows=emb,
            enc_caches=enc_caches,
            Z=Z,
            Zt=Zt,
            logits=dec[0],
            dec_caches=dec[1:],
        )

    def score_sequence(self, x, u) -> ScoredCandidate:
        """Teacher-forced scoring of one sequence (values only)."""
        fwd = self.forward(x, [u])
        return fwd.candidate_for(0)

    # -- reverse mode --------------------------------------------------------

    def backward(self, fwd: ForwardPass, d_logits: list[np.ndarray]) -> dict[str, np.ndarray]:
        """Exact gradients of sum_k <d_logits[k], logits_k> w.r.t. parameters.

        d_logits[k] has shape (len(seqs[k]), V); zero coefficients give zero
        gradients, and the map is linear in the coefficients.
        """
        T, Rn, V = fwd.logits.shape
        if len(d_logits) != Rn:
            raise ValueError("one coefficient array per scored sequence required")
        dLOG = np.zeros((T, Rn, V))
        for k, dl in enumerate(d_logits):
            if dl.shape != (fwd.lens[k], V):
                raise ValueError(f"coefficient shape mismatch for sequence {k}")
            dLOG[: fwd.lens[k], k, :] = dl
        p = self.params
        XIN, HPREV, H, RG, ZG, NN, GHN, A, C, HT = fwd.dec_caches
        dG, dZ, dh0, dGI, dGH, dAC = kernels.dec_backward_rows(
            fwd.Z,
            fwd.Zt,
            XIN,
            HPREV,
            H,
            RG,
            ZG,
            NN,
            GHN,
            A,
            C,
            HT,
            p["dec_w_ih"],
            p["dec_w_hh"],
            p["comb_w"],
            p["out_w"],
            dLOG,
        )
        d = self.dim
        TR = T * Rn
        grads = {}
        xin_f = XIN.reshape(TR, 2 * d)
        dgi_f = dGI.reshape(TR, 3 * d)
        dgh_f = dGH.reshape(TR, 3 * d)
        dac_f = dAC.reshape(TR, d)
        dlog_f = dLOG.reshape(TR, V)
        grads["dec_w_ih"] = xin_f.T @ dgi_f
        grads["dec_w_hh"] = HPREV.reshape(TR, d).T @ dgh_f
        grads["dec_b_ih"] = dgi_f.sum(axis=0)
        grads["dec_b_hh"] = dgh_f.sum(axis=0)
        hc_f = np.concatenate((H, C), axis=2).reshape(TR, 2 * d)
        grads["comb_w"] = hc_f.T @ dac_f
        grads["comb_b"] = dac_f.sum(axis=0)
        grads["out_w"] = HT.reshape(TR, d).T @ dlog_f
        grads["out_b"] = dlog_f.sum(axis=0)
        grads["tgt_emb"] = np.zeros_like(p["tgt_emb"])
        np.add.at(grads["tgt_emb"], fwd.prev_ids.ravel(), dG.reshape(TR, d))
        # encoder: attention feeds every z_j, the decoder start state feeds z_m
        dZ = dZ.copy()
        dZ[-1] += dh0
        He, Re, ZGe, NNe, GHNe = fwd.enc_caches
        h0e = np.zeros(d)
        dXe, dGIe, dGHe, _ = kernels.gru_backward(
            fwd.src_emb_rows,
            h0e,
            He,
            Re,
            ZGe,
            NNe,
            GHNe,
            p["enc_w_ih"],
            p["enc_w_hh"],
            dZ,
            np.zeros(d),
        )
        hprev_e = np.vstack((h0e[None, :], He[:-1]))
        grads["enc_w_ih"] = fwd.src_emb_rows.T @ dGIe
        grads["enc_w_hh"] = hprev_e.T @ dGHe
        grads["enc_b_ih"] = dGIe.sum(axis=0)
        grads["enc_b_hh"] = dGHe.sum(axis=0)
        grads["src_emb"] = np.zeros_like(p["src_emb"])
        np.add.at(grads["src_emb"], fwd.x, dXe)
        return {k: grads[k] for k in PARAM_NAMES}


def grad_check(
    model: Model,
    loss_fn,
    n_entries: int = 200,
    step: float = 1e-5,
    seed: int = 0,
    min_grad: float = 1e-6,
) -> float:
    """Compare analytic gradients against central finite differences.

    loss_fn(model, want_grads) must return (value, grads-or-None) and be a
    deterministic function of the parameters. Perturbs a random subsample of
    parameter entries and returns the max relative error
    |g_a - g_n| / max(1e-8, |g_a| + |g_n|).

    The subsample is drawn from entries where the double-precision central
    difference is an informative oracle: analytic gradient exactly zero, or
    magnitude >= min_grad * max(1, |loss|). Below that band the ~1e-10
    roundoff floor of (f(x+h) - f(x-h)) / 2h dominates the quotient even for
    a perfectly correct gradient. Entries that are exactly zero stay eligible
    so missing-term bugs remain visible to the check.
    """
    value, grads = loss_fn(model, True)
    if not np.isfinite(value):
        raise ValueError("non-finite loss")
    rng = np.random.default_rng(seed)
    sizes = np.array([model.params[n].size for n in PARAM_NAMES])
    total = int(sizes.sum())
    flat_grads = np.concatenate([grads[n].ravel() for n in PARAM_NAMES])
    tau = min_grad * max(1.0, abs(value))
    eligible = np.flatnonzero((flat_grads == 0.0) | (np.abs(flat_grads) >= tau))
    if eligible.size == 0:
        eligible = np.arange(total)
    n_entries = min(n_entries, eligible.size)
    picks = eligible[rng.choice(eligible.size, size=n_entries, replace=False)]
    bounds = np.cumsum(sizes)
    worst = 0.0
    for flat in picks:
        ti = int(np.searchsorted(bounds, flat, side="right"))
        off = int(flat - (bounds[ti - 1] if ti > 0 else 0))
        arr = model.params[PARAM_NAMES[ti]]
        orig = arr.flat[off]
        arr.flat[off] = orig + step
        vp = loss_fn(model, False)[0]
        arr.flat[off] = orig - step
        vm = loss_fn(model, False)[0]
        arr.flat[off] = orig
        g_num = (vp - vm) / (2.0 * step)
        g_ana = grads[PARAM_NAMES[ti]].flat[off]
        rel = abs(g_ana - g_num) / max(1e-8, abs(g_ana) + abs(g_num))
        if rel > worst:
            worst = rel
    return worst
