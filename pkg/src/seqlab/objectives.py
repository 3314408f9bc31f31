"""Token- and sequence-level training objectives with exact gradients.

Sequence losses consume a CandidateSet and return coefficients dL/da(u) (on
the mean token log-probability) and/or dL/ds(u) (on the mean selected logit).
Distribution to per-token logit gradients follows the 1/n mean rule:

    dL/dlogit_i[v] = (dL/da / n) (1{v=u_i} - p_i[v]) + (dL/ds / n) 1{v=u_i}

Token losses return per-step logit gradients directly. All log-sum-exp
computations subtract the max; hinge subgradients treat the kink as inactive.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .generate import CandidateSet
from .model import ForwardPass, softmax_rows

TOKEN_OBJECTIVES = ("toknll", "tokls")
SEQUENCE_OBJECTIVES = ("seqnll", "risk", "maxmargin", "multimargin", "softmaxmargin")
COMBINE_MODES = ("none", "weighted", "constrained", "random")


@dataclass
class LossResult:
    value: float
    d_a: np.ndarray | None = None  # per-candidate dL/d avg_logprob
    d_s: np.ndarray | None = None  # per-candidate dL/d avg_score
    d_logits: np.ndarray | None = None  # (T, V) for token losses
    info: dict = field(default_factory=dict)


def _logsumexp(v: np.ndarray) -> float:
    m = v.max()
    return float(m + np.log(np.sum(np.exp(v - m))))


def _softmax(v: np.ndarray) -> np.ndarray:
    e = np.exp(v - v.max())
    return e / e.sum()


# -- token level -------------------------------------------------------------


def tok_nll(logits: np.ndarray, targets: np.ndarray) -> LossResult:
    """Negative log-likelihood of the reference tokens, summed over steps."""
    targets = np.asarray(targets, dtype=np.int64)
    V = logits.shape[1]
    if targets.size < 1:
        raise ValueError("empty target")
    if targets.min() < 0 or targets.max() >= V:
        raise ValueError("target id out of range")
    p = softmax_rows(logits)
    mx = logits.max(axis=1)
    lse = mx + np.log(np.exp(logits - mx[:, None]).sum(axis=1))
    sel = logits[np.arange(targets.size), targets]
    value = float(np.sum(lse - sel))
    d = p.copy()
    d[np.arange(targets.size), targets] -= 1.0
    return LossResult(value=value, d_logits=d)


def tok_ls(logits: np.ndarray, targets: np.ndarray, eps: float = 0.1) -> LossResult:
    """Label-smoothed cross entropy with the literal rule q(u)=1-eps, q(u')=eps/V.

    The smoothed target mass totals 1 - eps/V (the rule is applied literally,
    not renormalized), so the per-step gradient is mass * softmax - q.
    """
    if not 0.0 <= eps < 1.0:
        raise ValueError("eps must be in [0, 1)")
    targets = np.asarray(targets, dtype=np.int64)
    V = logits.shape[1]
    if targets.min() < 0 or targets.max() >= V:
        raise ValueError("target id out of range")
    n = targets.size
    p = softmax_rows(logits)
    mx = logits.max(axis=1)
    lse = mx + np.log(np.exp(logits - mx[:, None]).sum(axis=1))
    logp = logits - lse[:, None]
    q = np.full((n, V), eps / V)
    q[np.arange(n), targets] = 1.0 - eps
    value = float(-np.sum(q * logp))
    mass = 1.0 - eps + (V - 1) * (eps / V)
    d = mass * p - q
    return LossResult(value=value, d_logits=d)


# -- sequence level ------------------------------------------------------------


def seq_nll(cset: CandidateSet) -> LossResult:
    """-a(u*) + log sum_u exp a(u) over the candidate set."""
    if len(cset) < 2:
        raise ValueError("degenerate partition: need >= 2 candidates")
    a = cset.avg_logprobs()
    w = _softmax(a)
    value = -float(a[cset.pseudo_ref]) + _logsumexp(a)
    d_a = w.copy()
    d_a[cset.pseudo_ref] -= 1.0
    return LossResult(value=value, d_a=d_a)


def risk(cset: CandidateSet) -> LossResult:
    """Expected cost under the renormalized candidate distribution."""
    a = cset.avg_logprobs()
    c = cset.costs()
    w = _softmax(a)
    value = float(np.sum(c * w))
    return LossResult(value=value, d_a=w * (c - value), info={"weights": w})


def max_margin(cset: CandidateSet, beta: float = 1.0) -> LossResult:
    """Cost-scaled hinge between the model-best candidate and u*."""
    if beta <= 0:
        raise ValueError("beta must be > 0")
    s = cset.avg_scores()
    c = cset.costs()
    i_star, i_hat = cset.pseudo_ref, cset.model_best
    arg = beta * (c[i_hat] - c[i_star]) - s[i_star] + s[i_hat]
    d_s = np.zeros_like(s)
    if arg > 0.0 and i_hat != i_star:
        d_s[i_star] -= 1.0
        d_s[i_hat] += 1.0
        return LossResult(value=float(arg), d_s=d_s)
    return LossResult(value=0.0, d_s=d_s)


def multi_margin(cset: CandidateSet, beta: float = 1.0) -> LossResult:
    """Sum of cost-scaled hinges between every candidate and u*."""
    if beta <= 0:
        raise ValueError("beta must be > 0")
    s = cset.avg_scores()
    c = cset.costs()
    i_star = cset.pseudo_ref
    args = beta * (c - c[i_star]) - s[i_star] + s
    active = args > 0.0
    active[i_star] = False  # the u* term is identically zero
    d_s = np.zeros_like(s)
    d_s[active] += 1.0
    d_s[i_star] -= float(active.sum())
    return LossResult(value=float(args[active].sum()), d_s=d_s)


def softmax_margin(cset: CandidateSet) -> LossResult:
    """SeqNLL with cost-augmented scores inside the partition."""
    if len(cset) < 2:
        raise ValueError("degenerate partition: need >= 2 candidates")
    a = cset.avg_logprobs()
    c = cset.costs()
    value = -float(a[cset.pseudo_ref]) + _logsumexp(a + c)
    w = _softmax(a + c)
    d_a = w.copy()
    d_a[cset.pseudo_ref] -= 1.0
    return LossResult(value=value, d_a=d_a)


# -- combinations -------------------------------------------------------------


def weighted(tok: LossResult, seq: LossResult, alpha: float = 0.3) -> LossResult:
    """alpha * token loss + (1 - alpha) * sequence loss, gradients included."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must be in [0, 1]")
    return LossResult(
        value=alpha * tok.value + (1.0 - alpha) * seq.value,
        d_a=None if seq.d_a is None else (1.0 - alpha) * seq.d_a,
        d_s=None if seq.d_s is None else (1.0 - alpha) * seq.d_s,
        d_logits=None if tok.d_logits is None else alpha * tok.d_logits,
        info={"alpha": alpha},
    )


def constrained(tok: LossResult, tok_baseline_value: float, seq: LossResult) -> LossResult:
    """Sequence loss while the token loss is no worse than the frozen baseline."""
    if tok_baseline_value is None or not np.isfinite(tok_baseline_value):
        raise ValueError("missing baseline token loss")
    if tok.value <= tok_baseline_value:
        out = LossResult(value=seq.value, d_a=seq.d_a, d_s=seq.d_s, d_logits=seq.d_logits)
        out.info = {"branch": "sequence"}
    else:
        out = LossResult(value=tok.value, d_a=tok.d_a, d_s=tok.d_s, d_logits=tok.d_logits)
        out.info = {"branch": "token"}
    return out


SEQUENCE_LOSS_FNS = {
    "seqnll": lambda cset, beta: seq_nll(cset),
    "risk": lambda cset, beta: risk(cset),
    "maxmargin": max_margin,
    "multimargin": multi_margin,
    "softmaxmargin": lambda cset, beta: softmax_margin(cset),
}


def sequence_loss(name: str, cset: CandidateSet, beta: float = 1.0) -> LossResult:
    if name not in SEQUENCE_LOSS_FNS:
        raise ValueError(f"unknown sequence objective {name!r}")
    return SEQUENCE_LOSS_FNS[name](cset, beta)


def token_loss(name: str, logits: np.ndarray, targets: np.ndarray, eps: float = 0.1) -> LossResult:
    if name == "toknll":
        return tok_nll(logits, targets)
    if name == "tokls":
        return tok_ls(logits, targets, eps)
    raise ValueError(f"unknown token objective {name!r}")


def candidate_logit_grads(fwd: ForwardPass, d_a: np.ndarray | None, d_s: np.ndarray | None) -> list[np.ndarray]:
    """Distribute aggregate coefficients to per-token logit gradients."""
    out = []
    K = fwd.n_seqs
    za = np.zeros(K) if d_a is None else d_a
    zs = np.zeros(K) if d_s is None else d_s
    for k in range(K):
        n = int(fwd.lens[k])
        V = fwd.logits.shape[2]
        dl = np.zeros((n, V))
        if za[k] != 0.0:
            p = softmax_rows(fwd.logits_for(k))
            dl -= (za[k] / n) * p
            dl[np.arange(n), fwd.seqs[k]] += za[k] / n
        if zs[k] != 0.0:
            dl[np.arange(n), fwd.seqs[k]] += zs[k] / n
        out.append(dl)
    return out
