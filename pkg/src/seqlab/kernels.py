"""Numeric kernels: recurrent cells, attention decoding, n-gram statistics.

Everything here is written in nopython-compatible vectorized numpy and gets
jitted through `_accel.maybe_jit`. The interpreted functions are the reference
semantics; the jitted versions compute the same values.

Layout conventions:
  * weights are stored input-dim x output-dim, so forward maps are `x @ W + b`
    and input gradients are `W @ dy` (no transposes of parameter arrays);
  * kernels that advance R sequences in lockstep use arrays shaped (T, R, ...)
    so every per-step slice is C-contiguous;
  * GRU gates are packed reset|update|candidate along the last axis.

GRU cell, with x the step input and h the previous state:
    r = sigmoid((x W_ih + b_ih)[r] + (h W_hh + b_hh)[r])
    z = sigmoid((x W_ih + b_ih)[z] + (h W_hh + b_hh)[z])
    n = tanh((x W_ih + b_ih)[n] + r * (h W_hh + b_hh)[n])
    h' = (1 - z) * n + z * h

Decoder step i (input feeding): the step input is [emb(prev token); ht_{i-1}]
where ht is the attentional hidden state tanh(W_c [h; c] + b_c), c the
dot-product attention context over encoder states, and logits = ht W_o + b_o.
"""

import numpy as np

from ._accel import maybe_jit


@maybe_jit
def _sigmoid(x):
    # stable in both tails
    return np.where(x >= 0.0, 1.0 / (1.0 + np.exp(-x)), np.exp(x) / (1.0 + np.exp(x)))


@maybe_jit
def gru_forward(xemb, h0, w_ih, w_hh, b_ih, b_hh):
    """Run a GRU over one sequence of input vectors.

    xemb: (T, din); h0: (d,). Returns per-step states H (T, d) plus the gate
    activations needed by gru_backward: reset R, update ZG, candidate NN and
    the hidden-side candidate preactivation GHN.
    """
    T = xemb.shape[0]
    d = w_hh.shape[0]
    H = np.empty((T, d))
    R = np.empty((T, d))
    ZG = np.empty((T, d))
    NN = np.empty((T, d))
    GHN = np.empty((T, d))
    h = h0.copy()
    gi_all = np.dot(xemb, w_ih) + b_ih
    for t in range(T):
        gh = np.dot(h, w_hh) + b_hh
        r = _sigmoid(gi_all[t, :d] + gh[:d])
        zg = _sigmoid(gi_all[t, d : 2 * d] + gh[d : 2 * d])
        ghn = gh[2 * d :]
        nn = np.tanh(gi_all[t, 2 * d :] + r * ghn)
        h = (1.0 - zg) * nn + zg * h
        H[t] = h
        R[t] = r
        ZG[t] = zg
        NN[t] = nn
        GHN[t] = ghn.copy()
    return H, R, ZG, NN, GHN


@maybe_jit
def gru_backward(xemb, h0, H, R, ZG, NN, GHN, w_ih, w_hh, dH, dh_last):
    """Reverse-mode pass matching gru_forward.

    dH holds per-step upstream gradients into each h_t; dh_last is an extra
    gradient into the final state. Returns input gradients dX plus per-step
    gate-preactivation gradients dGI/dGH (weight gradients are the caller's
    GEMMs xemb^T dGI and Hprev^T dGH) and dh0.
    """
    T = xemb.shape[0]
    d = w_hh.shape[0]
    dX = np.empty_like(xemb)
    dGI = np.empty((T, 3 * d))
    dGH = np.empty((T, 3 * d))
    dh = dh_last.copy()
    for t in range(T - 1, -1, -1):
        dh = dh + dH[t]
        if t > 0:
            h_prev = H[t - 1]
        else:
            h_prev = h0
        dn = dh * (1.0 - ZG[t])
        dhp = dh * ZG[t]
        dz = dh * (h_prev - NN[t])
        dan = dn * (1.0 - NN[t] * NN[t])
        dr = dan * GHN[t]
        dghn = dan * R[t]
        dar = dr * R[t] * (1.0 - R[t])
        daz = dz * ZG[t] * (1.0 - ZG[t])
        dgi = np.empty(3 * d)
        dgh = np.empty(3 * d)
        dgi[:d] = dar
        dgi[d : 2 * d] = daz
        dgi[2 * d :] = dan
        dgh[:d] = dar
        dgh[d : 2 * d] = daz
        dgh[2 * d :] = dghn
        dGI[t] = dgi
        dGH[t] = dgh
        dX[t] = np.dot(w_ih, dgi)
        dh = dhp + np.dot(w_hh, dgh)
    return dX, dGI, dGH, dh


@maybe_jit
def dec_forward_rows(
    prev_ids,
    tgt_emb,
    Z,
    Zt,
    h0,
    w_ih,
    w_hh,
    b_ih,
    b_hh,
    comb_w,
    comb_b,
    out_w,
    out_b,
):
    """Teacher-forced decoder over R sequences sharing one source.

    prev_ids: (T, R) int64 decoder inputs (BOS-shifted, padded rows are
    harmless garbage masked later through zero upstream gradients).
    Z: (m, d) encoder states, Zt its contiguous transpose, h0: (d,) the
    shared initial state. Returns logits and every cache backward needs.
    """
    T, Rn = prev_ids.shape
    m, d = Z.shape
    V = out_b.shape[0]
    LOGITS = np.empty((T, Rn, V))
    XIN = np.empty((T, Rn, 2 * d))
    HPREV = np.empty((T, Rn, d))
    H = np.empty((T, Rn, d))
    RG = np.empty((T, Rn, d))
    ZG = np.empty((T, Rn, d))
    NN = np.empty((T, Rn, d))
    GHN = np.empty((T, Rn, d))
    A = np.empty((T, Rn, m))
    C = np.empty((T, Rn, d))
    HT = np.empty((T, Rn, d))

    h = np.empty((Rn, d))
    for r in range(Rn):
        h[r] = h0
    feed = np.zeros((Rn, d))
    for t in range(T):
        g = tgt_emb[prev_ids[t]]
        xin = np.empty((Rn, 2 * d))
        xin[:, :d] = g
        xin[:, d:] = feed
        XIN[t] = xin
        HPREV[t] = h
        gi = np.dot(xin, w_ih) + b_ih
        gh = np.dot(h, w_hh) + b_hh
        rg = _sigmoid(gi[:, :d] + gh[:, :d])
        zg = _sigmoid(gi[:, d : 2 * d] + gh[:, d : 2 * d])
        ghn = gh[:, 2 * d :]
        nn = np.tanh(gi[:, 2 * d :] + rg * ghn)
        h = (1.0 - zg) * nn + zg * h
        e = np.dot(h, Zt)
        a = np.empty((Rn, m))
        for r in range(Rn):
            row = e[r] - np.max(e[r])
            ex = np.exp(row)
            a[r] = ex / np.sum(ex)
        c = np.dot(a, Z)
        hc = np.empty((Rn, 2 * d))
        hc[:, :d] = h
        hc[:, d:] = c
        ht = np.tanh(np.dot(hc, comb_w) + comb_b)
        LOGITS[t] = np.dot(ht, out_w) + out_b
        H[t] = h
        RG[t] = rg
        ZG[t] = zg
        NN[t] = nn
        GHN[t] = np.ascontiguousarray(ghn)
        A[t] = a
        C[t] = c
        HT[t] = ht
        feed = ht
    return LOGITS, XIN, HPREV, H, RG, ZG, NN, GHN, A, C, HT


@maybe_jit
def dec_backward_rows(
    Z,
    Zt,
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
    w_ih,
    w_hh,
    comb_w,
    out_w,
    dLOGITS,
):
    """Reverse-mode pass matching dec_forward_rows.

    dLOGITS must be zero at padded (t, row) positions; gradients then never
    leak out of a row's true length. Returns gradients w.r.t. the gathered
    prev-token embeddings, the encoder states, the shared initial state, and
    the per-step preactivation gradients dGI/dGH/dAC for the caller's weight
    GEMMs.
    """
    T, Rn, V = dLOGITS.shape
    m, d = Z.shape
    out_wT = np.ascontiguousarray(out_w.T)
    comb_wT = np.ascontiguousarray(comb_w.T)
    w_ihT = np.ascontiguousarray(w_ih.T)
    w_hhT = np.ascontiguousarray(w_hh.T)

    dG = np.empty((T, Rn, d))
    dGI = np.empty((T, Rn, 3 * d))
    dGH = np.empty((T, Rn, 3 * d))
    dAC = np.empty((T, Rn, d))
    dZ = np.zeros((m, d))
    dh = np.zeros((Rn, d))
    dfeed = np.zeros((Rn, d))
    for t in range(T - 1, -1, -1):
        dht = np.dot(dLOGITS[t], out_wT) + dfeed
        dac = dht * (1.0 - HT[t] * HT[t])
        dAC[t] = dac
        dhc = np.dot(dac, comb_wT)
        dh_att = dhc[:, :d]
        dc = np.ascontiguousarray(dhc[:, d:])
        # context c = a @ Z
        daw = np.dot(dc, Zt)
        dZ += np.dot(np.ascontiguousarray(A[t].T), dc)
        # attention softmax over e = h @ Z^T
        de = np.empty((Rn, m))
        for r in range(Rn):
            s = np.sum(A[t, r] * daw[r])
            de[r] = A[t, r] * (daw[r] - s)
        dh_att2 = np.dot(de, Z)
        dZ += np.dot(np.ascontiguousarray(de.T), H[t])
        dhtot = dh + dh_att + dh_att2
        # GRU cell
        hp = HPREV[t]
        dn = dhtot * (1.0 - ZG[t])
        dhp = dhtot * ZG[t]
        dz = dhtot * (hp - NN[t])
        dan = dn * (1.0 - NN[t] * NN[t])
        dr = dan * GHN[t]
        dghn = dan * RG[t]
        dar = dr * RG[t] * (1.0 - RG[t])
        daz = dz * ZG[t] * (1.0 - ZG[t])
        dgi = np.empty((Rn, 3 * d))
        dgh = np.empty((Rn, 3 * d))
        dgi[:, :d] = dar
        dgi[:, d : 2 * d] = daz
        dgi[:, 2 * d :] = dan
        dgh[:, :d] = dar
        dgh[:, d : 2 * d] = daz
        dgh[:, 2 * d :] = dghn
        dGI[t] = dgi
        dGH[t] = dgh
        dxin = np.dot(dgi, w_ihT)
        dG[t] = dxin[:, :d]
        dfeed = np.ascontiguousarray(dxin[:, d:])
        dh = dhp + np.dot(dgh, w_hhT)
    dh0 = np.zeros(d)
    for r in range(Rn):
        dh0 += dh[r]
    return dG, dZ, dh0, dGI, dGH, dAC


@maybe_jit
def dec_step_rows(
    g,
    feed,
    h,
    Z,
    Zt,
    w_ih,
    w_hh,
    b_ih,
    b_hh,
    comb_w,
    comb_b,
    out_w,
    out_b,
):
    """One decoder step for R rows sharing one source (beam/sampling).

    g: (R, d) previous-token embeddings; feed: (R, d) previous attentional
    hidden state; h: (R, d) previous GRU state. Returns (logits, h', ht, a).
    """
    Rn, d = g.shape
    m = Z.shape[0]
    xin = np.empty((Rn, 2 * d))
    xin[:, :d] = g
    xin[:, d:] = feed
    gi = np.dot(xin, w_ih) + b_ih
    gh = np.dot(h, w_hh) + b_hh
    rg = _sigmoid(gi[:, :d] + gh[:, :d])
    zg = _sigmoid(gi[:, d : 2 * d] + gh[:, d : 2 * d])
    nn = np.tanh(gi[:, 2 * d :] + rg * gh[:, 2 * d :])
    hn = (1.0 - zg) * nn + zg * h
    e = np.dot(hn, Zt)
    a = np.empty((Rn, m))
    for r in range(Rn):
        row = e[r] - np.max(e[r])
        ex = np.exp(row)
        a[r] = ex / np.sum(ex)
    c = np.dot(a, Z)
    hc = np.empty((Rn, 2 * d))
    hc[:, :d] = hn
    hc[:, d:] = c
    ht = np.tanh(np.dot(hc, comb_w) + comb_b)
    logits = np.dot(ht, out_w) + out_b
    return logits, hn, ht, a


# ---------------------------------------------------------------------------
# metric kernels


@maybe_jit
def lcs_len(a, b):
    """Length of the longest common subsequence of two int64 sequences."""
    n = a.shape[0]
    m = b.shape[0]
    prev = np.zeros(m + 1, np.int64)
    cur = np.zeros(m + 1, np.int64)
    for i in range(n):
        for j in range(m):
            if a[i] == b[j]:
                cur[j + 1] = prev[j] + 1
            elif prev[j + 1] >= cur[j]:
                cur[j + 1] = prev[j + 1]
            else:
                cur[j + 1] = cur[j]
        prev, cur = cur, prev
    return prev[m]


@maybe_jit
def ngram_stats(ref, hyp, max_order):
    """Clipped n-gram match and hypothesis n-gram counts for orders 1..max.

    Token ids must be < 2**15 so an n-gram (n <= 4) packs into an int64 key
    without overflow; matches are clipped to reference counts via a sorted
    multiset intersection.
    """
    matches = np.zeros(max_order, np.int64)
    totals = np.zeros(max_order, np.int64)
    for n in range(1, max_order + 1):
        nr = ref.shape[0] - n + 1
        nh = hyp.shape[0] - n + 1
        if nh > 0:
            totals[n - 1] = nh
        if nr <= 0 or nh <= 0:
            continue
        rk = np.empty(nr, np.int64)
        hk = np.empty(nh, np.int64)
        for i in range(nr):
            k = np.int64(0)
            for j in range(n):
                k = (k << 15) | ref[i + j]
            rk[i] = k
        for i in range(nh):
            k = np.int64(0)
            for j in range(n):
                k = (k << 15) | hyp[i + j]
            hk[i] = k
        rk = np.sort(rk)
        hk = np.sort(hk)
        i = 0
        j = 0
        c = 0
        while i < nr and j < nh:
            if rk[i] == hk[j]:
                c += 1
                i += 1
                j += 1
            elif rk[i] < hk[j]:
                i += 1
            else:
                j += 1
        matches[n - 1] = c
    return matches, totals
