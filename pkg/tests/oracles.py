"""Brute-force reference implementations used as test oracles."""

import math

import numpy as np


def naive_conv(x, w, stride, pad, groups=1):
    """Quadruple-loop reference convolution (cross-correlation)."""
    n, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    og = o // groups
    for b in range(n):
        for oc in range(o):
            g = oc // og
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ic in range(cg):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[b, g * cg + ic, i * stride + u, j * stride + v] * w[oc, ic, u, v]
                    out[b, oc, i, j] = acc
    return out


def naive_attention(q_src, kv_src, attn):
    """Per-batch, per-head loop with explicit softmax, in float64."""
    w = lambda lin: (lin.weight.data.astype(np.float64), lin.bias.data.astype(np.float64))
    (wq, bq), (wk, bk), (wv, bv), (wo, bo) = map(w, (attn.q, attn.k, attn.v, attn.out))
    b, tq, d = q_src.shape
    h = attn.heads
    dh = d // h
    out = np.zeros((b, tq, d))
    weights = np.zeros((b, h, tq, kv_src.shape[1]))
    for n in range(b):
        q = q_src[n] @ wq + bq
        k = kv_src[n] @ wk + bk
        v = kv_src[n] @ wv + bv
        ctx = np.zeros((tq, d))
        for hd in range(h):
            sl = slice(hd * dh, (hd + 1) * dh)
            logits = q[:, sl] @ k[:, sl].T / math.sqrt(dh)
            e = np.exp(logits - logits.max(axis=1, keepdims=True))
            a = e / e.sum(axis=1, keepdims=True)
            weights[n, hd] = a
            ctx[:, sl] = a @ v[:, sl]
        out[n] = ctx @ wo + bo
    return out, weights
