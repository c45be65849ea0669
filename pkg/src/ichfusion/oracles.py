"""Slow, obviously-correct reference implementations used to audit the fast paths.

Nothing here shares code with the routines it checks.
"""
from __future__ import annotations

import math

import numpy as np


def naive_conv2d(x, kernel, bias, stride=1, padding=0):
    n, c, h, w = x.shape
    f, _, kh, kw = kernel.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((n, f, ho, wo))
    for b in range(n):
        for o in range(f):
            for i in range(ho):
                for j in range(wo):
                    acc = bias[o]
                    for ch in range(c):
                        for di in range(kh):
                            for dj in range(kw):
                                y = i * stride + di - padding
                                xx = j * stride + dj - padding
                                if 0 <= y < h and 0 <= xx < w:
                                    acc += x[b, ch, y, xx] * kernel[o, ch, di, dj]
                    out[b, o, i, j] = acc
    return out


def direct_log_loss(preds, labels, weights, eps=1e-15):
    total = 0.0
    for row_p, row_y in zip(preds, labels):
        s = 0.0
        for p, y, w in zip(row_p, row_y, weights):
            p = min(max(float(p), eps), 1.0 - eps)
            s += w * -(y * math.log(p) + (1 - y) * math.log(1 - p))
        total += s
    return total / len(preds)


def direct_bce_from_logits(logits, targets, weights, eps=1e-15):
    probs = [[1.0 / (1.0 + math.exp(-v)) for v in row] for row in np.asarray(logits).tolist()]
    return direct_log_loss(probs, np.asarray(targets).tolist(), list(weights), eps)


def pairwise_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y != 1]
    credit = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                credit += 1.0
            elif p == q:
                credit += 0.5
    return credit / (len(pos) * len(neg))


def scalar_adam(p, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Run Adam on one scalar through a gradient sequence; returns the trajectory."""
    m = v = 0.0
    out = []
    for t, g in enumerate(grads, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1**t)
        vhat = v / (1 - beta2**t)
        p = p - lr * mhat / (math.sqrt(vhat) + eps)
        out.append(p)
    return out


def column_max(matrix):
    rows = [list(r) for r in matrix]
    return [max(r[c] for r in rows) for c in range(len(rows[0]))]
