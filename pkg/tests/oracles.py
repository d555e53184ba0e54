"""Independent reference implementations used as test oracles.

Everything here is written as directly as possible (explicit loops, no
shared code with the package) so that agreement is meaningful.
"""

import math

import numpy as np


def matmul_loops(a, b):
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for kk in range(k):
                acc += a[i, kk] * b[kk, j]
            out[i, j] = acc
    return out


def conv2d_loops(x, kernels, bias):
    """Six nested loops, 3x3 kernel, stride 1, zero pad 1. x: [c,h,w]."""
    c_in, h, w = x.shape
    c_out = kernels.shape[0]
    out = np.zeros((c_out, h, w))
    for o in range(c_out):
        for i in range(h):
            for j in range(w):
                acc = 0.0
                for c in range(c_in):
                    for ki in range(3):
                        for kj in range(3):
                            si = i + ki - 1
                            sj = j + kj - 1
                            if 0 <= si < h and 0 <= sj < w:
                                acc += kernels[o, c, ki, kj] * x[c, si, sj]
                out[o, i, j] = acc + bias[o]
    return out


def ntxent_pair_transcription(features, i, j, tau):
    """Straight transcription of the pair loss definition, no stabilization."""
    f = np.asarray(features, dtype=np.float64)
    num = math.exp(float(np.dot(f[i], f[j])) / tau)
    den = 0.0
    for k in range(f.shape[0]):
        if k != i:
            den += math.exp(float(np.dot(f[i], f[k])) / tau)
    return -math.log(num / den)


def ntxent_batch_transcription(features, tau):
    """Mean of the pair loss over all ordered positive pairs (i, i+N)."""
    f = np.asarray(features, dtype=np.float64)
    n = f.shape[0] // 2
    losses = []
    for i in range(n):
        losses.append(ntxent_pair_transcription(f, i, i + n, tau))
        losses.append(ntxent_pair_transcription(f, i + n, i, tau))
    return sum(losses) / len(losses)


def mann_whitney_auc(scores, labels):
    """Pairwise comparison statistic with 0.5 tie credit."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    total = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                total += 1.0
            elif p == q:
                total += 0.5
    return total / (len(pos) * len(neg))


def central_difference(fn, arr, h=1e-4):
    """Central finite differences of a scalar function of one array."""
    grad = np.zeros_like(arr)
    flat = arr.ravel()
    gflat = grad.ravel()
    for idx in range(flat.size):
        orig = flat[idx]
        flat[idx] = orig + h
        fp = fn()
        flat[idx] = orig - h
        fm = fn()
        flat[idx] = orig
        gflat[idx] = (fp - fm) / (2.0 * h)
    return grad


def max_rel_err(analytic, numeric):
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
    return float(np.max(np.abs(analytic - numeric) / denom))


def bilinear_reference(image, src_rows, src_cols):
    """Direct per-pixel bilinear lookup with zero fill, scalar loops."""
    c, h, w = image.shape
    out = np.zeros((c, src_rows.shape[0], src_rows.shape[1]))
    for r in range(src_rows.shape[0]):
        for cc in range(src_rows.shape[1]):
            sr = src_rows[r, cc]
            sc = src_cols[r, cc]
            r0 = math.floor(sr)
            c0 = math.floor(sc)
            fr = sr - r0
            fc = sc - c0
            for ch in range(c):
                acc = 0.0
                for dr, dc, wgt in ((0, 0, (1 - fr) * (1 - fc)),
                                    (0, 1, (1 - fr) * fc),
                                    (1, 0, fr * (1 - fc)),
                                    (1, 1, fr * fc)):
                    rr = r0 + dr
                    col = c0 + dc
                    if 0 <= rr < h and 0 <= col < w:
                        acc += wgt * image[ch, rr, col]
                out[ch, r, cc] = acc
    return out
