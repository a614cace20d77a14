"""Independent reference implementations used as test oracles.

Everything here is plain Python / numpy float64 with explicit loops, written
from the loss definitions rather than from the package code.
"""
from __future__ import annotations

import math
from fractions import Fraction

import numpy as np


def logsumexp(xs):
    m = max(xs)
    return m + math.log(sum(math.exp(x - m) for x in xs))


def cos(a, b):
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))


def sim_matrix(A, B):
    return np.array([[cos(a, b) for b in B] for a in A])


def i2t(S_vis, S_ir, tau=1.0):
    total = 0.0
    for S in (S_vis, S_ir):
        n = len(S)
        acc = 0.0
        for i in range(n):
            row = [S[i][j] / tau for j in range(n)]
            acc += logsumexp(row) - row[i]
        total += acc / n
    return total


def t2i(S_vis, S_ir, labels, tau=1.0):
    """Per text anchor i: mean over positives p of -log softmax over images of S[p, i]."""
    total = 0.0
    n = len(labels)
    for S in (S_vis, S_ir):
        acc = 0.0
        for i in range(n):
            col = [S[j][i] / tau for j in range(n)]
            lse = logsumexp(col)
            pos = [p for p in range(n) if labels[p] == labels[i]]
            acc += sum(lse - col[p] for p in pos) / len(pos)
        total += acc / n
    return total


def tvcr(S_vis, S_ir):
    total = 0.0
    for S in (S_vis, S_ir):
        n = len(S)
        total += sum((S[i][j] - S[j][i]) ** 2 for i in range(n) for j in range(n)) / n
    return total


def i2tce(S_vis, S_ir, labels_vis, labels_ir=None, tau=1.0):
    labels_ir = labels_vis if labels_ir is None else labels_ir
    total = 0.0
    for S, y in ((S_vis, labels_vis), (S_ir, labels_ir)):
        acc = 0.0
        for i, row in enumerate(S):
            r = [s / tau for s in row]
            acc += logsumexp(r) - r[y[i]]
        total += acc / len(S)
    return total


def softmax_rows(S, tau=1.0):
    out = []
    for row in S:
        lse = logsumexp([s / tau for s in row])
        out.append([math.exp(s / tau - lse) for s in row])
    return np.array(out)


def dcc(P_vis, P_ir):
    n = len(P_vis)
    return sum((P_vis[i][j] - P_ir[i][j]) ** 2 for i in range(n) for j in range(len(P_vis[i]))) / n


def cross_entropy(logits, labels, smoothing=0.0):
    acc = 0.0
    for row, y in zip(logits, labels):
        lse = logsumexp(list(row))
        logp = [r - lse for r in row]
        k = len(row)
        acc += -((1 - smoothing) * logp[y] + smoothing * sum(logp) / k)
    return acc / len(labels)


def wrt(X, labels):
    """Weighted regularized triplet, positives exclude the anchor."""
    n = len(X)
    D = [[math.sqrt(max(float(np.sum((X[i] - X[j]) ** 2)), 1e-12)) for j in range(n)] for i in range(n)]
    acc = 0.0
    for i in range(n):
        pos = [D[i][j] for j in range(n) if j != i and labels[j] == labels[i]]
        neg = [D[i][j] for j in range(n) if labels[j] != labels[i]]
        zp = logsumexp(pos)
        zn = logsumexp([-d for d in neg])
        far = sum(math.exp(d - zp) * d for d in pos)
        near = sum(math.exp(-d - zn) * d for d in neg)
        x = far - near
        acc += max(x, 0.0) + math.log1p(math.exp(-abs(x)))
    return acc / n


# -- finite differences -------------------------------------------------------

def central_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Gradient of scalar ``f`` at ``x`` by central differences, entry by entry."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f(x)
        x[idx] = old - h
        fm = f(x)
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def max_relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


# -- retrieval ----------------------------------------------------------------

def brute_force_retrieval(D, q_ids, g_ids, valid=None, max_rank=20):
    """Explicit rank enumeration with exact rational AP and CMC.

    Gallery order: ascending distance, ties broken by smaller gallery index.
    Each AP is an exact rational rounded once; mAP is the correctly rounded
    sum of those floats over the scored queries. Returns (cmc, mAP, scored).
    """
    nq, ng = len(q_ids), len(g_ids)
    cmc_counts = [0] * max_rank
    aps = []
    scored = 0
    for i in range(nq):
        keep = [j for j in range(ng) if valid is None or valid[i][j]]
        ranked = []
        for j in keep:
            pos = 0
            for k in keep:
                if D[i][k] < D[i][j] or (D[i][k] == D[i][j] and k < j):
                    pos += 1
            ranked.append((pos, j))
        ranked.sort()
        rel = [g_ids[j] == q_ids[i] for _, j in ranked]
        if not any(rel):
            continue
        scored += 1
        first = rel.index(True)
        for k in range(max_rank):
            if first <= k:
                cmc_counts[k] += 1
        hits, ap = 0, Fraction(0)
        for r, is_rel in enumerate(rel, 1):
            if is_rel:
                hits += 1
                ap += Fraction(hits, r)
        aps.append(float(ap / hits))
    if scored == 0:
        return [0.0] * max_rank, 0.0, 0
    return [c / scored for c in cmc_counts], math.fsum(aps) / scored, scored


def t64(x):
    import torch

    return torch.as_tensor(np.asarray(x, dtype=np.float64))
