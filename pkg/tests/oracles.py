"""Independent reference computations: plain loops over Python floats, no torch."""
from __future__ import annotations

import math

import numpy as np


def dot(a, b):
    s = 0.0
    for x, y in zip(a, b):
        s += float(x) * float(y)
    return s


def matvec(m, v):
    return [dot(row, v) for row in m]


def info_nce_loop(anchors, positives, tau, symmetric=True):
    a = np.asarray(anchors, dtype=np.float64)
    p = np.asarray(positives, dtype=np.float64)
    b = len(a)

    def one_way(x, y):
        total = 0.0
        for i in range(b):
            denom = 0.0
            for k in range(b):
                denom += math.exp(dot(x[i], y[k]) / tau)
            total += -math.log(math.exp(dot(x[i], y[i]) / tau) / denom)
        return total / b

    if symmetric:
        return 0.5 * (one_way(a, p) + one_way(p, a))
    return one_way(a, p)


def cross_view_loop(f_g, f_s, f_d, tau, symmetric=True):
    total = info_nce_loop(f_g, f_s, tau, symmetric)
    for key in ("s1", "s2", "s3"):
        if f_d.get(key) is None:
            continue
        total += info_nce_loop(f_g, f_d[key], tau, symmetric)
        total += info_nce_loop(f_s, f_d[key], tau, symmetric)
    return total


def self_supervised_loop(views_a, views_b, tau, symmetric=True):
    total = 0.0
    for key in ("g", "s", "d_s1", "d_s2", "d_s3"):
        total += info_nce_loop(views_a[key], views_b[key], tau, symmetric)
    return total


def mix_loop(patch, w1, w2):
    hidden = [max(0.0, dot(row, patch)) for row in w1]
    return [float(patch[i]) + dot(w2[i], hidden) for i in range(len(patch))]


def pafa_loop(fmap, mixers, wc, bc, wr, br):
    """Per-channel patches -> mixers -> channel projection -> row projection -> flatten -> L2."""
    hp, wp, c = fmap.shape
    n = hp * wp
    patches = []
    for ch in range(c):
        patch = [float(fmap[i, j, ch]) for i in range(hp) for j in range(wp)]
        for w1, w2 in mixers:
            patch = mix_loop(patch, w1, w2)
        patches.append(patch)
    d = len(wc)
    # channel projection: Y[t][pos] = sum_ch wc[t][ch] * Z[ch][pos] + bc[t]
    y = [[sum(float(wc[t][ch]) * patches[ch][pos] for ch in range(c)) + float(bc[t])
          for pos in range(n)] for t in range(d)]
    r = len(wr)
    out = []
    for t in range(d):
        for q in range(r):
            out.append(sum(float(wr[q][pos]) * y[t][pos] for pos in range(n)) + float(br[q]))
    norm = math.sqrt(sum(v * v for v in out))
    return [v / norm for v in out]


def vlad_loop(x, assign_w, assign_b, centroids, normalize_input=True):
    """Raw soft-assigned residual sums (K, C) for a (N, C) descriptor set."""
    x = [list(map(float, row)) for row in x]
    if normalize_input:
        x = [[v / math.sqrt(sum(u * u for u in row)) for v in row] for row in x]
    k_count, c = len(centroids), len(x[0])
    out = [[0.0] * c for _ in range(k_count)]
    for row in x:
        logits = [dot(assign_w[k], row) + float(assign_b[k]) for k in range(k_count)]
        m = max(logits)
        ex = [math.exp(v - m) for v in logits]
        s = sum(ex)
        for k in range(k_count):
            a = ex[k] / s
            for j in range(c):
                out[k][j] += a * (row[j] - float(centroids[k][j]))
    return out


def adapter_loop(feats, w3, w4, w5):
    """(M, Ce) features -> (pre-normalization output, f_global) following the residual fusion."""
    concat = [float(v) for row in feats for v in row]
    ca = len(w3[0])
    hidden = [max(0.0, sum(concat[i] * float(w3[i][j]) for i in range(len(concat)))) for j in range(ca)]
    d = len(w4[0])
    g = [sum(hidden[j] * float(w4[j][t]) for j in range(ca)) for t in range(d)]
    branch = [max(0.0, sum(g[i] * float(w5[i][t]) for i in range(d))) for t in range(d)]
    return [g[t] + branch[t] for t in range(d)], g


def rank_loop(q, gallery, gallery_ids):
    """Selection sort by (score desc, id asc), scores by explicit loops."""
    scores = {gid: dot(q, g) for gid, g in zip(gallery_ids, gallery)}
    remaining = list(gallery_ids)
    order = []
    while remaining:
        best = remaining[0]
        for gid in remaining[1:]:
            if scores[gid] > scores[best] or (scores[gid] == scores[best] and gid < best):
                best = gid
        order.append(best)
        remaining.remove(best)
    return order, scores


def average_precision_loop(ranked, relevant):
    """Mean over relevant items of the precision at the rank where each one appears."""
    precisions = []
    for item in relevant:
        r = ranked.index(item) + 1
        hits = len([g for g in ranked[:r] if g in relevant])
        precisions.append(hits / r)
    return sum(precisions) / len(precisions)


def top_half_loop(anchor, pool):
    """Brute-force top floor(n/2) by cosine, ties broken by ascending id."""
    scored = []
    for cid, feat in pool:
        scored.append((-dot(anchor, feat), cid))
    scored.sort()
    return [cid for _, cid in scored[: len(pool) // 2]]


def mean_pool_loop(image, grid):
    h, w, c = image.shape
    hs = [int(v) for v in np.linspace(0, h, grid + 1)]
    ws = [int(v) for v in np.linspace(0, w, grid + 1)]
    out = []
    for ch in range(c):
        for i in range(grid):
            for j in range(grid):
                s, cnt = 0.0, 0
                for y in range(hs[i], hs[i + 1]):
                    for x in range(ws[j], ws[j + 1]):
                        s += float(image[y, x, ch])
                        cnt += 1
                out.append(s / cnt)
    return out


def central_difference(f, x: np.ndarray, eps=1e-6):
    """Numerical gradient of scalar ``f`` at ``x`` (float64 array)."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = f(x)
        flat[i] = old - eps
        lo = f(x)
        flat[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return grad


def relative_error(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-30))
