"""Independent brute-force references used by the test suite."""

import itertools
import math

import numpy as np


def brute_force_topk(h, params, cfg):
    """Score every one of the M slots with the full key and keep the k best (lower id wins ties)."""
    x = np.asarray(h, dtype=np.float64).reshape(-1, cfg.d)
    q = (x @ params.W_q.data.T).reshape(x.shape[0], cfg.heads, cfg.key_dim)
    idx = np.empty((x.shape[0], cfg.heads, cfg.k), dtype=np.int64)
    w = np.empty((x.shape[0], cfg.heads, cfg.k))
    for hd in range(cfg.heads):
        full = np.array([np.concatenate([params.subkeys_1.data[hd, i], params.subkeys_2.data[hd, j]])
                         for i in range(cfg.n_k) for j in range(cfg.n_k)])
        for n in range(x.shape[0]):
            scores = [float(np.dot(q[n, hd], full[s])) for s in range(cfg.M)]
            order = sorted(range(cfg.M), key=lambda s: (-scores[s], s))[: cfg.k]
            idx[n, hd] = order
            top = [scores[s] for s in order]
            e = [math.exp(v - max(top)) for v in top]
            w[n, hd] = [v / sum(e) for v in e]
    return idx, w


def top_T_by_sort(scores, T):
    """Selection by a plain Python sort over (score desc, index asc)."""
    items = [(-s, i) for i, s in enumerate(scores) if math.isfinite(s)]
    return sorted(i for _, i in sorted(items)[:T])


def dominated_pairs(points, maximize=(True, True)):
    """Conditions dominated by some other condition, by pairwise comparison."""
    signs = [1 if m else -1 for m in maximize]

    def better_eq(a, b):
        return all(s * x >= s * y for s, x, y in zip(signs, a, b))

    out = set()
    for (ca, a), (cb, b) in itertools.permutations(points.items(), 2):
        if better_eq(b, a) and tuple(a) != tuple(b):
            out.add(ca)
    return out


def coverage_counts(plan, n):
    """How many times each target position 1..n-1 is scored by a window plan."""
    seen = np.zeros(n, dtype=int)
    for start, end, first in plan:
        for pos in range(start + 1, end + 1):
            if pos >= first:
                seen[pos] += 1
    return seen[1:]


def log_softmax(z):
    z = np.asarray(z, dtype=np.float64)
    z = z - z.max()
    return z - math.log(np.exp(z).sum())
