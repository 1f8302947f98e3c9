"""Independent reference implementations used only by the tests.

Each one is written the slow, obvious way and shares no code with the
package, so agreement between the two is meaningful.
"""

import math
from functools import lru_cache


def dtw_brute_force(C):
    """Minimum cost over every monotone path from (0, 0) to (n-1, m-1)."""
    n, m = len(C), len(C[0])
    best = math.inf

    def walk(i, j, acc):
        nonlocal best
        acc += C[i][j]
        if i == n - 1 and j == m - 1:
            best = min(best, acc)
            return
        if i + 1 < n:
            walk(i + 1, j, acc)
        if j + 1 < m:
            walk(i, j + 1, acc)
        if i + 1 < n and j + 1 < m:
            walk(i + 1, j + 1, acc)

    walk(0, 0, 0.0)
    return best


def path_cost(C, pairs):
    return sum(C[i][j] for i, j in pairs)


def is_monotone_path(pairs, n, m):
    if pairs[0] != (0, 0) or pairs[-1] != (n - 1, m - 1):
        return False
    for (a, b), (c, d) in zip(pairs, pairs[1:]):
        if (c - a, d - b) not in ((1, 0), (0, 1), (1, 1)):
            return False
    return True


def bm25_reference(docs, k1=1.2, b=0.75):
    """Score of every document used as a query against all other documents."""
    D = len(docs)
    avgdl = sum(len(d) for d in docs) / D
    if avgdl == 0:
        avgdl = 1.0
    scores = []
    for u in range(D):
        total = 0.0
        for term in docs[u]:
            n = 0
            for d in docs:
                if term in d:
                    n += 1
            idf = math.log(1 + (D - n + 0.5) / (n + 0.5))
            for d in range(D):
                if d == u:
                    continue
                tf = docs[d].count(term)
                total += idf * (tf * (k1 + 1)) / (tf + k1 * (1 - b + b * len(docs[d]) / avgdl))
        scores.append(total)
    return scores


def rouge_n_reference(cand, ref, n):
    """Clipped overlap by striking matched n-grams out of a list."""
    cg = [tuple(cand[i:i + n]) for i in range(len(cand) - n + 1)]
    rg = [tuple(ref[i:i + n]) for i in range(len(ref) - n + 1)]
    pool = list(rg)
    hit = 0
    for g in cg:
        if g in pool:
            pool.remove(g)
            hit += 1
    p = hit / len(cg) if cg else 0.0
    r = hit / len(rg) if rg else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def lcs_reference(a, b):
    @lru_cache(maxsize=None)
    def go(i, j):
        if i == len(a) or j == len(b):
            return 0
        if a[i] == b[j]:
            return 1 + go(i + 1, j + 1)
        return max(go(i + 1, j), go(i, j + 1))
    return go(0, 0)


def softmax_ce_grad_uniform(V, true_index):
    """Closed form d CE / d logits at uniform logits: 1/V - onehot."""
    return [1.0 / V - (1.0 if k == true_index else 0.0) for k in range(V)]


def numeric_grad(f, x, eps=1e-6):
    """Central differences of scalar ``f`` w.r.t. every entry of numpy ``x`` (in place)."""
    import numpy as np

    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for k in range(flat.size):
        o = flat[k]
        flat[k] = o + eps
        hi = f()
        flat[k] = o - eps
        lo = f()
        flat[k] = o
        gf[k] = (hi - lo) / (2 * eps)
    return g
