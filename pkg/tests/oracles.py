"""Reference implementations that share no code with the package."""

import itertools
import math

import numpy as np


def synergy_nested_loops(vectors, p):
    """Literal expansion of the order-p recursion with Python floats.

    Every c_j^(k) is built as an explicit sum over k' != j of element-wise
    products; no leave-one-out shortcut, no numpy.
    """
    L = len(vectors)
    d = len(vectors[0])
    per = [[list(map(float, v)) for v in vectors]]  # order 1
    for _ in range(2, p + 1):
        prev = per[-1]
        nxt = []
        for j in range(L):
            acc = [0.0] * d
            for kk in range(L):
                if kk == j:
                    continue
                for t in range(d):
                    acc[t] += prev[j][t] * vectors[kk][t]
            nxt.append(acc)
        per.append(nxt)
    means = []
    for order in per[1:]:
        means.append([sum(order[j][t] for j in range(L)) / L for t in range(d)])
    return means


def naive_recall(ranking, truth, k):
    top = ranking[:k]
    return sum(1 for t in truth if t in top) / len(truth)


def naive_ndcg(ranking, truth, k):
    top = ranking[:k]
    dcg = 0.0
    for pos, item in enumerate(top, start=1):
        if item in truth:
            dcg += 1.0 / math.log2(pos + 1)
    idcg = 0.0
    for pos in range(1, min(k, len(truth)) + 1):
        idcg += 1.0 / math.log2(pos + 1)
    return dcg / idcg


def naive_ranking(scores, banned=()):
    """Full sort: descending score, ascending id on ties."""
    items = [(-float(s), j) for j, s in enumerate(scores) if j not in banned]
    return [j for _, j in sorted(items)]


def nonempty_subsets(n):
    for r in range(1, n + 1):
        yield from itertools.combinations(range(n), r)


def central_differences(f, arrays, step=1e-5, skip=lambda name, idx: False):
    """Numerical gradient of scalar ``f()`` w.r.t. every entry of each named
    array (mutated in place and restored)."""
    out = {}
    for name, a in arrays.items():
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            if skip(name, idx):
                continue
            old = a[idx]
            a[idx] = old + step
            up = f()
            a[idx] = old - step
            down = f()
            a[idx] = old
            g[idx] = (up - down) / (2 * step)
        out[name] = g
    return out
