"""Independent reference computations for the test-suite.

Plain Python loops over floats; nothing here touches the package's kernels.
"""
import math
from fractions import Fraction


def naive_attention(K, V, q, scale, idx=None, weights=None):
    """Two-pass masked softmax with math.fsum; returns (output list, log-normalizer)."""
    rows = range(len(K)) if idx is None else [int(i) for i in idx]
    w = [1.0] * len(rows) if weights is None else [float(x) for x in weights]
    s = [scale * math.fsum(float(a) * float(b) for a, b in zip(K[t], q)) for t in rows]
    m = max(s)
    e = [wi * math.exp(si - m) for wi, si in zip(w, s)]
    den = math.fsum(e)
    D = len(V[0])
    out = [math.fsum(e[j] * float(V[t][d]) for j, t in enumerate(rows)) / den for d in range(D)]
    return out, m + math.log(den)


def sort_topk(scores, k):
    order = sorted(range(len(scores)), key=lambda t: (-scores[t], t))
    return sorted(order[:k])


def exact_rank(rows):
    """Rank of a matrix given as rows of floats, by exact rational elimination."""
    M = [[Fraction(float(x)) for x in r] for r in rows]
    rank, ncols = 0, len(M[0]) if M else 0
    for c in range(ncols):
        piv = next((r for r in range(rank, len(M)) if M[r][c] != 0), None)
        if piv is None:
            continue
        M[rank], M[piv] = M[piv], M[rank]
        for r in range(len(M)):
            if r != rank and M[r][c] != 0:
                f = M[r][c] / M[rank][c]
                M[r] = [a - f * b for a, b in zip(M[r], M[rank])]
        rank += 1
    return rank
