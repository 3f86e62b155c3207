"""Independent reference implementations used to cross-check the library.

Everything here is written from first principles on purpose: slow loops and
pair counting instead of the vectorized algebra used by the package.
"""

import math

import numpy as np


def ari_pair_oracle(a, b) -> float:
    """Adjusted Rand index by brute-force pair agreement counting."""
    n = len(a)
    together_both = together_a = together_b = 0
    for i in range(n):
        for j in range(i + 1, n):
            same_a = a[i] == a[j]
            same_b = b[i] == b[j]
            together_a += same_a
            together_b += same_b
            together_both += same_a and same_b
    total = math.comb(n, 2)
    if total == 0:
        return 0.0
    expected = together_a * together_b / total
    maximum = 0.5 * (together_a + together_b)
    denom = maximum - expected
    if denom == 0:
        return 0.0
    return (together_both - expected) / denom


def rank_oracle(x: np.ndarray) -> np.ndarray:
    """ranks[i, j]: 1-based position of j among i's neighbors by distance.

    Ties go to the lower index, matching a stable sort over squared
    distances computed the naive way.
    """
    n = x.shape[0]
    ranks = np.zeros((n, n), dtype=np.int64)
    for i in range(n):
        d2 = [(float(((x[i] - x[j]) ** 2).sum()), j) for j in range(n) if j != i]
        d2.sort(key=lambda t: (t[0], t[1]))
        for pos, (_, j) in enumerate(d2, start=1):
            ranks[i, j] = pos
    return ranks


def mrre_oracle(x_high: np.ndarray, x_low: np.ndarray, k: int) -> float:
    """Rank-error sum over each point's k high-space neighbors."""
    m = x_high.shape[0]
    rh = rank_oracle(x_high)
    rl = rank_oracle(x_low)
    total = 0.0
    for i in range(m):
        for j in range(m):
            if j != i and rh[i, j] <= k:
                total += abs(rh[i, j] - rl[i, j]) / rh[i, j]
    return total / (m * abs(m - 2 * k) / k)


def mrre_classic_scale(m: int, k: int) -> float:
    """Ratio turning the single-term normalizer into the harmonic-sum one."""
    single = m * abs(m - 2 * k) / k
    harmonic = m * sum(abs(m - 2 * l) / l for l in range(1, k + 1))
    return single / harmonic


def undirected_knn_edges(x: np.ndarray, k: int) -> set:
    """Undirected edge set of the directed kNN graph, ties to lower index."""
    n = x.shape[0]
    edges = set()
    for i in range(n):
        d2 = [(float(((x[i] - x[j]) ** 2).sum()), j) for j in range(n) if j != i]
        d2.sort(key=lambda t: (t[0], t[1]))
        for _, j in d2[: min(k, n - 1)]:
            edges.add((min(i, j), max(i, j)))
    return edges


def binary_entropy(t: np.ndarray) -> float:
    t = np.asarray(t, dtype=np.float64)
    out = np.zeros_like(t)
    inner = (t > 0) & (t < 1)
    ti = t[inner]
    out[inner] = -ti * np.log(ti) - (1.0 - ti) * np.log(1.0 - ti)
    return float(out.sum())
