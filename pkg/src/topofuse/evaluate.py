"""Agreement metrics and modality attribution.

ARI is computed from the contingency table with exact integer arithmetic.
MRRE compares neighbor ranks between two spaces. Modality contributions come
from a linear one-vs-rest SVM explained with exact linear Shapley values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import LengthMismatch, OutOfRange, ShapeMismatch, SingleClass

SVM_EPOCHS = 200
SVM_C = 1.0


def ari(a, b) -> float:
    """Adjusted Rand index; 0 when the adjustment denominator vanishes."""
    a = np.asarray(a)
    b = np.asarray(b)
    if len(a) != len(b):
        raise LengthMismatch(f"labelings have lengths {len(a)} and {len(b)}")
    n = len(a)
    if n == 0:
        raise LengthMismatch("labelings are empty")
    ua = {v: i for i, v in enumerate(sorted(set(a.tolist())))}
    ub = {v: i for i, v in enumerate(sorted(set(b.tolist())))}
    table = np.zeros((len(ua), len(ub)), dtype=np.int64)
    for x, y in zip(a.tolist(), b.tolist()):
        table[ua[x], ub[y]] += 1
    sum_ij = int(sum(math.comb(int(v), 2) for v in table.ravel()))
    sum_a = int(sum(math.comb(int(v), 2) for v in table.sum(axis=1)))
    sum_b = int(sum(math.comb(int(v), 2) for v in table.sum(axis=0)))
    pairs = math.comb(n, 2)
    if pairs == 0:
        return 0.0
    expected = sum_a * sum_b / pairs
    maximum = 0.5 * (sum_a + sum_b)
    denom = maximum - expected
    if denom == 0:
        return 0.0
    return float((sum_ij - expected) / denom)


def _rank_matrix(x: np.ndarray) -> np.ndarray:
    """ranks[i, j]: position of j among i's neighbors (1-based, self excluded).

    Distance ties resolve toward the lower index.
    """
    n = x.shape[0]
    sq = (x * x).sum(axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (x @ x.T), 0.0)
    np.fill_diagonal(d2, np.inf)
    order = np.argsort(d2, axis=1, kind="stable")
    ranks = np.empty((n, n), dtype=np.int64)
    cols = np.arange(1, n + 1)
    for i in range(n):
        ranks[i, order[i]] = cols
    return ranks


def mrre(x_high: np.ndarray, x_low: np.ndarray, k: int, bidirectional: bool = False) -> float:
    """Mean relative rank error of the k high-space neighborhoods.

    Sums |r - r'| / r over each point's k nearest high-space neighbors and
    divides by M * |M - 2k| / k. The bidirectional flag averages in the
    low-space-neighborhood direction as well.
    """
    x_high = np.asarray(x_high, dtype=np.float64)
    x_low = np.asarray(x_low, dtype=np.float64)
    if x_high.shape[0] != x_low.shape[0]:
        raise LengthMismatch("spaces disagree on row count")
    m = x_high.shape[0]
    if m < k + 2:
        raise OutOfRange(f"need at least k+2={k + 2} points")
    if not 1 <= k < m / 2:
        raise OutOfRange("k must satisfy 1 <= k < M/2")

    def one_direction(a, b):
        ra = _rank_matrix(a)
        rb = _rank_matrix(b)
        total = 0.0
        for i in range(m):
            nbrs = np.flatnonzero(ra[i] <= k)
            nbrs = nbrs[nbrs != i]
            total += (np.abs(ra[i, nbrs] - rb[i, nbrs]) / ra[i, nbrs]).sum()
        return total / (m * abs(m - 2 * k) / k)

    v = one_direction(x_high, x_low)
    if bidirectional:
        v = 0.5 * (v + one_direction(x_low, x_high))
    return float(v)


def fit_linear_svm(
    x: np.ndarray, y: np.ndarray, rng: np.random.Generator, epochs: int = SVM_EPOCHS, c: float = SVM_C
):
    """One-vs-rest linear SVM by SGD on the hinge + L2 objective.

    The intercept rides along as a constant feature. All classes share one
    shuffle per epoch and the decaying step size 1 / (lambda * t) with
    lambda = 1 / (c * n). Returns (weights: classes x features, biases,
    class values).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    n, f = x.shape
    classes = sorted(set(y.tolist()))
    if len(classes) < 2:
        raise SingleClass("need at least two classes")
    lam = 1.0 / (c * n)
    xa = np.column_stack([x, np.ones(n)])
    targets = np.stack([np.where(y == cls, 1.0, -1.0) for cls in classes])
    wa = np.zeros((len(classes), f + 1))
    step = 0
    for _ in range(epochs):
        for i in rng.permutation(n):
            step += 1
            eta = 1.0 / (lam * step)
            margins = targets[:, i] * (wa @ xa[i])
            wa *= 1.0 - eta * lam
            hit = margins < 1.0
            if np.any(hit):
                wa[hit] += (eta * targets[hit, i])[:, None] * xa[i]
    return wa[:, :f], wa[:, f].copy(), classes


def svm_predict(x: np.ndarray, weights: np.ndarray, biases: np.ndarray) -> np.ndarray:
    return (x @ weights.T + biases).argmax(axis=1)


def linear_shap(x: np.ndarray, mu: np.ndarray, w: np.ndarray) -> np.ndarray:
    """phi_j = w_j (x_j - mu_j); rows sum to f(x) - f(mu) exactly."""
    return (np.asarray(x) - np.asarray(mu)) * np.asarray(w)


@dataclass
class ModalityContribution:
    names: list
    per_spot: np.ndarray  # n x modalities, max |phi| inside each block
    summary: dict
    train_accuracy: float


def modality_contribution(
    mats: list, labels: np.ndarray, names: list | None = None, seed: int = 0
) -> ModalityContribution:
    """Max-|Shapley| per modality for a linear SVM on the column concatenation."""
    if not mats:
        raise LengthMismatch("need at least one modality matrix")
    n = mats[0].shape[0]
    for m in mats:
        if m.shape[0] != n:
            raise ShapeMismatch("modalities disagree on row count")
    labels = np.asarray(labels)
    if len(labels) != n:
        raise LengthMismatch("labels do not match the rows")
    names = [f"m{i}" for i in range(len(mats))] if names is None else list(names)
    if len(names) != len(mats):
        raise LengthMismatch("names do not match the modalities")

    x = np.concatenate([np.asarray(m, dtype=np.float64) for m in mats], axis=1)
    rng = np.random.default_rng([seed, 17])
    weights, biases, classes = fit_linear_svm(x, labels, rng)
    pred = svm_predict(x, weights, biases)
    accuracy = float((np.asarray([classes[p] for p in pred]) == labels).mean())

    mu = x.mean(axis=0)
    phi = linear_shap(x, mu, weights[pred])
    spans = np.cumsum([0] + [m.shape[1] for m in mats])
    per_spot = np.column_stack(
        [np.abs(phi[:, spans[i]: spans[i + 1]]).max(axis=1) for i in range(len(mats))]
    )
    summary = {}
    for i, name in enumerate(names):
        col = per_spot[:, i]
        summary[name] = {
            "mean": float(col.mean()),
            "median": float(np.median(col)),
            "q25": float(np.percentile(col, 25)),
            "q75": float(np.percentile(col, 75)),
        }
    return ModalityContribution(names=names, per_spot=per_spot, summary=summary, train_accuracy=accuracy)
