"""Analyses that run on a fitted embedding.

Gaussian-mixture clustering with diagonal covariances, spatial label
refinement, a 2-D visualization head trained with the same topology loss,
L1 deconvolution against cluster means, gene importance by column knockout,
cluster-graph connectivity and decoder-based denoising.
"""

from __future__ import annotations

import math
import warnings
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .dataio import RunConfig
from .errors import (
    DegenerateComponent,
    LengthMismatch,
    NegativeSum,
    NonConvergenceWarning,
    NonFiniteLoss,
    OutOfRange,
    ShapeMismatch,
)
from .network import Dense, ModelParams, _glorot, _stack_backward, _stack_forward, forward_all, normalized_adjacency
from .objective import Adam, KernelConfig, topo_loss
from .preprocess import PreprocessedData
from .topology import N_NEG, NeighborGraph, PairBatch, knn_graph

GMM_RESTARTS = 10
GMM_MAX_ITER = 500
GMM_TOL = 1e-8
GMM_RIDGE = 1e-6
VIS_EPOCHS = 300
VIS_LR = 0.01
VIS_NU_LOW = 1.0
LASSO_KKT_TOL = 1e-6
LASSO_MAX_SWEEPS = 1000
REFINE_K = 6


@dataclass
class ClusterModel:
    k: int
    means: np.ndarray
    covariances: np.ndarray  # k x d diagonal variances, ridge included
    weights: np.ndarray
    labels: np.ndarray
    loglik_history: list

    def __post_init__(self):
        hist = self.loglik_history
        for a, b in zip(hist, hist[1:]):
            if b < a - 1e-9:
                raise DegenerateComponent("log-likelihood decreased during EM")


@dataclass
class EMResult:
    means: np.ndarray
    covariances: np.ndarray
    weights: np.ndarray
    resp: np.ndarray
    history: list
    ok: bool


def _kmeanspp(z: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = z.shape[0]
    centers = [int(rng.integers(n))]
    d2 = ((z - z[centers[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers.append(idx)
        d2 = np.minimum(d2, ((z - z[idx]) ** 2).sum(axis=1))
    return z[centers].copy()


def em_fit(z: np.ndarray, k: int, means0: np.ndarray) -> EMResult:
    """Diagonal-covariance EM from the given means; ridge keeps variances alive."""
    n, d = z.shape
    means = means0.copy()
    var0 = z.var(axis=0) + GMM_RIDGE
    covs = np.tile(var0, (k, 1))
    weights = np.full(k, 1.0 / k)
    history = []
    resp = np.full((n, k), 1.0 / k)
    for _ in range(GMM_MAX_ITER):
        # E step in log space
        log_prob = np.empty((n, k))
        for c in range(k):
            diff = z - means[c]
            log_prob[:, c] = (
                -0.5 * (np.log(2.0 * np.pi * covs[c]).sum() + (diff * diff / covs[c]).sum(axis=1))
                + np.log(weights[c])
            )
        m = log_prob.max(axis=1, keepdims=True)
        lse = m[:, 0] + np.log(np.exp(log_prob - m).sum(axis=1))
        ll = float(lse.sum())
        resp = np.exp(log_prob - lse[:, None])
        if history and abs(ll - history[-1]) < GMM_TOL:
            history.append(ll)
            break
        history.append(ll)
        # M step
        nk = resp.sum(axis=0)
        if np.any(nk < 1e-10):
            return EMResult(means, covs, weights, resp, history, ok=False)
        weights = nk / n
        means = (resp.T @ z) / nk[:, None]
        for c in range(k):
            diff = z - means[c]
            covs[c] = (resp[:, c] @ (diff * diff)) / nk[c] + GMM_RIDGE
    return EMResult(means, covs, weights, resp, history, ok=True)


def gmm_cluster(z: np.ndarray, k: int, restarts: int = GMM_RESTARTS, rng: np.random.Generator | None = None) -> ClusterModel:
    """Best-of-restarts EM clustering; restarts that collapse are discarded."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < k:
        raise OutOfRange(f"need at least k={k} rows to fit {k} components")
    if k < 1:
        raise OutOfRange("k must be positive")
    rng = np.random.default_rng(0) if rng is None else rng
    best: EMResult | None = None
    for _ in range(max(1, restarts)):
        means0 = _kmeanspp(z, k, rng)
        res = em_fit(z, k, means0)
        if not res.ok:
            continue
        if best is None or res.history[-1] > best.history[-1]:
            best = res
    if best is None:
        raise DegenerateComponent("every restart collapsed a component")
    labels = best.resp.argmax(axis=1)
    return ClusterModel(
        k=k,
        means=best.means,
        covariances=best.covariances,
        weights=best.weights,
        labels=labels,
        loglik_history=best.history,
    )


def refine_labels(labels: np.ndarray, coords: np.ndarray, k: int = REFINE_K) -> np.ndarray:
    """Majority vote over each spot and its k spatial nearest neighbors.

    Reads all votes from the input labeling; a tie keeps the original label.
    """
    labels = np.asarray(labels)
    coords = np.asarray(coords, dtype=np.float64)
    if len(labels) != coords.shape[0]:
        raise LengthMismatch("labels and coordinates disagree on length")
    n = len(labels)
    graph = knn_graph(coords, min(k, n - 1))
    out = labels.copy()
    for i in range(n):
        votes = Counter([int(labels[i])] + [int(labels[j]) for j in graph.neighbors[i]])
        top = max(votes.values())
        winners = [lab for lab, c in votes.items() if c == top]
        if len(winners) == 1:
            out[i] = winners[0]
    return out


def _vis_pairs(n: int, graph: NeighborGraph, rng: np.random.Generator) -> PairBatch:
    # one kNN positive plus uniform negatives per anchor; no augmented rows
    total = n * (1 + N_NEG)
    anchors = np.empty(total, dtype=np.int64)
    partners = np.empty_like(anchors)
    pos = 0
    for i in range(n):
        nbrs = graph.neighbors[i]
        j = nbrs[int(rng.integers(len(nbrs)))] if nbrs else (i + 1) % n
        anchors[pos], partners[pos] = i, j
        pos += 1
        for _ in range(N_NEG):
            t = int(rng.integers(n - 1))
            if t >= i:
                t += 1
            anchors[pos], partners[pos] = i, t
            pos += 1
    return PairBatch(
        n=n,
        anchors=anchors,
        partners=partners,
        h=np.zeros(total, dtype=np.int64),
        aug_payload=np.empty((0, 1)),
    )


def _fit_vis(z: np.ndarray, cfg: RunConfig) -> tuple[np.ndarray, list]:
    """Train the 2-D head; returns coordinates and the per-epoch loss history."""
    z = np.asarray(z, dtype=np.float64)
    n, d = z.shape
    rng = np.random.default_rng([cfg.seed, 7])
    layers = [_glorot(rng, d, d), _glorot(rng, d, 2)]
    graph = knn_graph(z, max(1, min(cfg.k_tr, n - 1)))
    params = _VisParams(layers)
    adam = Adam(params, VIS_LR)
    kc = KernelConfig(nu=VIS_NU_LOW)
    history = []
    for _ in range(VIS_EPOCHS):
        batch = _vis_pairs(n, graph, rng)
        vi, cache = _stack_forward(z, layers, None)
        loss, dvi, _ = topo_loss(batch, z, vi, kc, alpha=0.0, nu_prior=cfg.nu)
        if not np.isfinite(loss):
            raise NonFiniteLoss("visualization loss became non-finite")
        params.zero_grads()
        _stack_backward(dvi, layers, cache)
        adam.step(params)
        history.append(loss)
    vi, _ = _stack_forward(z, layers, None)
    return vi, history


class _VisParams:
    """Minimal layer container so the shared Adam can drive the 2-D head."""

    def __init__(self, layers):
        self.layers = layers

    def named_layers(self):
        for i, layer in enumerate(self.layers):
            yield f"vis.{i}", layer

    def zero_grads(self):
        for _, layer in self.named_layers():
            layer.gw[...] = 0.0
            layer.gb[...] = 0.0


def fit_visualization(z: np.ndarray, cfg: RunConfig) -> np.ndarray:
    """Map embeddings to 2-D with a small MLP trained on the topology loss."""
    coords, _ = _fit_vis(z, cfg)
    return coords


def _soft(x: float, thr: float) -> float:
    if x > thr:
        return x - thr
    if x < -thr:
        return x + thr
    return 0.0


@dataclass
class DeconvolutionResult:
    cluster_ids: list
    basis: np.ndarray  # d x k cluster means
    weights: np.ndarray  # n x k
    impurity: np.ndarray  # per-spot population std of the weight row
    kkt: float
    converged: bool


def deconvolve(z: np.ndarray, labels: np.ndarray, l1: float) -> DeconvolutionResult:
    """Solve min_w ||z_i - B w||^2 + l1 ||w||_1 per spot by coordinate descent.

    B holds the cluster mean embeddings as columns (sorted by cluster id).
    """
    z = np.asarray(z, dtype=np.float64)
    labels = np.asarray(labels)
    if z.shape[0] != len(labels):
        raise LengthMismatch("labels and embeddings disagree on length")
    if l1 < 0:
        raise OutOfRange("l1 must be nonnegative")
    cluster_ids = sorted(set(int(v) for v in labels))
    basis = np.column_stack([z[labels == c].mean(axis=0) for c in cluster_ids])
    k = basis.shape[1]
    col2 = (basis * basis).sum(axis=0)
    n = z.shape[0]
    weights = np.zeros((n, k))
    worst = 0.0
    converged = True
    thr = l1 / 2.0
    for idx in range(n):
        w = weights[idx]
        r = z[idx].copy()
        kkt = np.inf
        for _ in range(LASSO_MAX_SWEEPS):
            for j in range(k):
                if col2[j] < 1e-30:
                    continue
                rho = basis[:, j] @ r + col2[j] * w[j]
                new = _soft(rho, thr) / col2[j]
                if new != w[j]:
                    r -= (new - w[j]) * basis[:, j]
                    w[j] = new
            grad = -2.0 * (basis.T @ r)
            kkt = 0.0
            for j in range(k):
                if w[j] != 0.0:
                    kkt = max(kkt, abs(grad[j] + l1 * math.copysign(1.0, w[j])))
                else:
                    kkt = max(kkt, max(0.0, abs(grad[j]) - l1))
            if kkt < LASSO_KKT_TOL:
                break
        worst = max(worst, kkt)
        if kkt >= LASSO_KKT_TOL:
            converged = False
    if not converged:
        warnings.warn(NonConvergenceWarning(f"deconvolution stopped above tolerance (kkt={worst:.2e})"))
    impurity = weights.std(axis=1)
    return DeconvolutionResult(
        cluster_ids=cluster_ids,
        basis=basis,
        weights=weights,
        impurity=impurity,
        kkt=worst,
        converged=converged,
    )


def gene_shift_matrix(params: ModelParams, data: PreprocessedData, spatial: NeighborGraph) -> np.ndarray:
    """Per-spot embedding displacement when each gene column is zeroed."""
    a_hat = normalized_adjacency(spatial)
    base, _ = forward_all(params, data.tra, data.mor, a_hat)
    n, g = data.tra.shape
    shifts = np.empty((n, g))
    for gene in range(g):
        x = data.tra.copy()
        x[:, gene] = 0.0
        es, _ = forward_all(params, x, data.mor, a_hat)
        shifts[:, gene] = np.sqrt(((es.z - base.z) ** 2).sum(axis=1))
    return shifts


def marker_importance(
    data: PreprocessedData,
    params: ModelParams,
    spatial: NeighborGraph,
    labels: np.ndarray,
    cluster: int,
    top_n: int = 10,
) -> list:
    """Rank genes for one cluster by mean knockout displacement."""
    tables = marker_tables(data, params, spatial, labels, top_n)
    if cluster not in tables:
        raise OutOfRange(f"cluster {cluster} has no spots")
    return tables[cluster]


def marker_tables(
    data: PreprocessedData,
    params: ModelParams,
    spatial: NeighborGraph,
    labels: np.ndarray,
    top_n: int = 10,
) -> dict:
    labels = np.asarray(labels)
    if len(labels) != data.n_spots:
        raise LengthMismatch("labels do not match the dataset")
    shifts = gene_shift_matrix(params, data, spatial)
    top_n = min(top_n, shifts.shape[1])
    tables = {}
    for c in sorted(set(int(v) for v in labels)):
        imp = shifts[labels == c].mean(axis=0)
        order = np.argsort(-imp, kind="stable")[:top_n]
        tables[c] = [(data.gene_ids[g], float(imp[g])) for g in order]
    return tables


@dataclass
class PagaGraph:
    cluster_ids: list
    connectivity: np.ndarray

    def __post_init__(self):
        c = self.connectivity
        if c.shape[0] != c.shape[1] or not np.allclose(c, c.T):
            raise ShapeMismatch("connectivity must be square and symmetric")
        if np.any(c < 0) or np.any(c > 1):
            raise OutOfRange("connectivity values must lie in [0, 1]")


def paga_connectivity(z: np.ndarray, labels: np.ndarray, k: int = 15) -> PagaGraph:
    """Observed/expected inter-cluster edge ratio on the kNN graph, clipped to [0, 1]."""
    z = np.asarray(z, dtype=np.float64)
    labels = np.asarray(labels)
    if z.shape[0] != len(labels):
        raise LengthMismatch("labels and embeddings disagree on length")
    cluster_ids = sorted(set(int(v) for v in labels))
    if len(cluster_ids) < 2:
        raise OutOfRange("need at least 2 clusters")
    n = z.shape[0]
    graph = knn_graph(z, min(k, n - 1))
    pairs = set()
    for i in range(n):
        for j in graph.neighbors[i]:
            pairs.add((i, j) if i < j else (j, i))
    total = len(pairs)
    sizes = {c: int((labels == c).sum()) for c in cluster_ids}
    counts = {}
    for i, j in pairs:
        a, b = int(labels[i]), int(labels[j])
        if a != b:
            key = (a, b) if a < b else (b, a)
            counts[key] = counts.get(key, 0) + 1
    m = len(cluster_ids)
    conn = np.zeros((m, m))
    possible = n * (n - 1) / 2.0
    for ai, a in enumerate(cluster_ids):
        for bi in range(ai + 1, m):
            b = cluster_ids[bi]
            expected = total * sizes[a] * sizes[b] / possible
            observed = counts.get((a, b) if a < b else (b, a), 0)
            v = 0.0 if expected <= 0 else min(1.0, observed / expected)
            conn[ai, bi] = conn[bi, ai] = v
    return PagaGraph(cluster_ids=cluster_ids, connectivity=conn)


def denoise(params: ModelParams, data: PreprocessedData, spatial: NeighborGraph) -> np.ndarray:
    """Decoder output of a dropout-free forward pass, one column per kept gene."""
    a_hat = normalized_adjacency(spatial)
    es, _ = forward_all(params, data.tra, data.mor, a_hat)
    return es.x_hat


def region_statistic(x_tr: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Fourth root of the cluster-mean total expression, broadcast to spots."""
    x = np.asarray(x_tr, dtype=np.float64)
    labels = np.asarray(labels)
    if x.shape[0] != len(labels):
        raise LengthMismatch("labels and expression disagree on length")
    sums = x.sum(axis=1)
    neg = np.flatnonzero(sums < 0)
    if neg.size:
        raise NegativeSum(f"spot {int(neg[0])} has a negative expression sum")
    out = np.empty(len(labels))
    for c in set(int(v) for v in labels):
        mask = labels == c
        out[mask] = sums[mask].mean() ** 0.25
    return out
