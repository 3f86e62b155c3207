"""Neighborhood graphs, feature augmentation and training pair sampling."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import IsolatedNodesWarning, OutOfRange, ShapeMismatch

N_NEG = 5  # uniform negatives per anchor


@dataclass
class NeighborGraph:
    """Adjacency as per-node sorted neighbor index tuples.

    kind is "spatial_eps" (symmetric, built from a radius) or "knn"
    (directed, exactly k out-neighbors per node unless n is too small).
    """

    n: int
    neighbors: list
    kind: str
    isolated: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if len(self.neighbors) != self.n:
            raise ShapeMismatch("neighbor list length does not match node count")
        for i, nbrs in enumerate(self.neighbors):
            for j in nbrs:
                if not 0 <= j < self.n or j == i:
                    raise OutOfRange(f"node {i} has invalid neighbor {j}")

    def degree(self, i: int) -> int:
        return len(self.neighbors[i])


def _pairwise_sq_dists(x: np.ndarray, y: np.ndarray | None = None) -> np.ndarray:
    y = x if y is None else y
    sq = (x * x).sum(axis=1)[:, None] + (y * y).sum(axis=1)[None, :] - 2.0 * (x @ y.T)
    return np.maximum(sq, 0.0)


def build_spatial_graph(coords: np.ndarray, eps: float) -> NeighborGraph:
    """Symmetric radius graph: edge iff 0 < distance <= eps.

    Nodes without any neighbor trigger an IsolatedNodesWarning and are listed
    on the returned graph.
    """
    if eps <= 0:
        raise OutOfRange("epsilon radius must be positive")
    coords = np.asarray(coords, dtype=np.float64)
    n = coords.shape[0]
    d2 = _pairwise_sq_dists(coords)
    within = (d2 <= eps * eps) & (d2 > 0.0)
    # coincident spots sit at distance 0 and never become neighbors
    np.fill_diagonal(within, False)
    neighbors = [tuple(np.flatnonzero(within[i]).tolist()) for i in range(n)]
    isolated = tuple(i for i in range(n) if not neighbors[i])
    if isolated:
        warnings.warn(
            IsolatedNodesWarning(f"{len(isolated)} node(s) have no spatial neighbor at eps={eps:g}")
        )
    return NeighborGraph(n=n, neighbors=neighbors, kind="spatial_eps", isolated=isolated)


def auto_epsilon(coords: np.ndarray) -> float:
    """Smallest radius at which the median spot has at least 4 neighbors."""
    coords = np.asarray(coords, dtype=np.float64)
    n = coords.shape[0]
    if n < 2:
        raise OutOfRange("need at least 2 spots to pick a radius")
    k = min(4, n - 1)
    d2 = _pairwise_sq_dists(coords)
    np.fill_diagonal(d2, np.inf)
    kth = np.sort(np.sqrt(d2), axis=1)[:, k - 1]
    # lower median: the smallest radius covering at least half the spots
    return float(np.sort(kth)[(n - 1) // 2])


def knn_graph(x: np.ndarray, k: int) -> NeighborGraph:
    """Directed k-nearest-neighbor graph; distance ties go to the lower index."""
    if k < 1:
        raise OutOfRange("k must be positive")
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if n < 2:
        raise OutOfRange("need at least 2 rows for a knn graph")
    k = min(k, n - 1)
    d2 = _pairwise_sq_dists(x)
    np.fill_diagonal(d2, np.inf)
    order = np.argsort(d2, axis=1, kind="stable")
    neighbors = [tuple(sorted(order[i, :k].tolist())) for i in range(n)]
    return NeighborGraph(n=n, neighbors=neighbors, kind="knn")


def augment(
    features: np.ndarray, i: int, graph: NeighborGraph, p_u: float, rng: np.random.Generator
) -> tuple[np.ndarray, float]:
    """Mix row i toward a uniformly chosen 1-hop neighbor.

    Returns ((1 - r) * x_i + r * x_j, r) with r ~ U(0, p_u). A node with no
    neighbors falls back to its own row with r = 0.
    """
    if not 0 < p_u <= 1:
        raise OutOfRange("p_u must lie in (0, 1]")
    nbrs = graph.neighbors[i]
    if not nbrs:
        return features[i].copy(), 0.0
    j = nbrs[int(rng.integers(len(nbrs)))]
    r = float(rng.uniform(0.0, p_u))
    return (1.0 - r) * features[i] + r * features[j], r


@dataclass
class PairBatch:
    """Anchor/partner index pairs for the topology loss.

    Partners of h=0 entries are dataset row indices; partners of h=1 entries
    point past the dataset into `aug_payload` (index n + payload row).
    """

    n: int
    anchors: np.ndarray
    partners: np.ndarray
    h: np.ndarray
    aug_payload: np.ndarray
    fallbacks: int = 0

    def __post_init__(self):
        if not (len(self.anchors) == len(self.partners) == len(self.h)):
            raise ShapeMismatch("batch arrays disagree on length")
        aug = self.h == 1
        if np.any(self.partners[aug] < self.n):
            raise OutOfRange("augmented entries must point into the payload")
        plain = ~aug
        bad = (self.partners[plain] >= self.n) | (self.partners[plain] == self.anchors[plain])
        if np.any(bad):
            raise OutOfRange("negative entries must name a dataset row other than the anchor")

    @property
    def size(self) -> int:
        return len(self.anchors)


def sample_pairs(
    n: int,
    graph: NeighborGraph,
    features: np.ndarray,
    n_neg: int,
    p_u: float,
    rng: np.random.Generator,
) -> PairBatch:
    """One augmented partner plus `n_neg` uniform negatives per anchor.

    Draw order per anchor is fixed (augmentation first), so a seeded
    generator reproduces the batch exactly.
    """
    if n < 2:
        raise OutOfRange("need at least 2 rows to sample pairs")
    if features.shape[0] != n or graph.n != n:
        raise ShapeMismatch("features and graph must cover the same rows")
    anchors = np.empty(n * (1 + n_neg), dtype=np.int64)
    partners = np.empty_like(anchors)
    h = np.empty_like(anchors)
    payload = np.empty((n, features.shape[1]), dtype=np.float64)
    fallbacks = 0
    pos = 0
    for i in range(n):
        row, r = augment(features, i, graph, p_u, rng)
        if r == 0.0 and not graph.neighbors[i]:
            fallbacks += 1
        payload[i] = row
        anchors[pos], partners[pos], h[pos] = i, n + i, 1
        pos += 1
        for _ in range(n_neg):
            j = int(rng.integers(n - 1))
            if j >= i:
                j += 1
            anchors[pos], partners[pos], h[pos] = i, j, 0
            pos += 1
    return PairBatch(n=n, anchors=anchors, partners=partners, h=h, aug_payload=payload, fallbacks=fallbacks)
