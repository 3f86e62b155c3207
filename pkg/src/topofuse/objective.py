"""Topology-preserving fusion objective and full-batch training loop.

The similarity kernel is a heavy-tailed power law; the topology loss is a
binary cross entropy between kernel similarities in the latent space and a
prior built from per-modality embeddings. The prior side is treated as a
constant: no gradient flows through it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataio import RunConfig
from .errors import NonFiniteLoss, OutOfRange, ShapeMismatch
from .network import (
    EmbeddingSet,
    ModelParams,
    backward_all,
    dropout_mask,
    forward_all,
    init_params,
    normalized_adjacency,
)
from .preprocess import PreprocessedData
from .topology import N_NEG, NeighborGraph, PairBatch, knn_graph, sample_pairs

S_CLAMP = 1e-7
GRAPH_REFRESH = 10  # epochs between modality-graph rebuilds
DROPOUT_P = 0.1


@dataclass(frozen=True)
class KernelConfig:
    nu: float
    clamp_eps: float = S_CLAMP

    def __post_init__(self):
        if self.nu <= 0:
            raise OutOfRange("nu must be positive")
        if not 0 < self.clamp_eps < 0.5:
            raise OutOfRange("clamp_eps must lie in (0, 0.5)")


def kappa(a: np.ndarray, b: np.ndarray, nu: float) -> float:
    """Similarity (1 + ||a-b||^2 / nu) ** (-(nu+1)/nu) between two vectors."""
    if nu <= 0:
        raise OutOfRange("nu must be positive")
    d2 = float(((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2).sum())
    return float((1.0 + d2 / nu) ** (-(nu + 1.0) / nu))


def _kappa_rows(x: np.ndarray, y: np.ndarray, nu: float) -> np.ndarray:
    d2 = ((x - y) ** 2).sum(axis=1)
    return (1.0 + d2 / nu) ** (-(nu + 1.0) / nu)


def topo_prior(y_i: np.ndarray, y_j: np.ndarray, h: int, alpha: float, nu: float) -> float:
    """Target similarity: kernel value, boosted by e^alpha for augmented pairs."""
    if h not in (0, 1):
        raise OutOfRange("h must be 0 or 1")
    base = kappa(y_i, y_j, nu)
    t = (1.0 + h * (np.exp(alpha) - 1.0)) * base
    return float(min(t, 1.0))


def topo_loss(
    batch: PairBatch,
    y_m: np.ndarray,
    z: np.ndarray,
    cfg: KernelConfig,
    alpha: float,
    nu_prior: float | None = None,
    t_fixed: np.ndarray | None = None,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Cross entropy between latent similarities and the per-modality prior.

    `y_m` and `z` carry dataset rows first and augmented-payload rows after
    them, matching the index convention of PairBatch. Returns the scalar loss
    and gradients for z and y_m; the y_m gradient is identically zero because
    the prior is detached. `t_fixed` substitutes a precomputed prior per pair,
    which keeps the loss a pure function of z when differentiating through
    the encoder.
    """
    if y_m.shape[0] != z.shape[0]:
        raise ShapeMismatch("y_m and z must cover the same rows")
    if batch.size and int(batch.partners.max()) >= z.shape[0]:
        raise ShapeMismatch("batch indices run past the embedding rows")
    nu_p = cfg.nu if nu_prior is None else nu_prior
    i, j = batch.anchors, batch.partners

    if t_fixed is not None:
        if t_fixed.shape != i.shape:
            raise ShapeMismatch("t_fixed must give one prior per batch pair")
        t = t_fixed
    else:
        t = _kappa_rows(y_m[i], y_m[j], nu_p)
        boost = 1.0 + batch.h * (np.exp(alpha) - 1.0)
        t = np.minimum(boost * t, 1.0)

    zi, zj = z[i], z[j]
    diff = zi - zj
    d2 = (diff * diff).sum(axis=1)
    p = (cfg.nu + 1.0) / cfg.nu
    u = 1.0 + d2 / cfg.nu
    log_s_raw = -p * np.log1p(d2 / cfg.nu)
    s_raw = np.exp(log_s_raw)
    lo, hi = cfg.clamp_eps, 1.0 - cfg.clamp_eps
    log_s = np.where(s_raw < lo, np.log(lo),
                     np.where(s_raw > hi, np.log1p(-lo), log_s_raw))
    log_1ms = np.where(s_raw > hi, np.log(lo),
                       np.where(s_raw < lo, np.log1p(-lo), np.log1p(-np.minimum(s_raw, hi))))
    loss = float(-(t * log_s + (1.0 - t) * log_1ms).sum())

    # Gradient of the unclamped cross entropy: the 1/S factor cancels the
    # kernel tail, leaving the heavy-tailed attraction t * p / (nu * u), so
    # far-apart pairs with a live target still move. Only the repulsion
    # ratio is capped at the clamp ceiling.
    s_cap = np.minimum(s_raw, hi)
    dd2 = (p / cfg.nu) * (t / u - (1.0 - t) * s_cap / ((1.0 - s_cap) * u))
    dpair = (2.0 * dd2)[:, None] * diff
    dz = np.zeros_like(z)
    np.add.at(dz, i, dpair)
    np.add.at(dz, j, -dpair)
    return loss, dz, np.zeros_like(y_m)


def recon_loss(x: np.ndarray, x_hat: np.ndarray) -> tuple[float, np.ndarray]:
    """Squared error summed over genes, averaged over spots."""
    if x.shape != x_hat.shape:
        raise ShapeMismatch(f"reconstruction shape {x_hat.shape} does not match input {x.shape}")
    n = x.shape[0]
    diff = x_hat - x
    return float((diff * diff).sum() / n), 2.0 * diff / n


class Adam:
    """Standard Adam over every layer of a ModelParams."""

    def __init__(self, params: ModelParams, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2, self.eps = b1, b2, eps
        self.t = 0
        self.m = {}
        self.v = {}
        for name, layer in params.named_layers():
            self.m[name] = (np.zeros_like(layer.w), np.zeros_like(layer.b))
            self.v[name] = (np.zeros_like(layer.w), np.zeros_like(layer.b))

    def step(self, params: ModelParams):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name, layer in params.named_layers():
            for g, p, m, v in ((layer.gw, layer.w, self.m[name][0], self.v[name][0]),
                               (layer.gb, layer.b, self.m[name][1], self.v[name][1])):
                m *= self.b1
                m += (1.0 - self.b1) * g
                v *= self.b2
                v += (1.0 - self.b2) * g * g
                p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainState:
    params: ModelParams
    epoch: int
    history: list = field(default_factory=list)
    notes: dict = field(default_factory=dict)


def _effective_k(k: int, n: int) -> int:
    return max(1, min(k, n - 1))


def train(
    data: PreprocessedData, spatial: NeighborGraph, cfg: RunConfig
) -> tuple[TrainState, EmbeddingSet]:
    """Fit the fused autoencoder on one dataset.

    Per epoch and modality: sample an augmented view plus uniform negatives,
    embed the base and augmented inputs, and descend the topology loss plus
    lambda_ times the reconstruction loss with full-batch Adam. Modality
    graphs are rebuilt from the current embeddings every GRAPH_REFRESH epochs.
    """
    n = data.n_spots
    if spatial.n != n:
        raise ShapeMismatch("spatial graph does not cover the dataset")
    rng = np.random.default_rng(cfg.seed)
    params = init_params(rng, data.tra.shape[1], None if data.mor is None else data.mor.shape[1], cfg)
    a_hat = normalized_adjacency(spatial)
    kcfg = KernelConfig(nu=cfg.nu)

    mods = [("tra", data.tra, _effective_k(cfg.k_tr, n), cfg.r_u_tr)]
    if data.mor is not None:
        mods.append(("mor", data.mor, _effective_k(cfg.k_mo, n), cfg.r_u_mo))
    graphs = {name: knn_graph(x, k) for name, x, k, _ in mods}

    adam = Adam(params, cfg.lr)
    history = []
    fallbacks = 0
    for epoch in range(1, cfg.epochs + 1):
        if epoch > 1 and (epoch - 1) % GRAPH_REFRESH == 0:
            es_eval, _ = forward_all(params, data.tra, data.mor, a_hat)
            cur = {"tra": es_eval.y_tra, "mor": es_eval.y_mor}
            graphs = {name: knn_graph(cur[name], k) for name, _, k, _ in mods}

        batches = {}
        for name, x, _, p_u in mods:
            batches[name] = sample_pairs(n, graphs[name], x, N_NEG, p_u, rng)
            fallbacks += batches[name].fallbacks

        params.zero_grads()
        # One dropout realization per modality per epoch, shared between the
        # base and augmented forwards: a fresh mask per view would inject
        # noise far larger than the augmentation shift and blank the prior.
        m_tr = dropout_mask(data.tra.shape, DROPOUT_P, rng)
        m_mo = dropout_mask(data.mor.shape, DROPOUT_P, rng) if data.mor is not None else None
        xt = data.tra if m_tr is None else data.tra * m_tr
        xm = None if data.mor is None else (data.mor if m_mo is None else data.mor * m_mo)
        es, caches = forward_all(params, xt, xm, a_hat)
        l_rec, dxhat = recon_loss(data.tra, es.x_hat)

        dz_base = np.zeros_like(es.z)
        losses = {}
        for name, x, _, p_u in mods:
            batch = batches[name]
            if name == "tra":
                x_view = batch.aug_payload if m_tr is None else batch.aug_payload * m_tr
                view_inputs = (x_view, xm)
            else:
                x_view = batch.aug_payload if m_mo is None else batch.aug_payload * m_mo
                view_inputs = (xt, x_view)
            es_v, caches_v = forward_all(params, view_inputs[0], view_inputs[1], a_hat)
            y_base = es.y_tra if name == "tra" else es.y_mor
            y_view = es_v.y_tra if name == "tra" else es_v.y_mor
            y_full = np.concatenate([y_base, y_view], axis=0)
            z_full = np.concatenate([es.z, es_v.z], axis=0)
            l_m, dz_full, _ = topo_loss(batch, y_full, z_full, kcfg, cfg.alpha)
            losses[name] = l_m
            dz_base += dz_full[:n]
            backward_all(params, caches_v, dz=dz_full[n:])

        backward_all(
            params,
            caches,
            dz=dz_base,
            dxhat=cfg.lambda_ * dxhat if cfg.lambda_ > 0 else None,
        )

        total = sum(losses.values()) + cfg.lambda_ * l_rec
        if not np.isfinite(total):
            raise NonFiniteLoss(f"loss became non-finite at epoch {epoch}")
        adam.step(params)
        history.append(
            {
                "epoch": epoch,
                "l_topo_tra": losses["tra"],
                "l_topo_mor": losses.get("mor"),
                "l_recon": l_rec,
                "total": total,
            }
        )

    es_final, _ = forward_all(params, data.tra, data.mor, a_hat)
    for t in (es_final.z, es_final.x_hat):
        if not np.all(np.isfinite(t)):
            raise NonFiniteLoss("final embeddings are not finite")
    state = TrainState(params=params, epoch=cfg.epochs, history=history, notes={"augment_fallbacks": fallbacks})
    return state, es_final
