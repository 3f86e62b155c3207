"""Graph encoders, fusion MLP and linear decoder with explicit backprop.

Forward passes return caches; backward passes accumulate into per-layer
gradient buffers so several views of one epoch can share a single step.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .dataio import RunConfig
from .errors import IoFailure, MissingFile, ShapeMismatch, StaleCache
from .topology import NeighborGraph

CKPT_FORMAT = "topofuse-ckpt-v1"


class Dense:
    """One affine layer plus its gradient buffers."""

    __slots__ = ("w", "b", "gw", "gb")

    def __init__(self, w: np.ndarray, b: np.ndarray):
        self.w = w
        self.b = b
        self.gw = np.zeros_like(w)
        self.gb = np.zeros_like(b)


def _glorot(rng: np.random.Generator, n_in: int, n_out: int) -> Dense:
    lim = np.sqrt(6.0 / (n_in + n_out))
    return Dense(rng.uniform(-lim, lim, size=(n_in, n_out)), np.zeros(n_out))


class ModelParams:
    """All trainable tensors of the fused autoencoder."""

    def __init__(self, gnn_tra, gnn_mor, fusion, decoder, theta, fusion_mode):
        self.gnn_tra = gnn_tra
        self.gnn_mor = gnn_mor
        self.fusion = fusion
        self.decoder = decoder
        self.theta = float(theta)
        self.fusion_mode = fusion_mode

    def named_layers(self):
        for i, layer in enumerate(self.gnn_tra):
            yield f"gnn_tra.{i}", layer
        if self.gnn_mor is not None:
            for i, layer in enumerate(self.gnn_mor):
                yield f"gnn_mor.{i}", layer
        for i, layer in enumerate(self.fusion):
            yield f"fusion.{i}", layer
        for i, layer in enumerate(self.decoder):
            yield f"decoder.{i}", layer

    def zero_grads(self):
        for _, layer in self.named_layers():
            layer.gw[...] = 0.0
            layer.gb[...] = 0.0

    @property
    def has_mor(self) -> bool:
        return self.gnn_mor is not None


def init_params(rng: np.random.Generator, n_genes: int, n_mor: int | None, cfg: RunConfig) -> ModelParams:
    """Glorot-uniform weights, zero biases; draw order is fixed for replay."""
    d = cfg.d_emb
    gnn_tra = [_glorot(rng, n_genes, d), _glorot(rng, d, d)]
    gnn_mor = None
    if n_mor is not None:
        gnn_mor = [_glorot(rng, n_mor, d), _glorot(rng, d, d)]
    fuse_in = 2 * d if (cfg.fusion_mode == "concat" and n_mor is not None) else d
    fusion = []
    for i in range(cfg.n_mlp):
        fusion.append(_glorot(rng, fuse_in if i == 0 else d, d))
    decoder = [_glorot(rng, d, n_genes)]
    return ModelParams(gnn_tra, gnn_mor, fusion, decoder, cfg.theta, cfg.fusion_mode)


def normalized_adjacency(graph: NeighborGraph) -> np.ndarray:
    """D^{-1/2} (A + I) D^{-1/2} with D the degree of A + I."""
    n = graph.n
    a = np.zeros((n, n))
    for i, nbrs in enumerate(graph.neighbors):
        for j in nbrs:
            a[i, j] = 1.0
            a[j, i] = 1.0
    a += np.eye(n)
    dinv = 1.0 / np.sqrt(a.sum(axis=1))
    return a * dinv[:, None] * dinv[None, :]


def _stack_forward(x: np.ndarray, layers, a_hat: np.ndarray | None):
    """Shared forward for GCN stacks (a_hat given) and plain MLPs (a_hat None)."""
    h = x
    acts, aggs, pre = [], [], []
    for li, layer in enumerate(layers):
        if h.shape[1] != layer.w.shape[0]:
            raise ShapeMismatch(
                f"layer {li} expects {layer.w.shape[0]} inputs, got {h.shape[1]}"
            )
        acts.append(h)
        agg = h if a_hat is None else a_hat @ h
        aggs.append(agg)
        a = agg @ layer.w + layer.b
        pre.append(a)
        h = np.maximum(a, 0.0) if li < len(layers) - 1 else a
    cache = {"acts": acts, "aggs": aggs, "pre": pre, "a_hat": a_hat, "n_layers": len(layers)}
    return h, cache


def _stack_backward(dout: np.ndarray, layers, cache) -> np.ndarray:
    if cache.get("n_layers") != len(layers):
        raise StaleCache("cache does not match the current layer stack")
    a_hat = cache["a_hat"]
    g = dout
    dx = None
    for li in reversed(range(len(layers))):
        layer = layers[li]
        if cache["aggs"][li].shape[1] != layer.w.shape[0]:
            raise StaleCache(f"cached activations do not fit layer {li}")
        layer.gw += cache["aggs"][li].T @ g
        layer.gb += g.sum(axis=0)
        dagg = g @ layer.w.T
        dx = dagg if a_hat is None else a_hat.T @ dagg
        if li > 0:
            g = dx * (cache["pre"][li - 1] > 0.0)
    return dx


def gcn_forward(x: np.ndarray, a_hat: np.ndarray, layers):
    """Two (or more) graph convolutions: relu between layers, linear last."""
    if a_hat.shape[0] != x.shape[0]:
        raise ShapeMismatch("adjacency and features disagree on row count")
    return _stack_forward(x, layers, a_hat)


def fuse_forward(y_tra: np.ndarray, y_mor: np.ndarray | None, params: ModelParams):
    """Blend modality embeddings and push them through the fusion MLP."""
    if y_mor is None:
        y = y_tra
        mode = "single"
    elif params.fusion_mode == "concat":
        y = np.concatenate([y_tra, y_mor], axis=1)
        mode = "concat"
    else:
        if y_tra.shape != y_mor.shape:
            raise ShapeMismatch("modality embeddings must share a shape to be summed")
        y = params.theta * y_tra + (1.0 - params.theta) * y_mor
        mode = "sum"
    z, mlp_cache = _stack_forward(y, params.fusion, None)
    cache = {"mode": mode, "theta": params.theta, "mlp": mlp_cache, "d_tra": y_tra.shape[1]}
    return z, cache


def fuse_backward(dz: np.ndarray, params: ModelParams, cache):
    dy = _stack_backward(dz, params.fusion, cache["mlp"])
    mode = cache["mode"]
    if mode == "single":
        return dy, None
    if mode == "concat":
        d = cache["d_tra"]
        return dy[:, :d], dy[:, d:]
    return cache["theta"] * dy, (1.0 - cache["theta"]) * dy


def decode_forward(z: np.ndarray, params: ModelParams):
    return _stack_forward(z, params.decoder, None)


def decode_backward(dxhat: np.ndarray, params: ModelParams, cache) -> np.ndarray:
    return _stack_backward(dxhat, params.decoder, cache)


class EmbeddingSet:
    """Per-spot tensors produced by one full forward pass."""

    __slots__ = ("y_tra", "y_mor", "z", "x_hat")

    def __init__(self, y_tra, y_mor, z, x_hat):
        self.y_tra = y_tra
        self.y_mor = y_mor
        self.z = z
        self.x_hat = x_hat


def forward_all(params: ModelParams, x_tra: np.ndarray, x_mor: np.ndarray | None, a_hat: np.ndarray):
    if params.has_mor != (x_mor is not None):
        raise ShapeMismatch("model and inputs disagree about the morphology modality")
    y_tra, c_tra = gcn_forward(x_tra, a_hat, params.gnn_tra)
    y_mor, c_mor = (None, None)
    if x_mor is not None:
        y_mor, c_mor = gcn_forward(x_mor, a_hat, params.gnn_mor)
    z, c_fuse = fuse_forward(y_tra, y_mor, params)
    x_hat, c_dec = decode_forward(z, params)
    caches = {"tra": c_tra, "mor": c_mor, "fuse": c_fuse, "dec": c_dec}
    return EmbeddingSet(y_tra, y_mor, z, x_hat), caches


def backward_all(
    params: ModelParams,
    caches,
    dz: np.ndarray | None = None,
    dxhat: np.ndarray | None = None,
    dy_tra: np.ndarray | None = None,
    dy_mor: np.ndarray | None = None,
):
    """Accumulate parameter gradients for any mix of upstream signals."""
    z_rows = caches["dec"]["acts"][0].shape
    dz_total = np.zeros(z_rows) if dz is None else dz.copy()
    if dxhat is not None:
        dz_total += decode_backward(dxhat, params, caches["dec"])
    dt, dm = fuse_backward(dz_total, params, caches["fuse"])
    if dy_tra is not None:
        dt = dt + dy_tra
    _stack_backward(dt, params.gnn_tra, caches["tra"])
    if params.has_mor:
        if dm is None:
            dm = np.zeros_like(caches["mor"]["pre"][-1])
        if dy_mor is not None:
            dm = dm + dy_mor
        _stack_backward(dm, params.gnn_mor, caches["mor"])


def dropout_mask(shape: tuple, p: float, rng: np.random.Generator) -> np.ndarray | None:
    """Inverted-dropout multiplier: 0 with probability p, else 1/(1-p)."""
    if p <= 0.0:
        return None
    keep = rng.random(shape) >= p
    return keep / (1.0 - p)


def dropout(x: np.ndarray, p: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted dropout: zero a fraction p, rescale the rest by 1/(1-p)."""
    mask = dropout_mask(x.shape, p, rng)
    return x if mask is None else x * mask


def save_checkpoint(params: ModelParams, path: str):
    tensors = {}
    for name, layer in params.named_layers():
        tensors[name + ".w"] = {"shape": list(layer.w.shape), "data": layer.w.ravel().tolist()}
        tensors[name + ".b"] = {"shape": list(layer.b.shape), "data": layer.b.ravel().tolist()}
    payload = {
        "format": CKPT_FORMAT,
        "theta": params.theta,
        "fusion_mode": params.fusion_mode,
        "n_gnn_tra": len(params.gnn_tra),
        "n_gnn_mor": len(params.gnn_mor) if params.gnn_mor is not None else 0,
        "n_fusion": len(params.fusion),
        "n_decoder": len(params.decoder),
        "tensors": tensors,
    }
    try:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh)
            fh.write("\n")
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e


def load_checkpoint(path: str) -> ModelParams:
    if not os.path.isfile(path):
        raise MissingFile(f"checkpoint not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise IoFailure(f"cannot read checkpoint {path}: {e}") from e
    if payload.get("format") != CKPT_FORMAT:
        raise StaleCache(
            f"checkpoint format {payload.get('format')!r} is not {CKPT_FORMAT!r}"
        )

    def take(group: str, count: int):
        layers = []
        for i in range(count):
            tw = payload["tensors"][f"{group}.{i}.w"]
            tb = payload["tensors"][f"{group}.{i}.b"]
            w = np.asarray(tw["data"], dtype=np.float64).reshape(tw["shape"])
            b = np.asarray(tb["data"], dtype=np.float64).reshape(tb["shape"])
            layers.append(Dense(w, b))
        return layers

    gnn_tra = take("gnn_tra", payload["n_gnn_tra"])
    gnn_mor = take("gnn_mor", payload["n_gnn_mor"]) if payload["n_gnn_mor"] else None
    fusion = take("fusion", payload["n_fusion"])
    decoder = take("decoder", payload["n_decoder"])
    return ModelParams(gnn_tra, gnn_mor, fusion, decoder, payload["theta"], payload["fusion_mode"])
