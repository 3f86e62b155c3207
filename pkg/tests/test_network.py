import numpy as np
import pytest

from topofuse import dataio, network, topology
from topofuse.errors import IoFailure, MissingFile, ShapeMismatch, StaleCache


def _cfg(**kv):
    base = dict(d_emb=4, n_mlp=1, tau=1)
    base.update(kv)
    return dataio.RunConfig().replace(**base)


def _graph_line(n):
    coords = np.column_stack([np.arange(float(n)), np.zeros(n)])
    return topology.build_spatial_graph(coords, 1.0)


class TestNormalizedAdjacency:
    def test_path_graph_hand_values(self):
        a_hat = network.normalized_adjacency(_graph_line(3))
        # degrees of A + I are [2, 3, 2]
        s6 = 1.0 / np.sqrt(6.0)
        expected = np.array([[0.5, s6, 0.0], [s6, 1.0 / 3.0, s6], [0.0, s6, 0.5]])
        assert np.allclose(a_hat, expected, atol=1e-15)

    def test_symmetric_with_unit_spectral_radius(self, rng):
        coords = rng.uniform(0, 4, size=(20, 2))
        a_hat = network.normalized_adjacency(topology.build_spatial_graph(coords, 1.5))
        assert np.array_equal(a_hat, a_hat.T)
        evals = np.linalg.eigvalsh(a_hat)
        assert evals.max() <= 1.0 + 1e-12

    def test_regular_graph_rows_sum_to_one(self):
        # 4-cycle: every node has degree 2, so A + I is 3-regular
        g = topology.NeighborGraph(
            n=4, neighbors=[(1, 3), (0, 2), (1, 3), (0, 2)], kind="spatial_eps"
        )
        a_hat = network.normalized_adjacency(g)
        assert np.allclose(a_hat.sum(axis=1), 1.0, atol=1e-15)


class TestInitParams:
    def test_shapes_sum_mode(self, rng):
        cfg = _cfg(n_mlp=2)
        p = network.init_params(rng, 7, 3, cfg)
        assert [l.w.shape for l in p.gnn_tra] == [(7, 4), (4, 4)]
        assert [l.w.shape for l in p.gnn_mor] == [(3, 4), (4, 4)]
        assert [l.w.shape for l in p.fusion] == [(4, 4), (4, 4)]
        assert [l.w.shape for l in p.decoder] == [(4, 7)]
        assert p.theta == cfg.theta and p.fusion_mode == "sum" and p.has_mor

    def test_shapes_concat_mode(self, rng):
        p = network.init_params(rng, 5, 2, _cfg(fusion_mode="concat"))
        assert p.fusion[0].w.shape == (8, 4)

    def test_no_mor(self, rng):
        p = network.init_params(rng, 5, None, _cfg())
        assert p.gnn_mor is None and not p.has_mor
        assert p.fusion[0].w.shape == (4, 4)

    def test_glorot_bounds_and_zero_bias(self, rng):
        p = network.init_params(rng, 9, 4, _cfg())
        for _, layer in p.named_layers():
            fan_in, fan_out = layer.w.shape
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            assert np.abs(layer.w).max() <= limit
            assert np.array_equal(layer.b, np.zeros(fan_out))


class TestForward:
    def test_matches_manual_relu_stack(self, rng):
        n, g, m = 5, 6, 3
        cfg = _cfg(n_mlp=2, theta=0.7)
        params = network.init_params(rng, g, m, cfg)
        x_tra = rng.normal(size=(n, g))
        x_mor = rng.normal(size=(n, m))
        a_hat = network.normalized_adjacency(_graph_line(n))
        es, _ = network.forward_all(params, x_tra, x_mor, a_hat)

        def stack(x, layers, use_graph):
            h = x
            for li, layer in enumerate(layers):
                agg = a_hat @ h if use_graph else h
                h = agg @ layer.w + layer.b
                if li < len(layers) - 1:
                    h = np.maximum(h, 0.0)
            return h

        y_tra = stack(x_tra, params.gnn_tra, True)
        y_mor = stack(x_mor, params.gnn_mor, True)
        z = stack(0.7 * y_tra + (1.0 - 0.7) * y_mor, params.fusion, False)
        x_hat = stack(z, params.decoder, False)
        assert np.array_equal(es.y_tra, y_tra)
        assert np.array_equal(es.y_mor, y_mor)
        assert np.array_equal(es.z, z)
        assert np.array_equal(es.x_hat, x_hat)

    def test_identity_fusion_layer_exposes_theta_blend(self, rng):
        d = 3
        y_tra = rng.normal(size=(4, d))
        y_mor = rng.normal(size=(4, d))
        params = network.ModelParams(
            gnn_tra=[],
            gnn_mor=[],
            fusion=[network.Dense(np.eye(d), np.zeros(d))],
            decoder=[],
            theta=0.25,
            fusion_mode="sum",
        )
        z, _ = network.fuse_forward(y_tra, y_mor, params)
        assert np.allclose(z, 0.25 * y_tra + 0.75 * y_mor, atol=1e-15)

    def test_concat_fusion_shapes_and_backward_split(self, rng):
        n, d = 4, 3
        params = network.ModelParams(
            gnn_tra=[],
            gnn_mor=[],
            fusion=[network.Dense(rng.normal(size=(2 * d, d)), np.zeros(d))],
            decoder=[],
            theta=0.9,
            fusion_mode="concat",
        )
        y_tra = rng.normal(size=(n, d))
        y_mor = rng.normal(size=(n, d))
        z, cache = network.fuse_forward(y_tra, y_mor, params)
        assert z.shape == (n, d)
        dt, dm = network.fuse_backward(rng.normal(size=(n, d)), params, cache)
        assert dt.shape == (n, d) and dm.shape == (n, d)

    def test_modality_mismatch_raises(self, rng):
        params = network.init_params(rng, 5, None, _cfg())
        a_hat = network.normalized_adjacency(_graph_line(3))
        with pytest.raises(ShapeMismatch):
            network.forward_all(params, np.zeros((3, 5)), np.zeros((3, 2)), a_hat)
        params2 = network.init_params(rng, 5, 2, _cfg())
        with pytest.raises(ShapeMismatch):
            network.forward_all(params2, np.zeros((3, 5)), None, a_hat)

    def test_wrong_feature_width_raises(self, rng):
        params = network.init_params(rng, 5, None, _cfg())
        a_hat = network.normalized_adjacency(_graph_line(3))
        with pytest.raises(ShapeMismatch):
            network.forward_all(params, np.zeros((3, 4)), None, a_hat)


class TestBackward:
    def test_all_upstream_paths_match_finite_differences(self, rng):
        n, g, m = 5, 4, 3
        cfg = _cfg(n_mlp=2, d_emb=3)
        params = network.init_params(rng, g, m, cfg)
        x_tra = rng.normal(size=(n, g))
        x_mor = rng.normal(size=(n, m))
        a_hat = network.normalized_adjacency(_graph_line(n))
        r_z = rng.normal(size=(n, 3))
        r_xh = rng.normal(size=(n, g))
        r_yt = rng.normal(size=(n, 3))
        r_ym = rng.normal(size=(n, 3))

        def scalar_loss(p):
            es, _ = network.forward_all(p, x_tra, x_mor, a_hat)
            return float(
                (es.z * r_z).sum()
                + (es.x_hat * r_xh).sum()
                + (es.y_tra * r_yt).sum()
                + (es.y_mor * r_ym).sum()
            )

        params.zero_grads()
        _, caches = network.forward_all(params, x_tra, x_mor, a_hat)
        network.backward_all(params, caches, dz=r_z, dxhat=r_xh, dy_tra=r_yt, dy_mor=r_ym)

        h = 1e-5
        worst = 0.0
        for _, layer in params.named_layers():
            for arr, grad in ((layer.w, layer.gw), (layer.b, layer.gb)):
                it = np.nditer(arr, flags=["multi_index"])
                for _ in it:
                    idx = it.multi_index
                    old = arr[idx]
                    arr[idx] = old + h
                    fp = scalar_loss(params)
                    arr[idx] = old - h
                    fm = scalar_loss(params)
                    arr[idx] = old
                    fd = (fp - fm) / (2 * h)
                    worst = max(worst, abs(grad[idx] - fd) / max(1.0, abs(fd)))
        assert worst < 1e-6

    def test_grads_accumulate_until_zeroed(self, rng):
        params = network.init_params(rng, 4, None, _cfg())
        x = rng.normal(size=(3, 4))
        a_hat = network.normalized_adjacency(_graph_line(3))
        _, caches = network.forward_all(params, x, None, a_hat)
        dz = rng.normal(size=(3, 4))
        network.backward_all(params, caches, dz=dz)
        once = params.decoder[0].gw.copy()
        network.backward_all(params, caches, dz=dz)
        assert np.allclose(params.decoder[0].gw, 2.0 * once, atol=1e-12)
        params.zero_grads()
        assert np.array_equal(params.decoder[0].gw, np.zeros_like(once))

    def test_stale_cache_rejected(self, rng):
        params = network.init_params(rng, 4, None, _cfg(n_mlp=2))
        x = rng.normal(size=(3, 4))
        a_hat = network.normalized_adjacency(_graph_line(3))
        _, caches = network.forward_all(params, x, None, a_hat)
        params.fusion.pop()
        with pytest.raises(StaleCache):
            network.backward_all(params, caches, dz=np.zeros((3, 4)))


class TestDropout:
    def test_zero_rate_is_identity(self, rng):
        assert network.dropout_mask((3, 3), 0.0, rng) is None
        x = rng.normal(size=(3, 3))
        assert network.dropout(x, 0.0, rng) is x

    def test_mask_values_and_rate(self):
        rng = np.random.default_rng(0)
        mask = network.dropout_mask((200, 50), 0.1, rng)
        vals = np.unique(mask)
        assert set(np.round(vals, 12)) <= {0.0, round(1.0 / 0.9, 12)}
        drop_rate = (mask == 0).mean()
        assert 0.07 < drop_rate < 0.13

    def test_dropout_applies_mask(self):
        x = np.ones((50, 20))
        out = network.dropout(x, 0.25, np.random.default_rng(3))
        assert set(np.round(np.unique(out), 12)) <= {0.0, round(1.0 / 0.75, 12)}


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path, rng):
        params = network.init_params(rng, 6, 3, _cfg(n_mlp=2, fusion_mode="concat"))
        path = tmp_path / "ckpt.json"
        network.save_checkpoint(params, str(path))
        back = network.load_checkpoint(str(path))
        assert back.theta == params.theta and back.fusion_mode == "concat"
        orig = dict(params.named_layers())
        loaded = dict(back.named_layers())
        assert orig.keys() == loaded.keys()
        for name in orig:
            assert np.array_equal(orig[name].w, loaded[name].w)
            assert np.array_equal(orig[name].b, loaded[name].b)

    def test_loaded_params_reproduce_forward(self, tmp_path, rng):
        params = network.init_params(rng, 5, None, _cfg())
        x = rng.normal(size=(4, 5))
        a_hat = network.normalized_adjacency(_graph_line(4))
        es, _ = network.forward_all(params, x, None, a_hat)
        path = tmp_path / "ckpt.json"
        network.save_checkpoint(params, str(path))
        es2, _ = network.forward_all(network.load_checkpoint(str(path)), x, None, a_hat)
        assert np.array_equal(es.z, es2.z) and np.array_equal(es.x_hat, es2.x_hat)

    def test_load_errors(self, tmp_path):
        with pytest.raises(MissingFile):
            network.load_checkpoint(str(tmp_path / "none.json"))
        bad = tmp_path / "bad.json"
        bad.write_text('{"format": "other-format"}')
        with pytest.raises(StaleCache):
            network.load_checkpoint(str(bad))
        broken = tmp_path / "broken.json"
        broken.write_text("{not json")
        with pytest.raises(IoFailure):
            network.load_checkpoint(str(broken))
