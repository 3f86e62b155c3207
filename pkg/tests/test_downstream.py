import numpy as np
import pytest

from topofuse import dataio, downstream, network, preprocess, topology
from topofuse.errors import (
    DegenerateComponent,
    LengthMismatch,
    NegativeSum,
    NonConvergenceWarning,
    OutOfRange,
    ShapeMismatch,
)

from _oracles import undirected_knn_edges


def _blobs(rng, centers, per=20, scale=0.3):
    parts, labels = [], []
    for c, center in enumerate(centers):
        parts.append(rng.normal(scale=scale, size=(per, len(center))) + np.asarray(center))
        labels.extend([c] * per)
    return np.vstack(parts), np.asarray(labels)


class TestEmFit:
    def test_loglik_monotone_and_ok(self, rng):
        z, _ = _blobs(rng, [(0.0, 0.0), (6.0, 0.0), (0.0, 6.0)], per=15)
        means0 = z[rng.choice(len(z), size=3, replace=False)]
        res = downstream.em_fit(z, 3, means0)
        assert res.ok
        hist = res.history
        assert all(b >= a - 1e-9 for a, b in zip(hist, hist[1:]))
        assert res.weights.sum() == pytest.approx(1.0, abs=1e-12)
        assert res.resp.shape == (len(z), 3)

    def test_collapsed_component_flagged(self, rng):
        z, _ = _blobs(rng, [(0.0, 0.0)], per=20)
        means0 = np.array([[0.0, 0.0], [1e8, 1e8]])
        res = downstream.em_fit(z, 2, means0)
        assert not res.ok

    def test_decreasing_history_rejected(self):
        with pytest.raises(DegenerateComponent):
            downstream.ClusterModel(
                k=1,
                means=np.zeros((1, 2)),
                covariances=np.ones((1, 2)),
                weights=np.ones(1),
                labels=np.zeros(3, dtype=np.int64),
                loglik_history=[0.0, -1.0],
            )


class TestGmmCluster:
    def test_separated_blobs_recovered(self, rng):
        z, truth = _blobs(rng, [(0.0, 0.0), (10.0, 0.0)], per=25)
        model = downstream.gmm_cluster(z, 2, rng=np.random.default_rng(1))
        first, second = model.labels[:25], model.labels[25:]
        assert len(set(first.tolist())) == 1
        assert len(set(second.tolist())) == 1
        assert first[0] != second[0]
        assert model.weights.sum() == pytest.approx(1.0, abs=1e-12)
        assert np.all(model.covariances >= downstream.GMM_RIDGE)

    def test_deterministic_given_rng(self, rng):
        z, _ = _blobs(rng, [(0.0, 0.0), (5.0, 5.0)], per=15)
        a = downstream.gmm_cluster(z, 2, rng=np.random.default_rng(7))
        b = downstream.gmm_cluster(z, 2, rng=np.random.default_rng(7))
        assert np.array_equal(a.labels, b.labels)
        assert np.array_equal(a.means, b.means)

    def test_bounds(self, rng):
        z = rng.normal(size=(3, 2))
        with pytest.raises(OutOfRange):
            downstream.gmm_cluster(z, 4)
        with pytest.raises(OutOfRange):
            downstream.gmm_cluster(z, 0)


class TestRefineLabels:
    def test_lone_dissenter_flips(self):
        angles = np.linspace(0.0, 2 * np.pi, 6, endpoint=False)
        coords = np.vstack([[0.0, 0.0], np.column_stack([np.cos(angles), np.sin(angles)])])
        labels = np.array([1, 0, 0, 0, 0, 0, 0])
        refined = downstream.refine_labels(labels, coords)
        assert np.array_equal(refined, np.zeros(7, dtype=labels.dtype))

    def test_tie_keeps_original(self):
        coords = np.array([[0.0], [1.0]])
        labels = np.array([0, 1])
        assert np.array_equal(downstream.refine_labels(labels, coords), labels)

    def test_majority_block_is_stable(self, rng):
        coords = rng.uniform(0, 3, size=(20, 2))
        labels = np.zeros(20, dtype=np.int64)
        assert np.array_equal(downstream.refine_labels(labels, coords), labels)

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            downstream.refine_labels(np.zeros(3), np.zeros((4, 2)))


class TestDeconvolve:
    def test_pure_spots_get_pure_weights(self, rng):
        centers = np.array([[4.0, 0.0, 0.0], [0.0, 4.0, 0.0], [0.0, 0.0, 4.0]])
        labels = np.repeat([0, 1, 2], 10)
        z = centers[labels]
        res = downstream.deconvolve(z, labels, l1=0.0)
        assert res.converged and res.kkt < downstream.LASSO_KKT_TOL
        assert np.array_equal(res.weights.argmax(axis=1), labels)
        assert np.allclose(res.weights.max(axis=1), 1.0, atol=1e-9)

    def test_impurity_is_weight_row_std(self, rng):
        z, labels = _blobs(rng, [(0.0, 0.0), (5.0, 0.0)], per=12)
        res = downstream.deconvolve(z, labels, l1=0.05)
        assert np.array_equal(res.impurity, res.weights.std(axis=1))

    def test_zero_norm_basis_column_stays_inactive(self):
        z = np.array([[1.0, 1.0], [-1.0, -1.0], [5.0, 5.0], [5.0, 5.0]])
        labels = np.array([0, 0, 1, 1])
        res = downstream.deconvolve(z, labels, l1=0.1)
        assert np.array_equal(res.weights[:, 0], np.zeros(4))

    def test_sweep_cap_warns(self, rng, monkeypatch):
        monkeypatch.setattr(downstream, "LASSO_MAX_SWEEPS", 1)
        base = rng.normal(size=(30, 4))
        z = np.hstack([base, base * 0.98 + rng.normal(scale=0.01, size=(30, 4))])
        labels = rng.integers(0, 3, size=30)
        with pytest.warns(NonConvergenceWarning):
            res = downstream.deconvolve(z, labels, l1=0.2)
        assert not res.converged

    def test_bounds(self, rng):
        z = rng.normal(size=(6, 2))
        with pytest.raises(OutOfRange):
            downstream.deconvolve(z, np.zeros(6), l1=-0.1)
        with pytest.raises(LengthMismatch):
            downstream.deconvolve(z, np.zeros(5), l1=0.1)


def _marker_setup(rng, n=18, g=5):
    tra = rng.normal(size=(n, g))
    tra[:, 2] = 0.0
    pre = preprocess.PreprocessedData(
        tra=tra,
        gene_ids=[f"g{i:04d}" for i in range(g)],
        gene_means=np.zeros(g),
        gene_stds=np.ones(g),
    )
    coords = np.column_stack([np.arange(n) % 6, np.arange(n) // 6]).astype(np.float64)
    graph = topology.build_spatial_graph(coords, 1.0)
    params = network.init_params(rng, g, None, dataio.RunConfig().replace(d_emb=4, n_mlp=1))
    labels = (np.arange(n) >= n // 2).astype(np.int64)
    return pre, graph, params, labels


class TestMarkers:
    def test_table_structure(self, rng):
        pre, graph, params, labels = _marker_setup(rng)
        tables = downstream.marker_tables(pre, params, graph, labels, top_n=3)
        assert sorted(tables) == [0, 1]
        for rows in tables.values():
            assert len(rows) == 3
            assert all(gene in pre.gene_ids for gene, _ in rows)
            imps = [imp for _, imp in rows]
            assert imps == sorted(imps, reverse=True)
            assert all(isinstance(v, float) for v in imps)

    def test_top_n_clamped_to_gene_count(self, rng):
        pre, graph, params, labels = _marker_setup(rng)
        tables = downstream.marker_tables(pre, params, graph, labels, top_n=99)
        assert all(len(rows) == 5 for rows in tables.values())

    def test_zeroed_gene_has_zero_shift(self, rng):
        pre, graph, params, _ = _marker_setup(rng)
        shifts = downstream.gene_shift_matrix(params, pre, graph)
        assert shifts.shape == pre.tra.shape
        assert np.array_equal(shifts[:, 2], np.zeros(pre.n_spots))
        assert np.all(shifts >= 0.0)

    def test_single_cluster_lookup(self, rng):
        pre, graph, params, labels = _marker_setup(rng)
        rows = downstream.marker_importance(pre, params, graph, labels, cluster=1, top_n=2)
        assert rows == downstream.marker_tables(pre, params, graph, labels, top_n=2)[1]
        with pytest.raises(OutOfRange):
            downstream.marker_importance(pre, params, graph, labels, cluster=9)

    def test_label_length_checked(self, rng):
        pre, graph, params, _ = _marker_setup(rng)
        with pytest.raises(LengthMismatch):
            downstream.marker_tables(pre, params, graph, np.zeros(3))


class TestPaga:
    def test_matches_edge_counting_oracle(self, rng):
        z, labels = _blobs(rng, [(0.0, 0.0), (3.0, 0.0), (6.0, 0.0)], per=12)
        k = 5
        graph = downstream.paga_connectivity(z, labels, k=k)
        pairs = undirected_knn_edges(z, k)
        total = len(pairs)
        sizes = {c: int((labels == c).sum()) for c in (0, 1, 2)}
        possible = len(z) * (len(z) - 1) / 2.0
        for ai in range(3):
            for bi in range(ai + 1, 3):
                observed = sum(
                    1
                    for i, j in pairs
                    if {int(labels[i]), int(labels[j])} == {ai, bi}
                )
                expected = total * sizes[ai] * sizes[bi] / possible
                want = min(1.0, observed / expected)
                assert graph.connectivity[ai, bi] == pytest.approx(want, abs=1e-12)

    def test_chain_geometry_orders_connectivity(self):
        # clusters 0 and 1 interleave on a line; cluster 2 sits far away
        near = np.arange(30.0)[:, None]
        far = 1000.0 + np.arange(10.0)[:, None]
        z = np.vstack([near, far])
        labels = np.concatenate([np.arange(30) % 2, np.full(10, 2)])
        conn = downstream.paga_connectivity(z, labels, k=4).connectivity
        assert conn[0, 1] > conn[0, 2]
        assert conn[0, 2] == 0.0

    def test_bounds(self, rng):
        z = rng.normal(size=(8, 2))
        with pytest.raises(OutOfRange):
            downstream.paga_connectivity(z, np.zeros(8))
        with pytest.raises(LengthMismatch):
            downstream.paga_connectivity(z, np.zeros(5))

    def test_graph_validation(self):
        with pytest.raises(ShapeMismatch):
            downstream.PagaGraph(cluster_ids=[0, 1], connectivity=np.array([[0.0, 0.5], [0.4, 0.0]]))
        with pytest.raises(OutOfRange):
            downstream.PagaGraph(cluster_ids=[0, 1], connectivity=np.array([[0.0, 1.5], [1.5, 0.0]]))


class TestDenoise:
    def test_equals_clean_forward_pass(self, rng):
        pre, graph, params, _ = _marker_setup(rng)
        out = downstream.denoise(params, pre, graph)
        a_hat = network.normalized_adjacency(graph)
        es, _ = network.forward_all(params, pre.tra, pre.mor, a_hat)
        assert np.array_equal(out, es.x_hat)


class TestRegionStatistic:
    def test_hand_values(self):
        x = np.array([[10.0, 6.0], [8.0, 8.0], [1.0, 0.0]])
        out = downstream.region_statistic(x, np.array([0, 0, 1]))
        assert np.array_equal(out, np.array([2.0, 2.0, 1.0]))

    def test_negative_sum_names_the_spot(self):
        with pytest.raises(NegativeSum, match="spot 1"):
            downstream.region_statistic(np.array([[1.0], [-2.0]]), np.array([0, 0]))

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            downstream.region_statistic(np.zeros((3, 2)), np.zeros(2))


class TestVisualization:
    def test_shape_and_determinism(self, rng):
        z, _ = _blobs(rng, [(0.0, 0.0, 0.0), (6.0, 0.0, 0.0)], per=12)
        cfg = dataio.RunConfig().replace(seed=9)
        a = downstream.fit_visualization(z, cfg)
        b = downstream.fit_visualization(z, cfg)
        assert a.shape == (24, 2)
        assert np.all(np.isfinite(a))
        assert np.array_equal(a, b)
