import math

import numpy as np
import pytest

from infoigl import tensorgrad as tg
from infoigl.encoder import (BatchPlan, EncoderConfig, GinLayer, encode,
                             encode_graphs, edge_attention, init_encoder,
                             message_passing, node_attention, readout)
from infoigl.graphs import Graph, make_batch

from oracles import (dense_gin_forward, directional_diff, edge_attention_oracle,
                     node_attention_oracle, readout_oracle, rel_err)


def _graph(n, edges, d=4, seed=0, nonneg=False):
    rng = np.random.default_rng(seed)
    feats = rng.normal(size=(n, d))
    if nonneg:
        feats = np.abs(feats)
    return Graph(n, feats, np.array(edges).reshape(-1, 2), label=0, env_id="e")


def _identity_params(d):
    cfg = EncoderConfig(d_in=d, emb_dim=d, layers=1, dropout=0.0)
    rng = np.random.default_rng(0)
    params = init_encoder(cfg, rng)
    eye = np.eye(d)
    params.gin = [GinLayer(w1=tg.parameter(eye.copy()), b1=tg.parameter(np.zeros(d)),
                           w2=tg.parameter(eye.copy()), b2=tg.parameter(np.zeros(d)),
                           eps=tg.parameter(np.zeros(())))]
    return params


def test_gin_isolated_node_identity():
    # identity MLP and non-negative input make the internal ReLU transparent
    g = Graph(1, np.array([[0.5, 1.5]]), np.zeros((0, 2)), label=0, env_id="e")
    plan = BatchPlan(make_batch([g]))
    h = message_passing(plan, _identity_params(2))
    np.testing.assert_allclose(h.data, [[0.5, 1.5]], atol=1e-15)


def test_gin_two_mutually_connected_nodes():
    g = Graph(2, np.array([[1.0, 0.0], [0.0, 1.0]]),
              np.array([[0, 1], [1, 0]]), label=0, env_id="e")
    plan = BatchPlan(make_batch([g]))
    h = message_passing(plan, _identity_params(2))
    np.testing.assert_allclose(h.data, [[1.0, 1.0], [1.0, 1.0]], atol=1e-15)


def _random_setup(seed, n=6, d=5, layers=2, extra_edges=8):
    rng = np.random.default_rng(seed)
    edges = []
    for _ in range(extra_edges):
        u, v = rng.integers(0, n, size=2)
        if u != v:
            edges.append((int(u), int(v)))
    edges = sorted(set(edges))
    g = _graph(n, edges, d=d, seed=seed + 1)
    cfg = EncoderConfig(d_in=d, emb_dim=d, layers=layers, dropout=0.0)
    params = init_encoder(cfg, np.random.default_rng(seed + 2))
    return g, params


def test_gin_matches_dense_oracle_many_instances():
    for seed in range(50):
        g, params = _random_setup(seed)
        plan = BatchPlan(make_batch([g]))
        h = message_passing(plan, params)
        layers = [(l.w1.data, l.b1.data, l.w2.data, l.b2.data, float(l.eps.data))
                  for l in params.gin]
        expected = dense_gin_forward(g.node_features, [tuple(e) for e in g.edges],
                                     layers)
        assert rel_err(h.data, expected) < 1e-10
        np.testing.assert_allclose(h.data, expected, atol=1e-10, rtol=1e-10)


def test_node_attention_single_node_graph():
    g = _graph(1, [], d=3, seed=4)
    cfg = EncoderConfig(d_in=3, emb_dim=3, layers=1, dropout=0.0)
    params = init_encoder(cfg, np.random.default_rng(5))
    plan = BatchPlan(make_batch([g]))
    h = tg.constant(g.node_features)
    alpha = node_attention(plan, h, params)
    # softmax of a singleton row is [[1]], so attended == V row
    v_row = g.node_features @ params.wv.data
    expected = 1.0 / (1.0 + np.exp(-(v_row @ params.score_w.data + params.score_b.data)))
    np.testing.assert_allclose(alpha.data, expected, atol=1e-12)


def test_node_attention_identical_nodes_equal_scores():
    feats = np.tile(np.array([[0.3, -0.2, 0.9]]), (4, 1))
    g = Graph(4, feats, np.array([[0, 1], [1, 0]]), label=0, env_id="e")
    cfg = EncoderConfig(d_in=3, emb_dim=3, layers=1, dropout=0.0)
    params = init_encoder(cfg, np.random.default_rng(6))
    plan = BatchPlan(make_batch([g]))
    alpha = node_attention(plan, tg.constant(feats), params)
    assert np.ptp(alpha.data) < 1e-12


def test_node_attention_matches_scalar_oracle():
    for seed in range(50):
        g, params = _random_setup(seed, n=3, d=4, layers=1)
        plan = BatchPlan(make_batch([g]))
        h = tg.constant(g.node_features)
        alpha = node_attention(plan, h, params)
        expected = node_attention_oracle(g.node_features, params.wq.data,
                                         params.wk.data, params.wv.data,
                                         params.score_w.data, params.score_b.data)
        assert rel_err(alpha.data.ravel(), expected) < 1e-10


def test_edge_attention_single_incoming_edge():
    g = _graph(2, [(0, 1)], d=3, seed=7)
    cfg = EncoderConfig(d_in=3, emb_dim=3, layers=1, dropout=0.0)
    params = init_encoder(cfg, np.random.default_rng(8))
    plan = BatchPlan(make_batch([g]))
    alpha = edge_attention(plan, tg.constant(g.node_features), params)
    # softmax singleton = 1, in-degree rescale = 1, sigmoid(1) = 0.7311
    assert alpha.data.ravel()[0] == pytest.approx(1.0 / (1.0 + math.exp(-1.0)), abs=1e-12)
    assert alpha.data.ravel()[0] == pytest.approx(0.7311, abs=1e-4)


def test_edge_attention_equal_raw_scores_equal_results():
    # two sources with identical features feeding one destination
    feats = np.array([[1.0, 0.5], [1.0, 0.5], [0.2, -0.3]])
    g = Graph(3, feats, np.array([[0, 2], [1, 2]]), label=0, env_id="e")
    cfg = EncoderConfig(d_in=2, emb_dim=2, layers=1, dropout=0.0)
    params = init_encoder(cfg, np.random.default_rng(9))
    plan = BatchPlan(make_batch([g]))
    alpha = edge_attention(plan, tg.constant(feats), params).data.ravel()
    assert alpha[0] == pytest.approx(alpha[1], abs=1e-14)
    # each softmax term is 0.5, rescaled by in-degree 2 to 1.0
    assert alpha[0] == pytest.approx(1.0 / (1.0 + math.exp(-1.0)), abs=1e-12)


def test_edge_attention_matches_scalar_oracle_star():
    for seed in range(50):
        edges = [(1, 0), (2, 0), (3, 0), (4, 0)]
        g = _graph(5, edges, d=4, seed=seed)
        cfg = EncoderConfig(d_in=4, emb_dim=4, layers=1, dropout=0.0)
        params = init_encoder(cfg, np.random.default_rng(seed + 100))
        plan = BatchPlan(make_batch([g]))
        alpha = encode_sorted_scores(plan, g, params)
        expected = edge_attention_oracle(
            g.node_features, edges, params.edge_w1.data, params.edge_b1.data,
            params.edge_w2.data, params.edge_b2.data)
        assert rel_err(alpha, expected) < 1e-10


def encode_sorted_scores(plan, g, params):
    scores_sorted = edge_attention(plan, tg.constant(g.node_features), params)
    return scores_sorted.data.ravel()[plan.edge_unsort]


def test_readout_annihilation_and_identity():
    g = _graph(1, [], d=3, seed=11, nonneg=True)
    cfg = EncoderConfig(d_in=3, emb_dim=3, layers=1, dropout=0.0)
    params = init_encoder(cfg, np.random.default_rng(12))
    # map that keeps the node-mean half: [I; 0]
    params.readout_w = tg.parameter(np.vstack([np.eye(3), np.zeros((3, 3))]))
    plan = BatchPlan(make_batch([g]))
    h = tg.constant(g.node_features)
    ones = tg.constant(np.ones((1, 1)))
    empty = tg.constant(np.zeros((0, 1)))
    out = readout(plan, h, ones, empty, params)
    np.testing.assert_allclose(out.data, g.node_features, atol=1e-14)
    zeros = tg.constant(np.zeros((1, 1)))
    out0 = readout(plan, h, zeros, empty, params)
    np.testing.assert_allclose(out0.data, np.zeros((1, 3)), atol=1e-15)


def test_readout_matches_scalar_oracle():
    for seed in range(50):
        g, params = _random_setup(seed, n=5, d=4, layers=1)
        plan = BatchPlan(make_batch([g]))
        enc = encode(plan, params)
        expected = readout_oracle(
            enc.h.data, enc.node_scores.data.ravel(),
            enc.per_graph_edge_scores(0), [tuple(e) for e in g.edges],
            params.readout_w.data)
        assert rel_err(enc.h_graph.data.ravel(), expected) < 1e-10


def test_scores_strictly_in_unit_interval():
    for seed in range(10):
        g, params = _random_setup(seed, n=7, d=5, layers=2)
        enc = encode_graphs([g], params)
        assert (enc.node_scores.data > 0).all() and (enc.node_scores.data < 1).all()
        assert (enc.edge_scores.data > 0).all() and (enc.edge_scores.data < 1).all()


def test_permutation_invariance_of_graph_embedding():
    rng = np.random.default_rng(21)
    for seed in range(10):
        g, params = _random_setup(seed, n=6, d=4, layers=2)
        perm = rng.permutation(g.num_nodes)
        inv = np.argsort(perm)
        permuted = Graph(g.num_nodes, g.node_features[perm],
                         np.stack([inv[g.edges[:, 0]], inv[g.edges[:, 1]]], axis=1),
                         label=g.label, env_id=g.env_id)
        h1 = encode_graphs([g], params).h_graph.data
        h2 = encode_graphs([permuted], params).h_graph.data
        assert np.abs(h1 - h2).max() <= 1e-9


def test_batch_independence():
    g1, params = _random_setup(31, n=6, d=4, layers=2)
    g2, _ = _random_setup(32, n=4, d=4, layers=2)
    g3, _ = _random_setup(33, n=6, d=4, layers=2)
    alone = encode_graphs([g2], params).h_graph.data
    batched = encode_graphs([g1, g2, g3], params)
    assert np.abs(batched.h_graph.data[1] - alone[0]).max() <= 1e-10
    # shuffled batch gives the same set of embeddings
    shuffled = encode_graphs([g3, g1, g2], params).h_graph.data
    a = np.sort(batched.h_graph.data, axis=0)
    b = np.sort(shuffled, axis=0)
    np.testing.assert_allclose(a, b, atol=1e-10)


def test_edgeless_graph_readout_node_term_only():
    g = Graph(3, np.abs(np.random.default_rng(0).normal(size=(3, 4))),
              np.zeros((0, 2)), label=0, env_id="e")
    cfg = EncoderConfig(d_in=4, emb_dim=4, layers=1, dropout=0.0)
    params = init_encoder(cfg, np.random.default_rng(1))
    enc = encode_graphs([g], params)
    assert enc.edge_scores.data.shape[0] == 0
    assert np.isfinite(enc.h_graph.data).all()


def test_encoder_gradients_match_finite_differences():
    g, params = _random_setup(41, n=5, d=4, layers=2)
    plan = BatchPlan(make_batch([g]))
    named = params.named_parameters()
    coef = np.random.default_rng(42).normal(size=(1, 4))

    def loss_value():
        enc = encode(plan, params)
        return tg.tsum(tg.mul(enc.h_graph, tg.constant(coef)))

    for p in named.values():
        p.zero_grad()
    tg.backward(loss_value())

    rng = np.random.default_rng(43)
    for name, p in named.items():
        v = rng.normal(size=p.shape)
        v /= max(np.linalg.norm(v), 1e-12)
        base = p.data.copy()

        def f(arr):
            p.data = arr
            with tg.no_grad():
                val = loss_value().item()
            p.data = base
            return val

        fd = directional_diff(f, base, v)
        analytic = float(np.sum(p.grad * v))
        denom = max(abs(fd), abs(analytic), 1e-6)
        assert abs(fd - analytic) / denom <= 1e-4, name


def test_gcn_and_gat_backbones_train_one_step():
    for backbone in ("gcn", "gat"):
        g, _ = _random_setup(51, n=6, d=4, layers=2)
        cfg = EncoderConfig(d_in=4, emb_dim=4, layers=2, backbone=backbone,
                            dropout=0.0)
        params = init_encoder(cfg, np.random.default_rng(52))
        named = params.named_parameters()
        for p in named.values():
            p.zero_grad()
        enc = encode_graphs([g], params)
        tg.backward(tg.tsum(tg.mul(enc.h_graph, enc.h_graph)))
        state = tg.AdamState(named)
        tg.adam_step(named, state, lr=1e-3)
        assert np.isfinite(enc.h_graph.data).all()


def test_feature_width_mismatch_raises():
    g = _graph(3, [(0, 1), (1, 0)], d=5)
    cfg = EncoderConfig(d_in=4, emb_dim=4, layers=1, dropout=0.0)
    params = init_encoder(cfg, np.random.default_rng(0))
    with pytest.raises(tg.ShapeError):
        encode_graphs([g], params)
