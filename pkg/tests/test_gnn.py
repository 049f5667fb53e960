import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from windgat.autodiff import DegenerateNeighborhoodError, Tape, Tensor, grad_check, ops
from windgat.gnn import (
    SITES,
    AttentionHead,
    AttentionWeights,
    GraphBlock,
    GraphBlockConfig,
    GraphNetwork,
    NoAttentionError,
    attn_scores,
    graph_model,
    preset_blocks,
)
from windgat.graphs import GraphBatch, WindGraph, build_graph
from windgat.wakesim import FarmScenario, Turbine, generate_layouts

T = Turbine(0.0, 0.0)
ALL = dict.fromkeys((f"{s}_attn" for s in SITES), True)
SMALL = dict(n_heads=2, head_dim=4, edge_widths=(8, 5), node_widths=(7, 4), global_widths=(6, 3))


def lrelu(x):
    return np.where(x > 0, x, 0.2 * x)


def np_mlp(mlp, x):
    for layer, act in zip(mlp.layers, mlp.activations):
        x = x @ layer.W.data + layer.b.data
        if act:
            x = lrelu(x)
    return x


def random_graph(n, edges, seed=0, d_e=3):
    rng = np.random.default_rng(seed)
    s, r = zip(*edges) if edges else ((), ())
    return WindGraph(rng.uniform(-1, 1, 1), rng.uniform(-1, 1, (n, 1)), rng.uniform(-1, 1, (len(edges), d_e)), s, r)


def farm_graph(seed, lo=4, hi=12, theta=None):
    rng = np.random.default_rng(seed)
    (lay,) = generate_layouts(1, (lo, hi), 1500.0**2, 300.0, seed=seed)
    th = float(rng.integers(0, 36) * 10) if theta is None else theta
    g = build_graph(FarmScenario([T.at(x, y) for x, y in lay], 8.0, th))
    # replace the constant speed features so every node is distinguishable
    g.V = rng.uniform(0, 1, g.V.shape)
    g.u = rng.uniform(0, 1, 1)
    g.E = g.E / 2000.0 + rng.normal(0, 0.1, g.E.shape)
    g.node_targets = rng.uniform(0, 1, g.n_nodes)
    g.global_target = float(rng.uniform(0, 1))
    return g


def block(flags=None, d=(3, 1, 1), seed=0, **kw):
    cfg = GraphBlockConfig(**(flags or {}), **{**SMALL, **kw})
    return GraphBlock(cfg, *d, np.random.default_rng(seed))


def inputs(b):
    return Tensor(b.u), Tensor(b.V), Tensor(b.E)


def line_graph():
    # three turbines in a row along the wind: edges 0->1, 0->2, 1->2
    sc = FarmScenario([T, T.at(600, 0), T.at(1200, 0)], 8.0, 270.0)
    g = build_graph(sc)
    assert sorted(zip(g.senders.tolist(), g.receivers.tolist())) == [(0, 1), (0, 2), (1, 2)]
    rng = np.random.default_rng(3)
    g.V, g.E, g.u = rng.uniform(0, 1, (3, 1)), rng.uniform(-1, 1, (3, 3)), rng.uniform(0, 1, 1)
    g.node_targets, g.global_target = rng.uniform(0, 1, 3), 0.4
    return g


# -- attention scores --------------------------------------------------------------

def unit_head():
    h = AttentionHead(1, 1, 1, np.random.default_rng(0))
    h.K.W.data[:] = 1.0
    h.Q.W.data[:] = 1.0
    return h


def test_attn_scores_identical_keys_uniform():
    h = AttentionHead(3, 2, 4, np.random.default_rng(1))
    w = attn_scores(np.tile([0.3, -0.2, 0.9], (5, 1)), [0.1, 0.7], h)
    assert np.allclose(w, 0.2, atol=1e-15)


def test_attn_scores_single_key():
    h = AttentionHead(3, 2, 4, np.random.default_rng(1))
    assert attn_scores([[5.0, -3.0, 1.0]], [2.0, 2.0], h).tolist() == [1.0]


def test_attn_scores_ln2():
    assert np.allclose(attn_scores([[0.0], [math.log(2)]], [1.0], unit_head()), [1 / 3, 2 / 3], atol=1e-15)


def test_attn_scores_scaled_by_sqrt_d():
    h = AttentionHead(1, 1, 4, np.random.default_rng(0))
    h.K.W.data[:] = 1.0
    h.Q.W.data[:] = 1.0
    # dot product is 4x and sqrt(d) = 2, so the logit is 2x
    w = attn_scores([[0.0], [math.log(2) / 2]], [1.0], h)
    assert np.allclose(w, [1 / 3, 2 / 3], atol=1e-14)


def test_attn_scores_empty():
    with pytest.raises(DegenerateNeighborhoodError):
        attn_scores(np.zeros((0, 1)), [1.0], unit_head())


# -- block stages --------------------------------------------------------------------

def test_input_widths_without_attention():
    blk = block()
    assert blk.phi_e.n_in == 3 + 1 + 1 + 1
    assert blk.phi_v.n_in == 1 + 5 + 1
    assert blk.phi_u.n_in == 4 + 5 + 1
    assert all(getattr(blk, f"{s}_site") is None for s in SITES)


def test_input_widths_with_attention():
    blk = block(ALL)
    assert blk.phi_e.n_in == 3 + 3 + 1 + 1 + 1
    assert blk.phi_v.n_in == 1 + 1 + 5 + 1


def test_edge_attention_chain():
    g = random_graph(4, [(1, 2), (2, 3)])
    b = GraphBatch.from_graphs([g])
    blk = block({"edge_attn": True}, n_heads=1, head_dim=3)
    blk.edge_site.H.W.data[:] = np.eye(3)
    rec = AttentionWeights()
    z = blk.edge_attention(b, *inputs(b), rec)
    assert rec.weights["edge"][0].tolist() == [1.0]
    assert (rec.senders["edge"].tolist(), rec.receivers["edge"].tolist()) == ([0], [1])
    # edge (1, 2): node 1 has no incoming edges
    assert np.array_equal(z.data[0], np.zeros(3))
    F = blk.edge_site.heads[0].F.W.data
    assert np.allclose(z.data[1], lrelu(g.E[0] @ F), atol=1e-15)


def test_edge_update_single_edge_and_bias_rows():
    g = random_graph(2, [(0, 1)])
    b = GraphBatch.from_graphs([g])
    blk = block()
    for layer in blk.phi_e.layers:
        layer.W.data[:] = 0.0
        layer.b.data[:] = np.linspace(-1, 1, layer.b.size)
    out = blk.edge_update(b, *inputs(b), None).data
    assert out.shape == (1, 5)
    assert np.allclose(out[0], lrelu(blk.phi_e.layers[-1].b.data), atol=0)


def test_e2v_sum_without_attention():
    g = random_graph(4, [(0, 3), (1, 3), (2, 3)])
    b = GraphBatch.from_graphs([g])
    ebar = block().e2v_aggregate(b, *inputs(b)[:2], Tensor([[1.0], [2.0], [3.0]]))
    assert ebar.data.tolist() == [[0.0], [0.0], [0.0], [6.0]]


def test_e2v_attention_brute_force():
    g = random_graph(5, [(0, 3), (1, 3), (2, 4), (3, 4), (0, 4)], seed=4)
    b = GraphBatch.from_graphs([g])
    blk = block({"e2v_attn": True})
    u, V, E = inputs(b)
    E2 = blk.edge_update(b, u, V, E, None)
    rec = AttentionWeights()
    ebar = blk.e2v_aggregate(b, u, V, E2, rec).data
    e2 = E2.data
    site = blk.e2v_site
    expect = np.zeros_like(ebar)
    for j in range(5):
        inc = [k for k in range(b.n_edges) if b.receivers[k] == j]
        for k in inc:
            parts = []
            for h in site.heads:
                def score(m):
                    key = np.concatenate([g.V[b.senders[m]], e2[m]])
                    q = np.concatenate([g.V[j], e2[m], g.u])
                    return (key @ h.K.W.data) @ (q @ h.Q.W.data) / math.sqrt(h.d)
                logits = np.array([score(m) for m in inc])
                w = np.exp(logits - logits.max())
                parts.append(w[inc.index(k)] / w.sum() * e2[k])
            expect[j] += np.concatenate(parts) @ site.H.W.data
    assert np.allclose(ebar, expect, atol=1e-12)
    assert np.array_equal(ebar[[0, 1, 2]], np.zeros((3, 5)))


def test_node_attention_brute_force():
    g = random_graph(4, [(0, 2), (1, 2), (0, 3), (2, 3)], seed=7)
    b = GraphBatch.from_graphs([g])
    blk = block({"node_attn": True, "e2v_attn": True})
    u, V, E = inputs(b)
    E2 = blk.edge_update(b, u, V, E, None)
    ebar = blk.e2v_aggregate(b, u, V, E2)
    rec = AttentionWeights()
    z = blk.node_attention(b, u, V, E2, ebar, rec).data
    site = blk.node_site
    for j in range(4):
        inc = [k for k in range(b.n_edges) if b.receivers[k] == j]
        if not inc:
            assert np.array_equal(z[j], np.zeros(1))
            continue
        heads = []
        for n, h in enumerate(site.heads):
            q = np.concatenate([g.V[j], ebar.data[j]]) @ h.Q.W.data
            logits = np.array(
                [np.concatenate([g.u, E2.data[k], g.V[b.senders[k]]]) @ h.K.W.data @ q / math.sqrt(h.d) for k in inc]
            )
            w = np.exp(logits - logits.max())
            w /= w.sum()
            assert np.allclose(rec.weights["node"][n][inc], w, atol=1e-14)
            heads.append(lrelu(sum(wk * g.V[b.senders[k]] @ h.F.W.data for wk, k in zip(w, inc))))
        assert np.allclose(z[j], np.concatenate(heads) @ site.H.W.data, atol=1e-13)


def test_node_attention_single_sender():
    g = random_graph(2, [(0, 1)], seed=2)
    b = GraphBatch.from_graphs([g])
    blk = block({"node_attn": True})
    u, V, E = inputs(b)
    E2 = blk.edge_update(b, u, V, E, None)
    ebar = blk.e2v_aggregate(b, u, V, E2)
    z = blk.node_attention(b, u, V, E2, ebar).data
    site = blk.node_site
    expect = np.concatenate([lrelu(g.V[0] @ h.F.W.data) for h in site.heads]) @ site.H.W.data
    assert np.allclose(z[1], expect, atol=1e-15)
    assert z[0].tolist() == [0.0]


def test_global_sum_without_attention():
    g = random_graph(2, [], seed=1)
    b = GraphBatch.from_graphs([g])
    blk = block()
    u = Tensor(b.u)
    V2 = Tensor([[1.0] * 4, [3.0] * 4])
    E2 = Tensor(np.zeros((0, 5)))
    out = blk.global_aggregate_and_update(b, u, V2, E2).data
    expect = np_mlp(blk.phi_u, np.concatenate([[4.0] * 4, np.zeros(5), g.u])[None])
    assert np.allclose(out, expect, atol=1e-15)


def test_global_attention_single_node_and_edge_sums():
    blk = block({"v2u_attn": True, "e2u_attn": True})
    b = GraphBatch.from_graphs([random_graph(1, [], seed=5)])
    rec = AttentionWeights()
    blk(b, *inputs(b), rec)
    assert all(w.tolist() == [1.0] for w in rec.weights["v2u"])
    assert "e2u" in rec.weights and all(w.size == 0 for w in rec.weights["e2u"])
    b = GraphBatch.from_graphs([random_graph(3, [(0, 1), (0, 2), (1, 2)], seed=5)])
    rec = AttentionWeights()
    blk(b, *inputs(b), rec)
    for w in rec.weights["e2u"]:
        assert w.shape == (3,) and w.sum() == pytest.approx(1.0, abs=1e-12)


# -- whole block -----------------------------------------------------------------------

def vanilla_block(blk, g):
    """Plain per-element edge, node and global updates with sum aggregation."""
    n, m = g.n_nodes, g.n_edges
    e2 = np.array(
        [np_mlp(blk.phi_e, np.concatenate([g.E[k], g.V[g.senders[k]], g.V[g.receivers[k]], g.u])[None])[0] for k in range(m)]
    ).reshape(m, -1)
    de = blk.phi_e.n_out
    ebar = np.zeros((n, de))
    for k in range(m):
        ebar[g.receivers[k]] += e2[k]
    v2 = np.array([np_mlp(blk.phi_v, np.concatenate([g.V[j], ebar[j], g.u])[None])[0] for j in range(n)])
    u2 = np_mlp(blk.phi_u, np.concatenate([v2.sum(0), e2.sum(0) if m else np.zeros(de), g.u])[None])
    return u2, v2, e2


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_vanilla_equivalence(seed):
    g = farm_graph(seed)
    blk = block(seed=seed)
    b = GraphBatch.from_graphs([g])
    u2, V2, E2 = blk(b, *inputs(b))
    ru, rv, re = vanilla_block(blk, g)
    assert np.abs(u2.data - ru).max() < 1e-12
    assert np.abs(V2.data - rv).max() < 1e-12
    assert np.abs(E2.data - re).max() < 1e-12


def test_presets():
    f = preset_blocks("f-graph")
    assert all(f[0].flags.values()) and not any(c.has_attention for c in f[1:])
    n = preset_blocks("n-graph")
    assert [s for s, on in n[0].flags.items() if on] == ["e2v", "node"]
    assert not any(c.has_attention for c in preset_blocks("o-graph"))
    assert [c.node_widths for c in f] == [(256, 128, 64), (128, 64, 32), (64, 64)]
    with pytest.raises(KeyError):
        preset_blocks("x-graph")


def test_block_config_validation():
    with pytest.raises(ValueError):
        GraphBlockConfig(n_heads=0)
    with pytest.raises(ValueError):
        GraphBlockConfig(edge_widths=())
    c = GraphBlockConfig(**ALL, n_heads=2)
    assert GraphBlockConfig.from_dict(c.to_dict()) == c


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_permutation_equivariance(seed):
    g = farm_graph(seed)
    perm = np.random.default_rng(seed).permutation(g.n_nodes)
    blk = block(ALL, seed=seed % 7)
    b, bp = GraphBatch.from_graphs([g]), GraphBatch.from_graphs([g.permuted(perm)])
    u1, V1, E1 = blk(b, *inputs(b))
    u2, V2, E2 = blk(bp, *inputs(bp))
    assert np.abs(u1.data - u2.data).max() < 1e-9
    assert np.abs(V1.data[perm] - V2.data).max() < 1e-9
    assert np.abs(E1.data - E2.data).max() < 1e-9


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_mask_correctness(seed):
    # edge attention looks two hops back by construction, so the node-level
    # sites are checked here with it disabled
    g = farm_graph(seed, lo=6, hi=12)
    flags = {**ALL, "edge_attn": False}
    blk = block(flags, seed=seed % 5)

    def stages(gr):
        b = GraphBatch.from_graphs([gr])
        u, V, E = inputs(b)
        E2 = blk.edge_update(b, u, V, E, None)
        ebar = blk.e2v_aggregate(b, u, V, E2)
        return ebar.data, blk.node_attention(b, u, V, E2, ebar).data

    ebar, z = stages(g)
    rng = np.random.default_rng(seed)
    for j in range(g.n_nodes):
        inside = set(g.senders[g.receivers == j].tolist()) | {j}
        outside = [k for k in range(g.n_nodes) if k not in inside]
        if not outside:
            continue
        k = int(rng.choice(outside))
        h = WindGraph(g.u, g.V.copy(), g.E.copy(), g.senders, g.receivers)
        h.V[k] = 0.0
        h.E[(g.senders == k) | (g.receivers == k)] = 0.0
        ebar2, z2 = stages(h)
        assert np.array_equal(ebar[j], ebar2[j])
        assert np.array_equal(z[j], z2[j])


def test_weights_normalized_over_batch():
    graphs = [farm_graph(s) for s in range(6)]
    model = graph_model("f-graph", seed=1, widths=((8, 6), (6, 4)), decode_widths=(6,), n_heads=3, head_dim=4)
    rec = model.attention(GraphBatch.from_graphs(graphs))
    assert rec.sites == list(SITES)
    assert rec.max_normalization_error() < 1e-9
    for site in rec.sites:
        for w in rec.weights[site]:
            assert np.all((w >= 0) & (w <= 1))
    d = json_roundtrip(rec)
    assert set(d) == set(SITES) and set(d["node"]) == {"head0", "head1", "head2"}


def json_roundtrip(rec):
    import json

    return json.loads(rec.to_json())


def test_attention_free_model_raises():
    model = graph_model("o-graph", widths=((4,),), decode_widths=(4,))
    with pytest.raises(NoAttentionError):
        model.attention(farm_graph(0))


# -- network ---------------------------------------------------------------------------

def small_model(kind, seed=0):
    return graph_model(kind, seed=seed, widths=((8, 6), (6, 5)), decode_widths=(6,), n_heads=2, head_dim=4)


def test_single_turbine_network():
    g = build_graph(FarmScenario([T], 8.0, 0.0))
    p = small_model("f-graph").predict([g])
    assert p.node.shape == (1,) and p.glob.shape == (1,) and p.edge.shape == (0,)


def test_variable_topology():
    model = small_model("n-graph")
    for n in (1, 4, 9, 16):
        (lay,) = generate_layouts(1, (n, n), 2500.0**2, 300.0, seed=n)
        g = build_graph(FarmScenario([T.at(x, y) for x, y in lay], 9.0, 200.0))
        assert model.predict([g]).node.shape == (n,)


def test_batched_matches_individual():
    graphs = [farm_graph(s) for s in range(4)]
    model = small_model("f-graph", seed=2)
    joint = model.predict(graphs)
    node = np.concatenate([model.predict([g]).node for g in graphs])
    assert np.allclose(joint.node, node, atol=1e-12)
    assert np.allclose(joint.glob, [model.predict([g]).glob[0] for g in graphs], atol=1e-12)


def test_forward_deterministic_and_config_roundtrip():
    g = farm_graph(3)
    model = small_model("f-graph", seed=4)
    clone = GraphNetwork.from_config(model.config())
    assert np.array_equal(model.predict([g]).node, clone.predict([g]).node)


def test_gradient_reaches_every_attention_parameter():
    g = farm_graph(0, lo=10, hi=12)
    b = GraphBatch.from_graphs([g])
    # some edge and some node must see more than one neighbour, or the
    # softmax is constant and its key/query maps get no gradient
    assert np.bincount(b.eg_dst).max() >= 2 and np.bincount(b.receivers).max() >= 2
    model = small_model("f-graph", seed=5)
    with Tape() as tape:
        loss = model.loss(b)
    tape.backward(loss)
    names = [(n, p) for n, p in model.named_parameters() if "_site" in n]
    assert len(names) == 5 * (2 * 3 + 1) - 3 * 2  # F only at the edge and node sites
    for name, p in names:
        assert p.grad is not None and np.abs(p.grad).max() > 0, name


def test_block_gradient_check_three_turbines():
    g = line_graph()
    b = GraphBatch.from_graphs([g])
    model = graph_model("f-graph", seed=6, widths=((5, 4),), decode_widths=(4,), n_heads=2, head_dim=3)

    def f():
        node, glob, _ = model(b)
        return ops.add(ops.mae(node, Tensor(b.node_targets[:, None])), ops.mae(glob, Tensor(b.global_targets[:, None])))

    assert grad_check(f, model.parameters(), eps=1e-6) < 1e-4
