import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from windgat.graphs import (
    GeometryError,
    GraphBatch,
    WindGraph,
    build_graph,
    build_upstream_sequences,
    edge_graph_transform,
    upstream_angle,
    upstream_neighbors,
)
from windgat.wakesim import FarmScenario, NormStats, Turbine, generate_layouts

T = Turbine(0.0, 0.0)


def farm(points, theta=270.0, ws=8.0):
    return FarmScenario([T.at(x, y) for x, y in points], ws, theta)


def rotate(xy, deg):
    c, s = math.cos(math.radians(deg)), math.sin(math.radians(deg))
    return np.asarray(xy) @ np.array([[c, s], [-s, c]])


def test_upstream_angle_examples():
    assert upstream_angle((500, 0), (0, 0), 270.0) == pytest.approx(0.0, abs=1e-12)
    assert abs(upstream_angle((0, 500), (0, 0), 270.0)) == pytest.approx(90.0, abs=1e-12)
    assert upstream_angle((-500, 0), (0, 0), 270.0) == 180.0


def test_upstream_angle_rotation_symmetry():
    i, j = np.array([420.0, 130.0]), np.array([-35.0, 60.0])
    a = upstream_angle(i, j, 250.0)
    b = upstream_angle(rotate(i, 37.0), rotate(j, 37.0), 250.0 - 37.0)
    assert a == pytest.approx(b, abs=1e-9)


def test_upstream_angle_coincident():
    with pytest.raises(GeometryError):
        upstream_angle((1, 1), (1, 1), 0.0)


def test_upstream_neighbors():
    sc = farm([(0, 0), (3000, 0), (3000, 800), (0, 2000)])
    assert upstream_neighbors(0, sc) == []
    assert upstream_neighbors(1, sc) == [0]  # directly upwind, far away; (0, 2000) is 33.7 deg off
    assert upstream_neighbors(2, sc) == [0, 3]  # 14.9 and 21.8 deg off axis; turbine 1 sits at 90
    assert upstream_neighbors(3, sc) == []
    # j at 90 degrees is excluded
    assert upstream_neighbors(1, farm([(0, 0), (0, 500)])) == []


def test_strict_thirty_degree_boundary():
    # candidate exactly 30 degrees off axis (up to rounding) is excluded, 29.9 included
    d = 1000.0
    just_in = (d * math.cos(math.radians(29.9)), d * math.sin(math.radians(29.9)))
    just_out = (d * math.cos(math.radians(30.1)), d * math.sin(math.radians(30.1)))
    assert upstream_neighbors(1, farm([(0, 0), just_in])) == [0]
    assert upstream_neighbors(1, farm([(0, 0), just_out])) == []


def test_build_graph_single_turbine():
    g = build_graph(farm([(0, 0)]))
    assert g.n_nodes == 1 and g.n_edges == 0


def test_build_graph_two_aligned():
    stats = NormStats({"distance": (0.0, 1000.0), "ws": (4.0, 12.0)})
    g = build_graph(farm([(0, 0), (500, 0)]), stats=stats)
    assert g.n_edges == 1
    assert g.senders.tolist() == [0] and g.receivers.tolist() == [1]
    assert np.allclose(g.E[0], [0.5, 0.0, 1.0], atol=1e-15)
    assert g.u.tolist() == [0.5] and g.V.tolist() == [[0.5], [0.5]]


def test_reversing_wind_reverses_edges():
    (lay,) = generate_layouts(1, (10, 10), 2000.0**2, 300.0, seed=5)
    g1 = build_graph(farm(lay, theta=40.0))
    g2 = build_graph(farm(lay, theta=220.0))
    e1 = set(zip(g1.senders.tolist(), g1.receivers.tolist()))
    e2 = set(zip(g2.senders.tolist(), g2.receivers.tolist()))
    assert e1 and {(j, i) for i, j in e1} == e2


def test_graph_invariants_rejected():
    with pytest.raises(ValueError):
        WindGraph([1.0], [[1.0], [1.0]], [[0, 0, 1]], [0], [0])
    with pytest.raises(ValueError):
        WindGraph([1.0], [[1.0], [1.0]], [[0, 0, 1], [0, 0, 1]], [0, 0], [1, 1])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(range(0, 360, 10)), st.floats(-180, 180))
def test_edges_agree_with_neighbors_and_rotation(seed, theta, rot):
    (lay,) = generate_layouts(1, (2, 12), 2000.0**2, 300.0, seed=seed)
    sc = farm(lay, theta=float(theta))
    g = build_graph(sc)
    edges = set(zip(g.senders.tolist(), g.receivers.tolist()))
    brute = {(j, i) for i in range(sc.n_turbines) for j in upstream_neighbors(i, sc)}
    assert edges == brute
    sc2 = farm(rotate(lay, rot), theta=float((theta - rot) % 360.0) % 360.0)
    g2 = build_graph(sc2)
    near_edge = any(
        abs(abs(upstream_angle(lay[i], lay[j], theta)) - 30.0) < 1e-6
        for i, j in itertools.permutations(range(len(lay)), 2)
    )
    if not near_edge:
        assert g2.senders.tolist() == g.senders.tolist()
        assert g2.receivers.tolist() == g.receivers.tolist()
        assert np.allclose(g.E, g2.E, atol=1e-9)


# -- edge graph ---------------------------------------------------------------------

def graph_from_edges(n, edges):
    s, r = zip(*edges)
    return WindGraph([0.0], np.zeros((n, 1)), np.arange(len(edges) * 3.0).reshape(-1, 3), s, r)


def eg_pairs(g):
    eg = edge_graph_transform(g)
    return {((g.senders[a], g.receivers[a]), (g.senders[b], g.receivers[b]), v) for a, b, v in zip(eg.src, eg.dst, eg.via)}


def test_edge_graph_chain():
    assert eg_pairs(graph_from_edges(4, [(1, 2), (2, 3)])) == {((1, 2), (2, 3), 2)}


def test_edge_graph_disjoint():
    assert eg_pairs(graph_from_edges(5, [(1, 2), (3, 4)])) == set()


def test_edge_graph_fan_out():
    assert eg_pairs(graph_from_edges(5, [(1, 2), (2, 3), (2, 4)])) == {
        ((1, 2), (2, 3), 2),
        ((1, 2), (2, 4), 2),
    }


def test_edge_graph_empty():
    g = build_graph(farm([(0, 0)]))
    assert edge_graph_transform(g).n_edges == 0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(range(0, 360, 10)))
def test_edge_graph_brute_force(seed, theta):
    (lay,) = generate_layouts(1, (2, 12), 2000.0**2, 300.0, seed=seed)
    g = build_graph(farm(lay, theta=float(theta)))
    eg = edge_graph_transform(g)
    brute = {
        (a, b)
        for a in range(g.n_edges)
        for b in range(g.n_edges)
        if g.receivers[a] == g.senders[b]
    }
    assert set(zip(eg.src.tolist(), eg.dst.tolist())) == brute
    assert all(g.receivers[a] == v == g.senders[b] for a, b, v in zip(eg.src, eg.dst, eg.via))


# -- upstream sequences ------------------------------------------------------------

def test_sequence_two_neighbors_features():
    # target i at x=1000; j directly upwind at 600 m, k off-axis further away
    sc = farm([(1000, 0), (400, 0), (0, 300)])
    seqs = build_upstream_sequences(sc)
    s = seqs[0]
    assert s.neighbors == [1, 2]
    dj = 600.0
    dk = math.hypot(1000, 300)
    ak = math.atan2(-300, 1000)
    assert np.allclose(s.triples, [[dj, 0.0, 1.0], [dk, math.sin(ak), math.cos(ak)]], atol=1e-12)
    assert build_upstream_sequences(sc, order="farthest")[0].neighbors == [2, 1]


def test_front_row_sequence_empty():
    seqs = build_upstream_sequences(farm([(0, 0), (700, 0)], ws=9.0))
    assert len(seqs[0]) == 0 and seqs[0].ws == 9.0
    assert len(seqs[1]) == 1


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(range(0, 360, 10)))
def test_sequence_order_invariant_to_relabeling(seed, theta):
    (lay,) = generate_layouts(1, (3, 12), 2000.0**2, 300.0, seed=seed)
    perm = np.random.default_rng(seed).permutation(len(lay))
    a = build_upstream_sequences(farm(lay, theta=float(theta)))
    b = build_upstream_sequences(farm(lay[perm], theta=float(theta)))
    for new, old in enumerate(perm):
        assert np.array_equal(a[old].triples, b[new].triples)


def test_graph_batch_offsets():
    g1 = build_graph(farm([(0, 0), (500, 0), (1000, 0)]))
    g2 = build_graph(farm([(0, 0), (600, 0)]))
    b = GraphBatch.from_graphs([g1, g2])
    assert b.n_nodes == 5 and b.n_graphs == 2
    assert b.senders.tolist() == g1.senders.tolist() + (g2.senders + 3).tolist()
    assert b.edge_graph.tolist() == [0] * g1.n_edges + [1] * g2.n_edges
    assert b.node_graph.tolist() == [0, 0, 0, 1, 1]
