import itertools

import numpy as np
import pytest

from panseg.graphcut import (DATA_EPS, FlowNetwork, build_graph,
                             labeling_energy, max_flow_min_cut,
                             refine_graph_cut)
from panseg.volume import Volume3D


def brute_force_min_energy(g: FlowNetwork):
    best = np.inf
    best_fg = None
    for bits in itertools.product([False, True], repeat=g.n_nodes):
        fg = np.array(bits)
        e = labeling_energy(g, fg)
        if e < best:
            best, best_fg = e, fg
    return best, best_fg


def random_network(rng, max_nodes=10, max_edges=16, integer=True):
    n = int(rng.integers(1, max_nodes + 1))
    m = int(rng.integers(0, max_edges + 1))
    draw = (lambda size: rng.integers(0, 20, size).astype(float)) if integer \
        else (lambda size: rng.uniform(0, 20, size))
    src = draw(n)
    snk = draw(n)
    if m:
        u = rng.integers(0, n, m)
        v = rng.integers(0, n, m)
        cap = draw(m)
    else:
        u = v = np.zeros(0, np.int64)
        cap = np.zeros(0)
    return FlowNetwork(n, src, snk, u, v, cap)


class TestFlowNetwork:
    def test_rejects_negative_caps(self):
        with pytest.raises(ValueError):
            FlowNetwork(2, np.array([-1.0, 0.0]), np.zeros(2),
                        np.zeros(0, np.int64), np.zeros(0, np.int64),
                        np.zeros(0))

    def test_rejects_out_of_range_edges(self):
        with pytest.raises(ValueError):
            FlowNetwork(2, np.zeros(2), np.zeros(2), np.array([0]),
                        np.array([5]), np.array([1.0]))


class TestMaxFlow:
    def test_single_node_bottleneck(self):
        # source -5-> v -3-> sink: flow limited by the smaller terminal
        g = FlowNetwork(1, np.array([5.0]), np.array([3.0]),
                        np.zeros(0, np.int64), np.zeros(0, np.int64),
                        np.zeros(0))
        flow, side = max_flow_min_cut(g)
        assert flow == 3.0
        assert side[0]  # residual source capacity keeps it on the source side

    def test_disconnected_zero_flow(self):
        g = FlowNetwork(2, np.array([4.0, 0.0]), np.array([0.0, 6.0]),
                        np.array([0]), np.array([1]), np.array([0.0]))
        flow, side = max_flow_min_cut(g)
        assert flow == 0.0
        assert side[0] and not side[1]

    def test_two_node_chain(self):
        # s -5-> a -2-> b -9-> t
        g = FlowNetwork(2, np.array([5.0, 0.0]), np.array([0.0, 9.0]),
                        np.array([0]), np.array([1]), np.array([2.0]))
        flow, _ = max_flow_min_cut(g)
        assert flow == 2.0

    def test_exhaustive_random_graphs_exact(self, rng):
        for _ in range(500):
            g = random_network(rng)
            flow, side = max_flow_min_cut(g)
            best, _ = brute_force_min_energy(g)
            assert flow == best
            assert labeling_energy(g, side) == best

    def test_float_capacities_still_optimal(self, rng):
        for _ in range(100):
            g = random_network(rng, max_nodes=8, integer=False)
            flow, side = max_flow_min_cut(g)
            best, _ = brute_force_min_energy(g)
            assert labeling_energy(g, side) == pytest.approx(best, abs=1e-9)


class TestBuildGraph:
    def test_hard_foreground_capacity(self):
        ct = Volume3D(np.zeros((1, 1, 2)))
        post = np.array([[[1.0, 0.5]]])
        g = build_graph(ct, post, 1.0, 30.0)
        # cost of labeling the post=1 voxel background is -ln(eps)
        assert g.source_cap[0] == pytest.approx(-np.log(DATA_EPS), rel=1e-9)
        flow, side = max_flow_min_cut(g)
        assert side[0]

    def test_uniform_intensities_equal_neighbor_caps(self):
        ct = Volume3D(np.full((3, 3, 3), 40.0), (2.0, 2.0, 2.0))
        g = build_graph(ct, np.full((3, 3, 3), 0.5), 1.5, 25.0)
        assert np.allclose(g.edge_cap, 1.5 / 2.0)

    def test_capacities_match_naive_formula(self, rng):
        for _ in range(100):
            ct_data = rng.uniform(-100, 200, (3, 3, 3))
            post = rng.uniform(0, 1, (3, 3, 3))
            spacing = tuple(rng.uniform(0.5, 3.0, 3))
            lam = float(rng.uniform(0.1, 4.0))
            sig = float(rng.uniform(5.0, 60.0))
            ct = Volume3D(ct_data, spacing)
            g = build_graph(ct, post, lam, sig)
            pf = post.ravel()
            assert np.allclose(g.sink_cap,
                               np.maximum(-np.log(pf + DATA_EPS), 0.0),
                               atol=1e-12)
            assert np.allclose(g.source_cap,
                               np.maximum(-np.log(1 - pf + DATA_EPS), 0.0),
                               atol=1e-12)
            data = ct.data.astype(np.float64)
            shape = (3, 3, 3)
            for e in range(len(g.edge_cap)):
                pu = np.unravel_index(g.edge_u[e], shape)
                pv = np.unravel_index(g.edge_v[e], shape)
                axis = int(np.flatnonzero(np.subtract(pv, pu))[0])
                dist = spacing[::-1][axis]
                di = data[pv] - data[pu]
                want = lam * np.exp(-di * di / (2 * sig * sig)) / dist
                assert g.edge_cap[e] == pytest.approx(want, abs=1e-12)

    def test_posterior_range_checked(self):
        ct = Volume3D(np.zeros((2, 2, 2)))
        with pytest.raises(ValueError):
            build_graph(ct, np.full((2, 2, 2), 1.5), 1.0, 30.0)


class TestRefine:
    def test_zero_smoothness_is_data_argmin(self, rng):
        ct = Volume3D(rng.uniform(-100, 100, (4, 4, 4)))
        post = rng.uniform(0, 1, (4, 4, 4))
        post[np.abs(post - 0.5) < 0.05] = 0.7  # keep away from exact ties
        labels = refine_graph_cut(ct, post, 0.0, 30.0)
        want = post > 0.5
        assert np.array_equal(labels.data > 0.5, want)

    def test_exhaustive_2x2x2_exact(self, rng):
        for _ in range(100):
            ct = Volume3D(rng.uniform(-50, 150, (2, 2, 2)),
                          tuple(rng.uniform(0.5, 2.0, 3)))
            post = rng.uniform(0, 1, (2, 2, 2))
            lam = float(rng.uniform(0.0, 3.0))
            g = build_graph(ct, post, lam, 30.0)
            _, side = max_flow_min_cut(g)
            best, _ = brute_force_min_energy(g)
            assert labeling_energy(g, side) == best

    def test_symmetric_energy_uniform_result(self):
        ct = Volume3D(np.full((3, 3, 3), 10.0))
        labels = refine_graph_cut(ct, np.full((3, 3, 3), 0.5), 2.0, 30.0)
        vals = np.unique(labels.data)
        assert len(vals) == 1  # smoothness dominates: one class everywhere

    def test_refinement_never_increases_energy(self, rng):
        for _ in range(20):
            ct = Volume3D(rng.uniform(-100, 100, (5, 5, 5)))
            post = rng.uniform(0, 1, (5, 5, 5))
            g = build_graph(ct, post, 1.0, 30.0)
            _, side = max_flow_min_cut(g)
            rough = post.ravel() > 0.5  # per-voxel MAP labeling
            assert labeling_energy(g, side) <= labeling_energy(g, rough) + 1e-9
