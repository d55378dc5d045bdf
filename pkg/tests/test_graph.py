import math

import numpy as np
import pytest

from bullygraph import graph as graph_mod
from bullygraph.autodiff import Tape, backward, const, grad_check, param, total
from bullygraph.graph import (GraphParams, TemporalGraph, aggregate,
                              edge_weight, interval_scale, temporal_factor,
                              topic_coherence)

from oracles import brute_force_aggregate


def make_params(dim, seed, time_coeff=0.0):
    # init leaves both edge terms at zero; tests want live topic edges
    rng = np.random.default_rng(seed)
    p = GraphParams.init(dim, rng)
    p.topic_transform.data[...] = rng.uniform(-1, 1, (dim, dim))
    p.time_coeff.data[...] = time_coeff
    return p


def test_init_starts_with_silent_edges():
    p = GraphParams.init(4, np.random.default_rng(0))
    assert not p.topic_transform.data.any()
    assert float(p.time_coeff.data) == 0.0
    assert p.agg_transform.data.any()


def random_graph(rng, n, dim):
    nodes = [const(rng.uniform(-1, 1, dim)) for _ in range(n)]
    times = np.concatenate([[0.0], np.sort(rng.uniform(0, 60, n - 1))]) if n > 1 \
        else np.zeros(1)
    intervals = times[None, :] - times[:, None]
    return TemporalGraph(nodes=nodes, intervals=intervals)


class TestTopicCoherence:
    def test_orthogonal_vectors_zero(self):
        p = param(np.eye(3))
        out = topic_coherence(const([1.0, 0.0, 0.0]), const([0.0, 1.0, 0.0]), p)
        assert float(out.data) == 0.0

    def test_unit_vector_identity(self):
        p = param(np.eye(3))
        v = const([0.0, 0.0, 1.0])
        assert float(topic_coherence(v, v, p).data) == 1.0

    def test_hand_evaluation(self):
        rng = np.random.default_rng(0)
        w = rng.uniform(-1, 1, (4, 4))
        a, b = rng.uniform(-1, 1, 4), rng.uniform(-1, 1, 4)
        out = topic_coherence(const(a), const(b), param(w))
        assert abs(float(out.data) - float((a @ w) @ b)) < 1e-12

    def test_asymmetric_in_general(self):
        rng = np.random.default_rng(1)
        w = param(rng.uniform(-1, 1, (3, 3)))
        a, b = const(rng.uniform(-1, 1, 3)), const(rng.uniform(-1, 1, 3))
        assert float(topic_coherence(a, b, w).data) != \
            float(topic_coherence(b, a, w).data)


class TestTemporalFactor:
    def test_zero_interval(self):
        w = param(np.float64(3.7))
        assert float(temporal_factor(0.0, w).data) == 0.0

    def test_raw_mode_scalar_product(self):
        w = param(np.float64(0.5))
        assert float(temporal_factor(4.0, w, scale_divisor=1.0).data) == 2.0

    def test_antisymmetry_both_modes(self):
        w = param(np.float64(-1.3))
        for divisor in (1.0, 17.5):
            a = float(temporal_factor(6.0, w, divisor).data)
            b = float(temporal_factor(-6.0, w, divisor).data)
            assert a == -b

    def test_interval_scale_modes(self):
        intervals = np.array([[0.0, 30.0], [-30.0, 0.0]])
        assert interval_scale(intervals, "raw") == 1.0
        assert interval_scale(intervals, "normalized") == 30.0
        assert interval_scale(np.zeros((2, 2)), "normalized") == 1.0
        with pytest.raises(ValueError):
            interval_scale(intervals, "bogus")


class TestEdgeWeight:
    def test_zero_factors(self):
        p = make_params(3, 2)
        p.topic_transform.data[...] = 0.0
        out = edge_weight(const(np.zeros(3)), const(np.zeros(3)), 0.0, p)
        assert float(out.data) == 0.0

    def test_strictly_inside_unit_interval(self):
        # tanh rounds to exactly 1.0 in float64 beyond |x| ~ 19, so the open
        # bound is asserted over the representable range.
        p = make_params(2, 3, time_coeff=1.0)
        p.topic_transform.data[...] = np.eye(2)
        out = edge_weight(const([2.0, 2.0]), const([1.0, 1.0]), 8.0, p,
                          scale_divisor=1.0)
        assert 0.99 < float(out.data) < 1.0
        out = edge_weight(const([-2.0, -2.0]), const([1.0, 1.0]), -8.0, p,
                          scale_divisor=1.0)
        assert -1.0 < float(out.data) < -0.99

    def test_tanh_of_half(self):
        p = make_params(1, 4, time_coeff=0.2)
        p.topic_transform.data[...] = 0.3
        out = edge_weight(const([1.0]), const([1.0]), 1.0, p, scale_divisor=1.0)
        assert abs(float(out.data) - math.tanh(0.5)) < 1e-12
        assert abs(float(out.data) - 0.46211715726000974) < 1e-12


class TestAggregate:
    def test_single_node_self_loop(self):
        rng = np.random.default_rng(5)
        p = make_params(3, 5)
        r = rng.uniform(-1, 1, 3)
        g = TemporalGraph(nodes=[const(r)], intervals=np.zeros((1, 1)))
        out = aggregate(g, p)
        w = math.tanh(float((r @ p.topic_transform.data) @ r))
        np.testing.assert_allclose(out[0].data, w * (p.agg_transform.data @ r),
                                   atol=1e-12)
        np.testing.assert_allclose(g.edge_weights, [[w]], atol=1e-15)

    def test_forced_unit_weights_sum_nodes(self):
        rng = np.random.default_rng(6)
        p = make_params(3, 6)
        p.agg_transform.data[...] = np.eye(3)
        g = random_graph(rng, 4, 3)
        out = aggregate(g, p, override_weights=np.ones((4, 4)))
        expected = np.sum([n.data for n in g.nodes], axis=0)
        for row in out:
            np.testing.assert_allclose(row.data, expected, atol=1e-12)

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(7)
        for trial in range(30):
            n = int(rng.integers(1, 7))
            dim = int(rng.integers(2, 5))
            p = make_params(dim, 100 + trial, time_coeff=float(rng.normal()))
            g = random_graph(rng, n, dim)
            out = aggregate(g, p)
            expected, weights = brute_force_aggregate(
                [v.data for v in g.nodes], g.intervals, p.agg_transform.data,
                p.topic_transform.data, p.time_coeff.data)
            for a, b in zip(out, expected):
                np.testing.assert_allclose(a.data, b, atol=1e-10)
            np.testing.assert_allclose(g.edge_weights, weights, atol=1e-12)

    def test_cached_weights_in_open_interval(self):
        rng = np.random.default_rng(8)
        for trial in range(20):
            p = make_params(3, 200 + trial, time_coeff=float(rng.normal() * 3))
            g = random_graph(rng, int(rng.integers(1, 6)), 3)
            aggregate(g, p)
            assert np.all(g.edge_weights > -1.0) and np.all(g.edge_weights < 1.0)

    def test_empty_graph_rejected(self):
        p = make_params(2, 9)
        with pytest.raises(ValueError):
            aggregate(TemporalGraph(nodes=[], intervals=np.zeros((0, 0))), p)

    def test_call_counter_increments(self):
        p = make_params(2, 10)
        g = random_graph(np.random.default_rng(11), 2, 2)
        before = graph_mod.AGGREGATE_CALLS
        aggregate(g, p)
        assert graph_mod.AGGREGATE_CALLS == before + 1


class TestAblationInvariances:
    def test_no_time_weights_invariant_under_timestamp_permutation(self):
        rng = np.random.default_rng(12)
        p = make_params(3, 12, time_coeff=2.0)
        nodes = [rng.uniform(-1, 1, 3) for _ in range(5)]
        times = np.array([0.0, 3.0, 9.0, 20.0, 47.0])
        perm = rng.permutation(5)
        for t in (times, times[perm]):
            g = TemporalGraph(nodes=[const(v) for v in nodes],
                              intervals=t[None, :] - t[:, None])
            aggregate(g, p, no_time=True)
            if "first" not in dir():
                first = g.edge_weights.copy()
        assert np.array_equal(first, g.edge_weights)

    def test_no_topic_weights_depend_only_on_intervals(self):
        rng = np.random.default_rng(13)
        p = make_params(3, 13, time_coeff=1.5)
        times = np.array([0.0, 2.0, 11.0, 30.0])
        intervals = times[None, :] - times[:, None]
        weights = []
        for _ in range(2):
            nodes = [const(rng.uniform(-5, 5, 3)) for _ in range(4)]
            g = TemporalGraph(nodes=nodes, intervals=intervals)
            aggregate(g, p, no_topic=True)
            weights.append(g.edge_weights.copy())
        assert np.array_equal(weights[0], weights[1])

    def test_timestamp_shift_leaves_everything_unchanged(self):
        rng = np.random.default_rng(14)
        p = make_params(3, 14, time_coeff=0.7)
        nodes = [rng.uniform(-1, 1, 3) for _ in range(4)]
        times = np.array([0.0, 4.0, 6.0, 25.0])
        outs = []
        for shift in (0.0, 1234.5):
            t = times + shift
            g = TemporalGraph(nodes=[const(v) for v in nodes],
                              intervals=t[None, :] - t[:, None])
            rows = aggregate(g, p)
            outs.append((g.edge_weights.copy(),
                         np.array([r.data for r in rows])))
        assert np.max(np.abs(outs[0][0] - outs[1][0])) < 1e-12
        assert np.max(np.abs(outs[0][1] - outs[1][1])) < 1e-12


class TestGradients:
    def test_all_graph_params_receive_gradient(self):
        rng = np.random.default_rng(15)
        p = make_params(3, 15, time_coeff=0.3)
        g = random_graph(rng, 4, 3)
        with Tape() as tape:
            rows = aggregate(g, p)
            acc = total(rows[0])
            for r in rows[1:]:
                acc = acc + total(r)
            backward(acc, tape)
        for name, v in p.variables():
            assert np.any(v.grad != 0.0), f"no gradient reached {name}"

    def test_finite_difference_check(self):
        rng = np.random.default_rng(16)
        p = make_params(2, 16, time_coeff=0.4)
        nodes = [param(rng.uniform(-1, 1, 2)) for _ in range(3)]
        times = np.array([0.0, 5.0, 12.0])
        intervals = times[None, :] - times[:, None]

        def f():
            g = TemporalGraph(nodes=nodes, intervals=intervals)
            rows = aggregate(g, p)
            acc = total(rows[0])
            for r in rows[1:]:
                acc = acc + total(r)
            return acc

        tensors = [v for _, v in p.variables()] + nodes
        assert grad_check(f, tensors) < 1e-4
