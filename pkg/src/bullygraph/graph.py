"""Per-session temporal graph over comment nodes with learned edge weights.

Every session becomes a fully connected graph (self-loops included) whose
nodes are the encoded comment vectors and whose edges carry the signed
minute interval between the two comments.  An edge weight combines a topic
coherence term (transformed dot product of the node vectors) with a temporal
term (learned coefficient times the interval) through a tanh squash, so
weights live in the open interval (-1, 1) and may be negative.  Aggregation
is a single hop: each node sums its weighted, linearly transformed
neighbors, itself included.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (Variable, add, dot, matmul, param, record_op, scale,
                       tanh)

# Incremented on every aggregate() call; tests use it to prove the graph
# path is bypassed entirely under the hierarchical-baseline ablation.
AGGREGATE_CALLS = 0


@dataclass
class GraphParams:
    agg_transform: Variable    # d x d, applied to each neighbor before summing
    topic_transform: Variable  # d x d, one-sided transform inside the dot product
    time_coeff: Variable       # scalar multiplier on the interval term

    @classmethod
    def init(cls, dim: int, rng: np.random.Generator) -> "GraphParams":
        bound = 1.0 / np.sqrt(dim)
        # Both edge terms start at zero: every edge weight begins at
        # tanh(0) = 0 and the hop is silent, so early training is driven by
        # the encoders while the topic and time terms grow in only where the
        # data rewards them.  Both terms keep nonzero gradients at zero
        # (each is linear in its parameter).
        return cls(param(rng.uniform(-bound, bound, size=(dim, dim))),
                   param(np.zeros((dim, dim))),
                   param(np.float64(0.0)))

    def variables(self) -> list[tuple[str, Variable]]:
        return [("agg_transform", self.agg_transform),
                ("topic_transform", self.topic_transform),
                ("time_coeff", self.time_coeff)]


@dataclass
class TemporalGraph:
    nodes: list[Variable]      # one encoded comment vector per real comment
    intervals: np.ndarray      # (n, n) signed minutes, entry (k, j) = t_j - t_k
    edge_weights: np.ndarray | None = None  # cached by aggregate() for export


def topic_coherence(r_k: Variable, r_j: Variable, topic_transform: Variable) -> Variable:
    """(r_k . transform) dotted with r_j; asymmetric because only the
    neighbor side is transformed."""
    return dot(matmul(r_k, topic_transform), r_j)


def interval_scale(intervals: np.ndarray, time_transform: str) -> float:
    """Divisor applied to raw intervals before the learned coefficient.

    ``normalized`` maps each session's intervals into [-1, 1] by its max
    absolute interval (1.0 when all intervals are zero), keeping the tanh
    squash out of saturation for hour-scale gaps.  ``raw`` leaves minutes
    untouched.
    """
    if time_transform == "raw":
        return 1.0
    if time_transform == "normalized":
        m = float(np.max(np.abs(intervals))) if intervals.size else 0.0
        return m if m > 0.0 else 1.0
    raise ValueError(f"unknown time_transform {time_transform!r}")


def temporal_factor(t_kj: float, time_coeff: Variable, scale_divisor: float = 1.0) -> Variable:
    """Learned coefficient times the (scaled) signed interval; odd in t_kj."""
    return scale(time_coeff, t_kj / scale_divisor)


def edge_weight(r_k: Variable, r_j: Variable, t_kj: float, params: GraphParams,
                *, scale_divisor: float = 1.0, no_topic: bool = False,
                no_time: bool = False) -> Variable:
    """tanh of topic + time factors; either term can be ablated away."""
    parts = []
    if not no_topic:
        parts.append(topic_coherence(r_k, r_j, params.topic_transform))
    if not no_time:
        parts.append(temporal_factor(t_kj, params.time_coeff, scale_divisor))
    if not parts:
        return Variable(np.float64(0.0))
    acc = parts[0]
    for p in parts[1:]:
        acc = add(acc, p)
    return tanh(acc)


def _pair_weight(topic_k: Variable | None, r_j: Variable | None,
                 time_coeff: Variable, tau: float) -> Variable:
    """tanh(topic_k . r_j + coeff * tau) as one fused tape entry.

    ``topic_k`` is the neighbor vector already multiplied by the topic
    transform (shared across all centers j), so the per-pair work is a dot
    product.  Either term may be absent under ablation.
    """
    score = 0.0
    inputs = []
    if topic_k is not None:
        score = score + float(np.dot(topic_k.data, r_j.data))
        inputs += [topic_k, r_j]
    use_time = tau is not None
    if use_time:
        score = score + float(time_coeff.data) * tau
        inputs.append(time_coeff)
    pi = np.tanh(score)

    def bwd(out):
        def fn():
            g = float(out.grad) * (1.0 - pi * pi)
            if topic_k is not None:
                if topic_k.requires_grad:
                    topic_k.grad += g * r_j.data
                if r_j.requires_grad:
                    r_j.grad += g * topic_k.data
            if use_time and time_coeff.requires_grad:
                time_coeff.grad += g * tau
        return fn

    return record_op(np.float64(pi), inputs, bwd)


def _weighted_row(pis: list[Variable], vecs: list[Variable]) -> Variable:
    """sum_k pi_k * vec_k as one fused tape entry."""
    w = np.array([p.data for p in pis])
    v = np.array([x.data for x in vecs])
    data = w @ v

    def bwd(out):
        def fn():
            g = out.grad
            for pi, vec in zip(pis, vecs):
                if vec.requires_grad:
                    vec.grad += pi.data * g
                if pi.requires_grad:
                    pi.grad += np.dot(g, vec.data)
        return fn

    return record_op(data, tuple(pis) + tuple(vecs), bwd)


def aggregate(graph: TemporalGraph, params: GraphParams, *,
              time_transform: str = "normalized", no_topic: bool = False,
              no_time: bool = False,
              override_weights: np.ndarray | None = None) -> list[Variable]:
    """One-hop aggregation: out_j = sum_k weight(k, j) * transform @ node_k.

    The sum runs over every real comment k including k = j (self-loop with a
    zero interval).  The topic-side transform of each neighbor is computed
    once and shared across centers; per-pair weights and per-center sums are
    fused tape entries (numerically identical to composing edge_weight and
    elementary sums, which the brute-force oracle tests assert).  The n x n
    weight matrix is cached on the graph for explanation export.
    ``override_weights`` is a test hook that replaces the learned weights
    with fixed constants.
    """
    global AGGREGATE_CALLS
    AGGREGATE_CALLS += 1
    n = len(graph.nodes)
    if n == 0:
        raise ValueError("aggregate: graph has no nodes")
    divisor = interval_scale(graph.intervals, time_transform)
    transformed = [matmul(params.agg_transform, r) for r in graph.nodes]
    topic_side = None if no_topic else [matmul(r, params.topic_transform)
                                        for r in graph.nodes]

    weights = np.zeros((n, n))
    out = []
    for j in range(n):
        pis = []
        for k in range(n):
            if override_weights is not None:
                pi = Variable(np.float64(override_weights[k, j]))
            else:
                pi = _pair_weight(
                    None if no_topic else topic_side[k],
                    None if no_topic else graph.nodes[j],
                    params.time_coeff,
                    None if no_time else float(graph.intervals[k, j]) / divisor)
            weights[k, j] = float(pi.data)
            pis.append(pi)
        out.append(_weighted_row(pis, transformed))
    graph.edge_weights = weights
    return out
