"""Session classifier: gated history merge, user-level attention, dense head.

``forward`` composes the full pipeline: hierarchical comment encoding, the
temporal graph hop, an elementwise gate that blends each comment's graph
vector with its author's history vector, attention pooling over the merged
user representations, and a single sigmoid output unit.  Leave-one-out
ablation flags rewire the composition: ``no_topic`` / ``no_time`` drop one
edge-weight term, ``no_history`` bypasses the gate, and ``no_graph`` skips
the aggregation hop entirely (feeding comment vectors straight to the user
attention), which with the other three flags reduces the model to a plain
hierarchical attention classifier.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import graph as graph_mod
from .autodiff import (Variable, add, add_const, clamp, dot, log, param,
                       record_op, scale, sigmoid)
from .data import PAD_ID, Session, time_intervals
from .encoder import (AttentionParams, Dropout, EncoderParams, attend,
                      encode_comments, encode_histories)
from .graph import GraphParams, TemporalGraph, aggregate

PROB_EPS = 1e-12


@dataclass(frozen=True)
class AblationFlags:
    no_topic: bool = False
    no_time: bool = False
    no_history: bool = False
    no_graph: bool = False

    @classmethod
    def from_names(cls, names) -> "AblationFlags":
        valid = {f for f in cls.__dataclass_fields__}
        unknown = set(names) - valid
        if unknown:
            raise ValueError(f"unknown ablation flags: {sorted(unknown)}")
        return cls(**{n: True for n in names})

    def active(self) -> list[str]:
        return [n for n in ("no_topic", "no_time", "no_history", "no_graph")
                if getattr(self, n)]


@dataclass
class GateParams:
    """Blend weight between history and graph vectors, per comment and dimension."""
    history_weight: Variable  # d x d
    graph_weight: Variable    # d x d
    bias: Variable            # d

    @classmethod
    def init(cls, dim: int, rng: np.random.Generator) -> "GateParams":
        bound = 1.0 / np.sqrt(dim)
        return cls(param(rng.uniform(-bound, bound, size=(dim, dim))),
                   param(rng.uniform(-bound, bound, size=(dim, dim))),
                   param(np.zeros(dim)))

    def variables(self) -> list[tuple[str, Variable]]:
        return [("history_weight", self.history_weight),
                ("graph_weight", self.graph_weight), ("bias", self.bias)]


@dataclass
class HeadParams:
    user_attention: AttentionParams
    out_weight: Variable  # d
    out_bias: Variable    # scalar

    @classmethod
    def init(cls, dim: int, rng: np.random.Generator) -> "HeadParams":
        bound = 1.0 / np.sqrt(dim)
        return cls(AttentionParams.init(dim, rng),
                   param(rng.uniform(-bound, bound, size=dim)),
                   param(np.float64(0.0)))

    def variables(self) -> list[tuple[str, Variable]]:
        out = [(f"user_attention.{n}", v) for n, v in self.user_attention.variables()]
        out += [("out_weight", self.out_weight), ("out_bias", self.out_bias)]
        return out


@dataclass
class ModelParams:
    """Every trainable tensor of the pipeline."""
    embedding: Variable
    comment_encoder: EncoderParams
    history_encoder: EncoderParams
    graph: GraphParams
    gate: GateParams
    head: HeadParams
    shared_history_encoder: bool = False

    def named_parameters(self) -> list[tuple[str, Variable]]:
        out = [("embedding", self.embedding)]
        out += [(f"comment_encoder.{n}", v)
                for n, v in self.comment_encoder.variables()]
        if not self.shared_history_encoder:
            out += [(f"history_encoder.{n}", v)
                    for n, v in self.history_encoder.variables()]
        out += [(f"graph.{n}", v) for n, v in self.graph.variables()]
        out += [(f"gate.{n}", v) for n, v in self.gate.variables()]
        out += [(f"head.{n}", v) for n, v in self.head.variables()]
        return out

    @property
    def node_dim(self) -> int:
        return self.comment_encoder.output_dim


def init_params(vocab_size: int, embed_dim: int, h_word: int, h_seq: int,
                seed: int, embedding_matrix: np.ndarray | None = None,
                embedding_trainable: bool = True,
                share_history_encoder: bool = False) -> ModelParams:
    """Seeded initialization: weights uniform in +-1/sqrt(fan_in), biases zero.

    The time coefficient starts at zero and the padding embedding row is
    zero.  Draw order is fixed (comment encoder, history encoder, graph,
    gate, head) so a seed pins every tensor.
    """
    from .data import rng_for, STREAM_INIT

    rng = rng_for(STREAM_INIT, seed)
    if embedding_matrix is None:
        embedding_matrix = rng.uniform(-0.1, 0.1, size=(vocab_size, embed_dim))
        embedding_matrix[PAD_ID, :] = 0.0
    emb = Variable(np.array(embedding_matrix, dtype=np.float64),
                   requires_grad=embedding_trainable)
    comment_encoder = EncoderParams.init(embed_dim, h_word, h_seq, rng)
    history_encoder = (comment_encoder if share_history_encoder
                       else EncoderParams.init(embed_dim, h_word, h_seq, rng))
    dim = 2 * h_seq
    return ModelParams(
        embedding=emb,
        comment_encoder=comment_encoder,
        history_encoder=history_encoder,
        graph=GraphParams.init(dim, rng),
        gate=GateParams.init(dim, rng),
        head=HeadParams.init(dim, rng),
        shared_history_encoder=share_history_encoder,
    )


def _gate_row(r_h: Variable, g_in: Variable,
              p: GateParams) -> tuple[Variable, np.ndarray]:
    """One fused gate entry: sigmoid blend of a history and a graph vector."""
    wh, wg, bias = p.history_weight.data, p.graph_weight.data, p.bias.data
    b = 1.0 / (1.0 + np.exp(-(wh @ r_h.data + wg @ g_in.data + bias)))
    u = b * r_h.data + (1.0 - b) * g_in.data

    def bwd(out):
        def fn():
            gu = out.grad
            da = gu * (r_h.data - g_in.data) * b * (1.0 - b)
            if r_h.requires_grad:
                r_h.grad += gu * b + wh.T @ da
            if g_in.requires_grad:
                g_in.grad += gu * (1.0 - b) + wg.T @ da
            if p.history_weight.requires_grad:
                p.history_weight.grad += da[:, None] * r_h.data
                p.graph_weight.grad += da[:, None] * g_in.data
                p.bias.grad += da
        return fn

    out = record_op(u, (r_h, g_in, p.history_weight, p.graph_weight, p.bias),
                    bwd)
    return out, b


def gate_merge(history_rows: list[Variable], graph_rows: list[Variable],
               params: GateParams) -> tuple[list[Variable], np.ndarray]:
    """Elementwise convex blend: out = gate * history + (1 - gate) * graph.

    The gate is a sigmoid of an affine map of both inputs, so every entry is
    strictly inside (0, 1).  Returns the merged rows and the gate values.
    """
    if len(history_rows) != len(graph_rows):
        raise ValueError(f"gate_merge: {len(history_rows)} history rows vs "
                         f"{len(graph_rows)} graph rows")
    merged = []
    gates = []
    for r_h, g in zip(history_rows, graph_rows):
        row, b = _gate_row(r_h, g, params)
        merged.append(row)
        gates.append(b)
    return merged, np.array(gates)


def user_attention(rows: list[Variable], mask: list[bool],
                   head: HeadParams) -> tuple[Variable, np.ndarray]:
    """Pool merged user rows into one session vector (same contract as attend)."""
    return attend(rows, mask, head.user_attention)


def predict(session_vector: Variable, head: HeadParams) -> Variable:
    """Sigmoid of the dense layer; probability of the bullying class."""
    return sigmoid(add(dot(head.out_weight, session_vector), head.out_bias))


def bce_loss(prob: Variable, label: int) -> Variable:
    """Binary cross-entropy with probability clamping at 1e-12."""
    p = clamp(prob, PROB_EPS, 1.0 - PROB_EPS)
    if label == 1:
        return scale(log(p), -1.0)
    return scale(log(add_const(scale(p, -1.0), 1.0)), -1.0)


@dataclass
class Prediction:
    probability: float
    label: int
    user_attention: np.ndarray            # per-comment pooling weight, sums to 1
    session_vector: np.ndarray            # d
    word_attention: list[np.ndarray]      # per comment, per token
    gate_values: np.ndarray | None = None  # n x d, absent under no_history
    graph_weights: np.ndarray | None = None  # n x n, absent under no_graph
    prob_var: Variable | None = field(default=None, repr=False)


def forward(session: Session, params: ModelParams, *,
            ablation: AblationFlags = AblationFlags(),
            time_transform: str = "normalized",
            dropout_rate: float = 0.0,
            rng: np.random.Generator | None = None) -> Prediction:
    """Run the full pipeline on one prepared session.

    Dropout applies only when both ``dropout_rate`` > 0 and ``rng`` is given
    (training); evaluation is deterministic.  Record on a Tape around this
    call to train; call it bare for value-only inference.
    """
    comments = session.comments
    if comments and comments[0].tokens is None:
        raise ValueError(f"session {session.session_id} not tokenized; "
                         "run prepare_sessions first")
    n = len(comments)
    while n > 0 and all(t == PAD_ID for t in comments[n - 1].tokens):
        n -= 1
    comments = comments[:n]
    if not comments:
        raise ValueError(f"session {session.session_id}: no real comments")

    drop = Dropout(dropout_rate if rng is not None else 0.0, rng)
    token_seqs = [c.tokens for c in comments]
    r_c, word_attn = encode_comments(token_seqs, params.embedding,
                                     params.comment_encoder, drop)

    edge_weights = None
    if ablation.no_graph:
        merged_input = r_c
    else:
        intervals = time_intervals(session)[:n, :n]
        tg = TemporalGraph(nodes=r_c, intervals=intervals)
        merged_input = aggregate(tg, params.graph, time_transform=time_transform,
                                 no_topic=ablation.no_topic,
                                 no_time=ablation.no_time)
        edge_weights = tg.edge_weights

    gate_values = None
    if ablation.no_history:
        rows = merged_input
    else:
        history_tokens = session.history_tokens or {}
        r_h = encode_histories([c.user_id for c in comments], history_tokens,
                               params.embedding, params.history_encoder, drop)
        rows, gate_values = gate_merge(r_h, merged_input, params.gate)

    s, alpha = user_attention(rows, [True] * len(rows), params.head)
    prob = predict(s, params.head)
    p = float(prob.data)
    return Prediction(
        probability=p,
        label=1 if p >= 0.5 else 0,
        user_attention=alpha,
        session_vector=s.data.copy(),
        word_attention=word_attn,
        gate_values=gate_values,
        graph_weights=edge_weights,
        prob_var=prob,
    )


def session_loss(session: Session, params: ModelParams, *,
                 ablation: AblationFlags = AblationFlags(),
                 time_transform: str = "normalized",
                 dropout_rate: float = 0.0,
                 rng: np.random.Generator | None = None) -> Variable:
    pred = forward(session, params, ablation=ablation,
                   time_transform=time_transform, dropout_rate=dropout_rate,
                   rng=rng)
    return bce_loss(pred.prob_var, session.label)


def reset_aggregate_counter() -> int:
    """Zero the graph-hop call counter; returns the previous value."""
    prev = graph_mod.AGGREGATE_CALLS
    graph_mod.AGGREGATE_CALLS = 0
    return prev
