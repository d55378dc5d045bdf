"""Hierarchical text encoding: word bi-GRU -> word attention -> comment bi-GRU.

Comments are encoded token-by-token with a bidirectional GRU, pooled by an
additive attention layer into one vector per comment, then the comment
sequence is run through a second bidirectional GRU in chronological order.
User histories go through an identically shaped (separately parameterized)
pipeline, treating the concatenated history paragraph as a single-element
comment sequence.

The recurrent step and the attention pooling are fused tape operations with
hand-written backward rules; composing them from elementary ops would cost
dozens of tape entries per token.  Their gradients are covered by the same
finite-difference checks as the elementary ops.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Variable, cmul, concat, param, record_op, row
from .data import PAD_ID


def _uniform(rng: np.random.Generator, rows: int, cols: int, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(rows, cols))


@dataclass
class GRUCellParams:
    """Input-to-hidden and hidden-to-hidden weights for the three GRU gates."""
    update_in: Variable
    update_rec: Variable
    update_bias: Variable
    reset_in: Variable
    reset_rec: Variable
    reset_bias: Variable
    cand_in: Variable
    cand_rec: Variable
    cand_bias: Variable

    @property
    def hidden_size(self) -> int:
        return self.update_in.data.shape[0]

    @property
    def input_size(self) -> int:
        return self.update_in.data.shape[1]

    @classmethod
    def init(cls, input_dim: int, hidden_dim: int, rng: np.random.Generator) -> "GRUCellParams":
        def w():
            return param(_uniform(rng, hidden_dim, input_dim, input_dim))

        def u():
            return param(_uniform(rng, hidden_dim, hidden_dim, hidden_dim))

        def b():
            return param(np.zeros(hidden_dim))

        return cls(w(), u(), b(), w(), u(), b(), w(), u(), b())

    def variables(self) -> list[tuple[str, Variable]]:
        return [("update_in", self.update_in), ("update_rec", self.update_rec),
                ("update_bias", self.update_bias), ("reset_in", self.reset_in),
                ("reset_rec", self.reset_rec), ("reset_bias", self.reset_bias),
                ("cand_in", self.cand_in), ("cand_rec", self.cand_rec),
                ("cand_bias", self.cand_bias)]


@dataclass
class AttentionParams:
    """Additive attention: score_i = tanh(vector . rep_i + bias)."""
    vector: Variable
    bias: Variable

    @classmethod
    def init(cls, dim: int, rng: np.random.Generator) -> "AttentionParams":
        bound = 1.0 / np.sqrt(dim)
        return cls(param(rng.uniform(-bound, bound, size=dim)), param(np.float64(0.0)))

    def variables(self) -> list[tuple[str, Variable]]:
        return [("vector", self.vector), ("bias", self.bias)]


class Dropout:
    """Inverted dropout over Variables; identity when rate is 0 or rng is None."""

    def __init__(self, rate: float, rng: np.random.Generator | None):
        self.rate = rate
        self.rng = rng if rate > 0.0 else None

    def __call__(self, v: Variable) -> Variable:
        if self.rng is None:
            return v
        keep = (self.rng.random(v.data.shape) >= self.rate) / (1.0 - self.rate)
        return cmul(v, keep)


def gru_step(x: Variable, h_prev: Variable, p: GRUCellParams) -> Variable:
    """One GRU update, fused into a single tape entry.

    update = sigmoid(W_u x + U_u h + b_u); reset likewise; candidate =
    tanh(W_c x + U_c (reset * h) + b_c); new h = (1 - update) * h +
    update * candidate.
    """
    xd, hd = x.data, h_prev.data
    if xd.shape != (p.input_size,) or hd.shape != (p.hidden_size,):
        raise ShapeError(f"gru_step: input {xd.shape} / hidden {hd.shape} do not "
                         f"match cell ({p.input_size}, {p.hidden_size})")
    w_z, u_z, b_z = p.update_in.data, p.update_rec.data, p.update_bias.data
    w_r, u_r, b_r = p.reset_in.data, p.reset_rec.data, p.reset_bias.data
    w_c, u_c, b_c = p.cand_in.data, p.cand_rec.data, p.cand_bias.data

    z = 1.0 / (1.0 + np.exp(-(w_z @ xd + u_z @ hd + b_z)))
    r = 1.0 / (1.0 + np.exp(-(w_r @ xd + u_r @ hd + b_r)))
    rh = r * hd
    c = np.tanh(w_c @ xd + u_c @ rh + b_c)
    h = (1.0 - z) * hd + z * c

    def bwd(out):
        def fn():
            g = out.grad
            dz = g * (c - hd)
            dc = g * z
            dh = g * (1.0 - z)
            da_c = dc * (1.0 - c * c)
            drh = u_c.T @ da_c
            dr = drh * hd
            dh += drh * r
            da_r = dr * r * (1.0 - r)
            da_z = dz * z * (1.0 - z)
            dh += u_r.T @ da_r + u_z.T @ da_z
            if x.requires_grad:
                x.grad += w_c.T @ da_c + w_r.T @ da_r + w_z.T @ da_z
            if h_prev.requires_grad:
                h_prev.grad += dh
            if p.cand_in.requires_grad:
                p.cand_in.grad += da_c[:, None] * xd
                p.cand_rec.grad += da_c[:, None] * rh
                p.cand_bias.grad += da_c
            if p.reset_in.requires_grad:
                p.reset_in.grad += da_r[:, None] * xd
                p.reset_rec.grad += da_r[:, None] * hd
                p.reset_bias.grad += da_r
            if p.update_in.requires_grad:
                p.update_in.grad += da_z[:, None] * xd
                p.update_rec.grad += da_z[:, None] * hd
                p.update_bias.grad += da_z
        return fn

    inputs = (x, h_prev, p.update_in, p.update_rec, p.update_bias,
              p.reset_in, p.reset_rec, p.reset_bias,
              p.cand_in, p.cand_rec, p.cand_bias)
    return record_op(h, inputs, bwd)


def bigru_encode(xs: list[Variable], fwd: GRUCellParams,
                 bwd: GRUCellParams) -> list[Variable]:
    """Per-position concat of forward and backward GRU states (zero inits)."""
    if not xs:
        raise ValueError("bigru_encode: empty sequence")
    n = len(xs)
    h = Variable(np.zeros(fwd.hidden_size))
    forward = []
    for x in xs:
        h = gru_step(x, h, fwd)
        forward.append(h)
    h = Variable(np.zeros(bwd.hidden_size))
    backward_states = [None] * n
    for i in range(n - 1, -1, -1):
        h = gru_step(xs[i], h, bwd)
        backward_states[i] = h
    return [concat(forward[i], backward_states[i]) for i in range(n)]


def attend(reps: list[Variable], mask: list[bool],
           params: AttentionParams) -> tuple[Variable, np.ndarray]:
    """Attention-pooled representation plus the full weight vector.

    Weights are a softmax (max-stabilized) over the tanh scores of unmasked
    positions only; masked positions get exact weight 0 and contribute
    nothing to the pooled vector.  Fused into a single tape entry.
    """
    keep = [i for i, m in enumerate(mask) if m]
    if not keep:
        raise ValueError("attend: every position is masked")
    kept = [reps[i] for i in keep]
    vd, bd = params.vector.data, params.bias.data
    for rvar in kept:
        if rvar.data.shape != vd.shape:
            raise ShapeError(f"attend: rep shape {rvar.data.shape} does not match "
                             f"attention vector {vd.shape}")
    rmat = np.array([rvar.data for rvar in kept])
    scores = np.tanh(rmat @ vd + bd)
    e = np.exp(scores - np.max(scores))
    y = e / np.sum(e)
    pooled = y @ rmat

    def make_bwd(out):
        def fn():
            g = out.grad
            dy = rmat @ g
            ds = y * (dy - np.dot(dy, y))
            da = ds * (1.0 - scores * scores)
            if params.vector.requires_grad:
                params.vector.grad += rmat.T @ da
            if params.bias.requires_grad:
                params.bias.grad += np.sum(da)
            for idx, rvar in enumerate(kept):
                if rvar.requires_grad:
                    rvar.grad += y[idx] * g + da[idx] * vd
        return fn

    out = record_op(pooled, tuple(kept) + (params.vector, params.bias), make_bwd)
    weights = np.zeros(len(reps))
    weights[keep] = y
    return out, weights


@dataclass
class EncoderParams:
    """One full hierarchical encoder (word level + pooling + sequence level)."""
    word_fwd: GRUCellParams
    word_bwd: GRUCellParams
    word_attention: AttentionParams
    seq_fwd: GRUCellParams
    seq_bwd: GRUCellParams

    @classmethod
    def init(cls, embed_dim: int, h_word: int, h_seq: int,
             rng: np.random.Generator) -> "EncoderParams":
        return cls(
            word_fwd=GRUCellParams.init(embed_dim, h_word, rng),
            word_bwd=GRUCellParams.init(embed_dim, h_word, rng),
            word_attention=AttentionParams.init(2 * h_word, rng),
            seq_fwd=GRUCellParams.init(2 * h_word, h_seq, rng),
            seq_bwd=GRUCellParams.init(2 * h_word, h_seq, rng),
        )

    @property
    def output_dim(self) -> int:
        return 2 * self.seq_fwd.hidden_size

    def variables(self) -> list[tuple[str, Variable]]:
        out = []
        for prefix, block in (("word_fwd", self.word_fwd), ("word_bwd", self.word_bwd),
                              ("seq_fwd", self.seq_fwd), ("seq_bwd", self.seq_bwd)):
            out.extend((f"{prefix}.{n}", v) for n, v in block.variables())
        out.extend((f"word_attention.{n}", v)
                   for n, v in self.word_attention.variables())
        return out


def _strip_padding(token_seqs: list[list[int]]) -> list[list[int]]:
    """Drop trailing pad tokens inside comments and trailing empty comments."""
    stripped = []
    for toks in token_seqs:
        end = len(toks)
        while end > 0 and toks[end - 1] == PAD_ID:
            end -= 1
        stripped.append(toks[:end])
    while stripped and not stripped[-1]:
        stripped.pop()
    return stripped


def _encode_token_seq(tokens: list[int], embedding: Variable, enc: EncoderParams,
                      drop: Dropout) -> tuple[Variable, np.ndarray]:
    embs = [drop(row(embedding, t)) for t in tokens]
    reps = [drop(r) for r in bigru_encode(embs, enc.word_fwd, enc.word_bwd)]
    return attend(reps, [True] * len(reps), enc.word_attention)


def encode_comments(token_seqs: list[list[int]], embedding: Variable,
                    enc: EncoderParams,
                    drop: Dropout) -> tuple[list[Variable], list[np.ndarray]]:
    """Encode a session's comments into contextualized vectors.

    Returns one vector per real comment (dimension ``enc.output_dim``) plus
    the word-attention row retained per comment for explanation export.
    Trailing padding, at token or comment level, does not affect real rows.
    """
    token_seqs = _strip_padding(token_seqs)
    if not token_seqs:
        raise ValueError("encode_comments: session has no real comments")
    comment_vecs = []
    word_attention = []
    for toks in token_seqs:
        pooled, weights = _encode_token_seq(toks, embedding, enc, drop)
        comment_vecs.append(pooled)
        word_attention.append(weights)
    outs = [drop(o) for o in bigru_encode(comment_vecs, enc.seq_fwd, enc.seq_bwd)]
    return outs, word_attention


def encode_histories(authors: list[str], history_tokens: dict[str, list[int]],
                     embedding: Variable, enc: EncoderParams,
                     drop: Dropout) -> list[Variable]:
    """History vector per comment, aligned with the comment's author.

    Each distinct author's history paragraph is encoded once through the
    full pipeline (the paragraph acts as a one-comment sequence) and shared
    across that author's comments.  An empty history yields a zero vector,
    which the downstream gate can learn to ignore.
    """
    cache: dict[str, Variable] = {}
    zero = None
    out = []
    for user in authors:
        if user not in cache:
            toks = list(history_tokens.get(user, []))
            while toks and toks[-1] == PAD_ID:
                toks.pop()
            if not toks:
                if zero is None:
                    zero = Variable(np.zeros(enc.output_dim))
                cache[user] = zero
            else:
                pooled, _ = _encode_token_seq(toks, embedding, enc, drop)
                vec = bigru_encode([pooled], enc.seq_fwd, enc.seq_bwd)[0]
                cache[user] = drop(vec)
        out.append(cache[user])
    return out
