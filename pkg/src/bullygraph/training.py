"""Training loop, evaluation metrics, oversampling and the ablation runner.

The optimizer is adaptive moment estimation (beta1 0.9, beta2 0.999,
eps 1e-8) with gradient clipping at global norm 5, minimizing mean binary
cross-entropy over mini-batches of sessions.  Model selection keeps the
checkpoint with the best validation AUC (falling back to lowest validation
loss when the validation split is single-class) and stops after ``patience``
epochs without improvement.  Everything is deterministic given the config
seed: splitting, initialization, shuffling and dropout draw from fixed
substreams of it.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import Tape, Variable, backward, scale
from .data import (PAD_ID, STREAM_SMOTE, STREAM_TRAIN, EmbeddingTable,
                   Session, Vocabulary, load_embeddings, prepare_sessions,
                   random_embeddings, rng_for, split)
from .model import (AblationFlags, ModelParams, bce_loss, forward,
                    init_params, session_loss)


class ConfigError(ValueError):
    """Invalid training or oversampling configuration."""


class TrainingError(RuntimeError):
    """Raised when optimization diverges; carries the failing epoch."""

    def __init__(self, message: str, epoch: int):
        super().__init__(message)
        self.epoch = epoch


@dataclass(frozen=True)
class SmoteConfig:
    k_neighbors: int = 5
    target_ratio: float = 1.0  # minority:majority count ratio after oversampling
    seed: int = 0


@dataclass
class TrainConfig:
    seed: int = 0
    epochs: int = 30
    learning_rate: float = 1e-3
    batch_size: int = 8
    dropout_rate: float = 0.2
    max_session_len: int = 140
    max_comment_len: int = 30
    max_history_len: int = 120
    embed_dim: int = 400
    h_sent: int = 32
    h_sess: int = 64
    ablation: AblationFlags = field(default_factory=AblationFlags)
    time_transform: str = "normalized"
    patience: int = 10
    oversample: bool = False
    grad_clip: float = 5.0
    share_history_encoder: bool = False
    embeddings_path: str | None = None
    smote: SmoteConfig = field(default_factory=SmoteConfig)

    def validate(self) -> None:
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ConfigError("epochs, batch_size and learning_rate must be positive")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ConfigError(f"dropout_rate {self.dropout_rate} outside [0, 1)")
        if min(self.max_session_len, self.max_comment_len, self.max_history_len,
               self.embed_dim, self.h_sent, self.h_sess) < 1:
            raise ConfigError("sizes must be positive")
        if self.time_transform not in ("normalized", "raw"):
            raise ConfigError(f"unknown time_transform {self.time_transform!r}")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__
             if k not in ("ablation", "smote")}
        d["ablation"] = self.ablation.active()
        d["smote"] = {"k_neighbors": self.smote.k_neighbors,
                      "target_ratio": self.smote.target_ratio,
                      "seed": self.smote.seed}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        kwargs = dict(d)
        if "ablation" in kwargs:
            kwargs["ablation"] = AblationFlags.from_names(kwargs["ablation"])
        if "smote" in kwargs:
            kwargs["smote"] = SmoteConfig(**kwargs["smote"])
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg


@dataclass
class Metrics:
    recall: float
    f1: float
    auc: float | None
    recall_std: float | None = None
    f1_std: float | None = None
    auc_std: float | None = None

    def text(self) -> str:
        """Human-readable summary, scores scaled by 100."""
        def cell(v, s):
            if v is None:
                return "na"
            if s is None:
                return f"{100 * v:.2f}"
            return f"{100 * v:.2f}+-{100 * s:.2f}"
        return (f"recall {cell(self.recall, self.recall_std)} "
                f"f1 {cell(self.f1, self.f1_std)} "
                f"auc {cell(self.auc, self.auc_std)}")


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def auc(pairs: list[tuple[float, int]]) -> float:
    """Rank-based AUC (Mann-Whitney with average ranks for ties)."""
    scores = np.array([p for p, _ in pairs], dtype=np.float64)
    labels = np.array([y for _, y in pairs])
    n_pos = int(np.sum(labels == 1))
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC undefined: need at least one score from each class")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores))
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    sum_pos = float(np.sum(ranks[labels == 1]))
    return (sum_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def recall_f1(pairs: list[tuple[float, int]], threshold: float = 0.5) -> tuple[float, float]:
    """Positive-class recall and F1 at the given probability threshold."""
    tp = fp = fn = 0
    for p, y in pairs:
        pred = 1 if p >= threshold else 0
        if pred == 1 and y == 1:
            tp += 1
        elif pred == 1 and y == 0:
            fp += 1
        elif pred == 0 and y == 1:
            fn += 1
    recall = tp / (tp + fn) if tp + fn else 0.0
    precision = tp / (tp + fp) if tp + fp else 0.0
    f1 = (2 * precision * recall / (precision + recall)) if precision + recall else 0.0
    return recall, f1


def predict_scores(params: ModelParams, sessions: list[Session],
                   config: TrainConfig) -> list[tuple[float, int]]:
    """Value-only forward over a prepared session list."""
    return [(forward(s, params, ablation=config.ablation,
                     time_transform=config.time_transform).probability, s.label)
            for s in sessions]


def evaluate(params: ModelParams, sessions: list[Session],
             config: TrainConfig) -> Metrics:
    """Recall, positive-class F1 and AUC at threshold 0.5.

    A single-class input leaves AUC undefined (None); recall and F1 are
    still reported.
    """
    pairs = predict_scores(params, sessions, config)
    r, f1 = recall_f1(pairs)
    try:
        a = auc(pairs)
    except ValueError:
        a = None
    return Metrics(recall=r, f1=f1, auc=a)


def accuracy(pairs: list[tuple[float, int]], threshold: float = 0.5) -> float:
    hits = sum(1 for p, y in pairs if (1 if p >= threshold else 0) == y)
    return hits / len(pairs) if pairs else 0.0


def aggregate_metrics(runs: list[Metrics]) -> Metrics:
    """Mean and population standard deviation across repeated runs."""
    def agg(values):
        if any(v is None for v in values):
            return None, None
        a = np.array(values, dtype=np.float64)
        # shift by the first value so identical runs give exactly zero std
        b = a - a[0]
        return float(a.mean()), float(np.sqrt(np.mean((b - b.mean()) ** 2)))

    r, rs = agg([m.recall for m in runs])
    f, fs = agg([m.f1 for m in runs])
    a, as_ = agg([m.auc for m in runs])
    return Metrics(recall=r, f1=f, auc=a, recall_std=rs, f1_std=fs, auc_std=as_)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Adaptive moment estimation over named parameter Variables."""

    def __init__(self, named_params: list[tuple[str, Variable]], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.named_params = [(n, v) for n, v in named_params if v.requires_grad]
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(v.data) for n, v in self.named_params}
        self.v = {n: np.zeros_like(v.data) for n, v in self.named_params}

    def clip_gradients(self, max_norm: float) -> bool:
        """Scale all gradients so their global norm is at most max_norm."""
        sq = sum(float(np.sum(v.grad * v.grad)) for _, v in self.named_params)
        norm = np.sqrt(sq)
        if norm > max_norm:
            factor = max_norm / norm
            for _, v in self.named_params:
                v.grad *= factor
            return True
        return False

    def step(self) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for n, var in self.named_params:
            g = var.grad
            self.m[n] = self.beta1 * self.m[n] + (1.0 - self.beta1) * g
            self.v[n] = self.beta2 * self.v[n] + (1.0 - self.beta2) * g * g
            m_hat = self.m[n] / b1c
            v_hat = self.v[n] / b2c
            var.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for _, v in self.named_params:
            v.zero_grad()


# ---------------------------------------------------------------------------
# SMOTE oversampling
# ---------------------------------------------------------------------------

@dataclass
class SmoteReport:
    base_vectors: np.ndarray
    synthetic: np.ndarray
    records: list[tuple[int, int, float]]  # (base index, neighbor index, lambda)
    counts_before: dict[int, int]
    counts_after: dict[int, int]


def smote(vectors: np.ndarray, config: SmoteConfig,
          majority_count: int) -> tuple[np.ndarray, list[tuple[int, int, float]]]:
    """Interpolated minority synthetics: x + lambda * (neighbor - x).

    Neighbors are the k nearest minority points by Euclidean distance;
    lambda is uniform in [0, 1].  Generates enough points to bring the
    minority count up to ``target_ratio`` times the majority count.  Every
    synthetic is reconstructible from its recorded (base, neighbor, lambda).
    """
    m = len(vectors)
    if config.k_neighbors < 1 or m <= config.k_neighbors:
        raise ConfigError(
            f"SMOTE needs minority count > k_neighbors, got {m} <= {config.k_neighbors}")
    target = int(round(config.target_ratio * majority_count))
    n_new = max(0, target - m)
    if n_new == 0:
        return np.zeros((0, vectors.shape[1])), []

    diff = vectors[:, None, :] - vectors[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=2))
    np.fill_diagonal(dist, np.inf)
    neighbors = np.argsort(dist, axis=1, kind="mergesort")[:, :config.k_neighbors]

    rng = rng_for(STREAM_SMOTE, config.seed)
    records = []
    synth = np.empty((n_new, vectors.shape[1]))
    for i in range(n_new):
        base = int(rng.integers(0, m))
        nn = int(neighbors[base, int(rng.integers(0, config.k_neighbors))])
        lam = float(rng.random())
        synth[i] = vectors[base] + lam * (vectors[nn] - vectors[base])
        records.append((base, nn, lam))
    return synth, records


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _ids_hash(sessions: list[Session]) -> str:
    joined = "\n".join(s.session_id for s in sessions)
    return hashlib.sha256(joined.encode("utf-8")).hexdigest()


@dataclass
class TrainResult:
    params: ModelParams
    vocab: Vocabulary
    config: TrainConfig
    epoch_log: list[str]
    best_epoch: int
    train_sessions: list[Session]
    val_sessions: list[Session]
    test_sessions: list[Session]
    val_metrics: Metrics
    test_metrics: Metrics
    split_hashes: dict[str, str]
    smote_report: SmoteReport | None = None


def _snapshot(params: ModelParams) -> dict[str, np.ndarray]:
    return {n: v.data.copy() for n, v in params.named_parameters()}


def _restore(params: ModelParams, snap: dict[str, np.ndarray]) -> None:
    for n, v in params.named_parameters():
        v.data[...] = snap[n]


def _val_loss(pairs: list[tuple[float, int]]) -> float:
    eps = 1e-12
    total = 0.0
    for p, y in pairs:
        p = min(max(p, eps), 1.0 - eps)
        total += -(np.log(p) if y == 1 else np.log(1.0 - p))
    return total / len(pairs) if pairs else 0.0


def train(corpus: list[Session], config: TrainConfig,
          embeddings: EmbeddingTable | None = None) -> TrainResult:
    """Split, initialize, optimize, and keep the best-validation checkpoint.

    Raises TrainingError (with the epoch index) if the loss goes non-finite.
    With ``config.oversample`` set, a second phase balances the training
    split by SMOTE over frozen session vectors and retrains the dense head
    on real plus synthetic vectors; validation and test stay untouched.
    """
    config.validate()
    train_raw, val_raw, test_raw = split(corpus, config.seed)
    vocab = Vocabulary.from_sessions(corpus)
    prep = lambda ss: prepare_sessions(
        ss, vocab, max_session_len=config.max_session_len,
        max_comment_len=config.max_comment_len,
        max_history_len=config.max_history_len)
    train_s, val_s, test_s = prep(train_raw), prep(val_raw), prep(test_raw)
    split_hashes = {"val": _ids_hash(val_s), "test": _ids_hash(test_s)}

    if embeddings is None:
        if config.embeddings_path:
            embeddings = load_embeddings(config.embeddings_path, vocab,
                                         config.embed_dim, config.seed)
        else:
            embeddings = random_embeddings(vocab, config.embed_dim, config.seed)
    if embeddings.matrix.shape != (vocab.size, config.embed_dim):
        raise ConfigError(
            f"embedding table shape {embeddings.matrix.shape} does not match "
            f"vocab {vocab.size} x embed_dim {config.embed_dim}")

    params = init_params(vocab.size, config.embed_dim, config.h_sent,
                         config.h_sess, config.seed,
                         embedding_matrix=embeddings.matrix,
                         embedding_trainable=embeddings.trainable,
                         share_history_encoder=config.share_history_encoder)
    optimizer = Adam(params.named_parameters(), config.learning_rate)
    rng = rng_for(STREAM_TRAIN, config.seed)

    epoch_log: list[str] = []
    best_score = (-np.inf, -np.inf)
    best_epoch = -1
    best_snap = None
    stale = 0

    for epoch in range(config.epochs):
        order = rng.permutation(len(train_s))
        epoch_loss = 0.0
        clipped = 0
        for start in range(0, len(order), config.batch_size):
            batch = [train_s[i] for i in order[start:start + config.batch_size]]
            optimizer.zero_grad()
            for sess in batch:
                with Tape() as tape:
                    loss = session_loss(sess, params, ablation=config.ablation,
                                        time_transform=config.time_transform,
                                        dropout_rate=config.dropout_rate, rng=rng)
                    scaled = scale(loss, 1.0 / len(batch))
                    backward(scaled, tape)
                value = float(loss.data)
                if not np.isfinite(value):
                    raise TrainingError(
                        f"non-finite loss on session {sess.session_id}", epoch)
                epoch_loss += value
            if params.embedding.requires_grad:
                params.embedding.grad[PAD_ID, :] = 0.0
            if optimizer.clip_gradients(config.grad_clip):
                clipped += 1
            optimizer.step()
        epoch_loss /= max(1, len(train_s))

        val_pairs = predict_scores(params, val_s, config)
        vr, vf = recall_f1(val_pairs)
        vl = _val_loss(val_pairs)
        try:
            va = auc(val_pairs)
            auc_text = f"{va:.6f}"
        except ValueError:
            va = None
            auc_text = "na"
        # best validation AUC, ties broken by lower validation loss so the
        # kept checkpoint stays calibrated once AUC saturates
        score = (va if va is not None else -1.0, -vl)
        improved = score > best_score
        if improved:
            best_score = score
            best_epoch = epoch
            best_snap = _snapshot(params)
            stale = 0
        else:
            stale += 1
        epoch_log.append(
            f"epoch {epoch:03d} train_loss {epoch_loss:.6f} val_loss {vl:.6f} "
            f"val_recall {vr:.6f} val_f1 {vf:.6f} val_auc {auc_text} "
            f"clipped {clipped}{' *' if improved else ''}")
        if stale > config.patience:
            epoch_log.append(f"early stop at epoch {epoch:03d} "
                             f"(no improvement for {stale} epochs)")
            break

    if best_snap is not None:
        _restore(params, best_snap)

    smote_report = None
    if config.oversample:
        smote_report = _oversample_head(params, train_s, config)

    result = TrainResult(
        params=params, vocab=vocab, config=config, epoch_log=epoch_log,
        best_epoch=best_epoch, train_sessions=train_s, val_sessions=val_s,
        test_sessions=test_s,
        val_metrics=evaluate(params, val_s, config),
        test_metrics=evaluate(params, test_s, config),
        split_hashes=split_hashes,
    )
    result.smote_report = smote_report
    if _ids_hash(val_s) != split_hashes["val"] or _ids_hash(test_s) != split_hashes["test"]:
        raise TrainingError("validation/test splits mutated during training",
                            config.epochs)
    return result


def _session_vectors(params: ModelParams, sessions: list[Session],
                     config: TrainConfig) -> np.ndarray:
    return np.array([forward(s, params, ablation=config.ablation,
                             time_transform=config.time_transform).session_vector
                     for s in sessions])


def _oversample_head(params: ModelParams, train_s: list[Session],
                     config: TrainConfig) -> SmoteReport:
    """Balance classes in frozen session-vector space, then refit the head."""
    vectors = _session_vectors(params, train_s, config)
    labels = np.array([s.label for s in train_s])
    counts = {0: int(np.sum(labels == 0)), 1: int(np.sum(labels == 1))}
    minority = 1 if counts[1] <= counts[0] else 0
    majority = 1 - minority
    smote_cfg = replace(config.smote, seed=config.smote.seed or config.seed)
    synth, records = smote(vectors[labels == minority], smote_cfg, counts[majority])

    x = np.concatenate([vectors, synth], axis=0)
    y = np.concatenate([labels, np.full(len(synth), minority)])
    counts_after = {0: int(np.sum(y == 0)), 1: int(np.sum(y == 1))}

    head_params = [("out_weight", params.head.out_weight),
                   ("out_bias", params.head.out_bias)]
    opt = Adam(head_params, config.learning_rate)
    rng = rng_for(STREAM_TRAIN, config.seed + 7919)
    for _ in range(200):
        order = rng.permutation(len(x))
        for start in range(0, len(order), 32):
            idx = order[start:start + 32]
            opt.zero_grad()
            for i in idx:
                with Tape() as tape:
                    from .autodiff import add, const, dot, sigmoid
                    s_vec = const(x[i])
                    prob = sigmoid(add(dot(params.head.out_weight, s_vec),
                                       params.head.out_bias))
                    loss = scale(bce_loss(prob, int(y[i])), 1.0 / len(idx))
                    backward(loss, tape)
            opt.step()
    return SmoteReport(base_vectors=vectors[labels == minority],
                       synthetic=synth, records=records,
                       counts_before=counts, counts_after=counts_after)


def repeat_runs(corpus: list[Session], config: TrainConfig,
                n_seeds: int = 5) -> tuple[Metrics, list[TrainResult]]:
    """Re-train with seeds base..base+n-1; aggregate test metrics mean+-std."""
    if n_seeds < 1:
        raise ConfigError("n_seeds must be >= 1")
    results = []
    for k in range(n_seeds):
        cfg = replace(config, seed=config.seed + k)
        results.append(train(corpus, cfg))
    summary = aggregate_metrics([r.test_metrics for r in results])
    return summary, results


ABLATION_VARIANTS: list[tuple[str, AblationFlags]] = [
    ("full", AblationFlags()),
    ("no_topic", AblationFlags(no_topic=True)),
    ("no_time", AblationFlags(no_time=True)),
    ("no_history", AblationFlags(no_history=True)),
    ("han", AblationFlags(no_topic=True, no_time=True, no_history=True,
                          no_graph=True)),
]


def run_ablation(corpus: list[Session], config: TrainConfig,
                 n_seeds: int = 5) -> dict[str, Metrics]:
    """Leave-one-out table: full model, each single ablation, and the
    hierarchical-attention reference with all four flags set."""
    table = {}
    for name, flags in ABLATION_VARIANTS:
        cfg = replace(config, ablation=flags)
        summary, _ = repeat_runs(corpus, cfg, n_seeds)
        table[name] = summary
    return table


# ---------------------------------------------------------------------------
# checkpoints and reports
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(path: str, params: ModelParams, config: TrainConfig,
                    vocab: Vocabulary) -> None:
    doc = {
        "version": CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "vocab": vocab.to_dict(),
        "embedding_trainable": bool(params.embedding.requires_grad),
        "params": {name: {"shape": list(v.data.shape),
                          "values": v.data.ravel().tolist()}
                   for name, v in params.named_parameters()},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_checkpoint(path: str) -> tuple[ModelParams, TrainConfig, Vocabulary]:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {doc.get('version')}")
    config = TrainConfig.from_dict(doc["config"])
    vocab = Vocabulary.from_dict(doc["vocab"])
    params = init_params(vocab.size, config.embed_dim, config.h_sent,
                         config.h_sess, config.seed,
                         embedding_trainable=doc.get("embedding_trainable", True),
                         share_history_encoder=config.share_history_encoder)
    saved = doc["params"]
    for name, v in params.named_parameters():
        if name not in saved:
            raise ConfigError(f"checkpoint missing parameter {name}")
        entry = saved[name]
        arr = np.array(entry["values"], dtype=np.float64).reshape(entry["shape"])
        if arr.shape != v.data.shape:
            raise ConfigError(f"checkpoint parameter {name} has shape {arr.shape}, "
                              f"expected {v.data.shape}")
        v.data[...] = arr
    return params, config, vocab


def metrics_csv_rows(run: str, seed, split_name: str, m: Metrics) -> str:
    a = "na" if m.auc is None else repr(m.auc)
    return f"{run},{seed},{split_name},{m.recall!r},{m.f1!r},{a}"


def summary_csv_row(run: str, split_name: str, m: Metrics) -> str:
    def cell(v, s):
        if v is None:
            return "na"
        if s is None:
            return repr(v)
        return f"{v:.6f}+-{s:.6f}"
    return (f"{run},summary,{split_name},{cell(m.recall, m.recall_std)},"
            f"{cell(m.f1, m.f1_std)},{cell(m.auc, m.auc_std)}")


def write_metrics_csv(path: str, lines: list[str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("run,seed,split,recall,f1,auc\n")
        for line in lines:
            fh.write(line + "\n")
