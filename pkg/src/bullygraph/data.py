"""Session data model, tokenization, splits, embeddings and the synthetic corpus generator.

A session is an ordered comment thread with per-comment timestamps (minutes
since the initial post), user ids, per-user history text and a binary label.
Sessions are stored one JSON object per line with fields ``session_id``,
``label``, ``comments`` (array of ``{user, t, text}`` sorted by ``t``, first
``t`` = 0) and ``histories`` (object user -> string).

All randomness flows through numpy's PCG64 generator seeded with
``[stream, seed]`` pairs, which is reproducible across platforms.  Stream
constants are below; fixing them keeps independent concerns (splitting,
corpus generation, embedding init, training) on independent substreams of
the same user-facing seed.
"""

from __future__ import annotations

import json
import string
from dataclasses import dataclass, field, asdict, replace

import numpy as np

STREAM_SPLIT = 1
STREAM_INIT = 2
STREAM_TRAIN = 3
STREAM_EMBED = 4
STREAM_CORPUS = 5
STREAM_SMOTE = 6

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
PAD_ID = 0
UNK_ID = 1

# token-edge punctuation; '@' is kept so mentions survive, '_' so user ids do
_EDGE_PUNCT = "".join(c for c in string.punctuation if c not in "@_")


class CorpusError(ValueError):
    """Malformed or invariant-violating session data."""


def rng_for(stream: int, seed: int) -> np.random.Generator:
    return np.random.default_rng([stream, seed])


@dataclass
class Comment:
    user_id: str
    timestamp_minutes: float
    text: str
    tokens: list[int] | None = None


@dataclass
class Session:
    session_id: str
    comments: list[Comment]
    label: int
    histories: dict[str, str] = field(default_factory=dict)
    history_tokens: dict[str, list[int]] | None = None

    def validate(self) -> None:
        if not self.comments:
            raise CorpusError(f"session {self.session_id}: no comments")
        if self.label not in (0, 1):
            raise CorpusError(f"session {self.session_id}: label must be 0 or 1")
        if self.comments[0].timestamp_minutes != 0.0:
            raise CorpusError(
                f"session {self.session_id}: first comment must be at t=0, "
                f"got {self.comments[0].timestamp_minutes}")
        prev = 0.0
        for c in self.comments:
            if c.timestamp_minutes < prev:
                raise CorpusError(f"session {self.session_id}: non-monotonic timestamps")
            prev = c.timestamp_minutes


class Vocabulary:
    """Token -> id mapping with a reserved username block.

    Layout: id 0 is padding, id 1 is the unknown token, ids [2, 2+n_users)
    are username tokens (one per distinct user, in first-seen order), word
    tokens follow.  Username tokens can never collide with word tokens.
    """

    def __init__(self, users: list[str], words: list[str]):
        self.users = list(users)
        self.words = list(words)
        self.user_index = {u: k for k, u in enumerate(self.users)}
        self._user_lower = {u.lower(): k for k, u in enumerate(self.users)}
        base = 2 + len(self.users)
        self.word_to_id = {w: base + i for i, w in enumerate(self.words)}

    @property
    def size(self) -> int:
        return 2 + len(self.users) + len(self.words)

    def user_token_id(self, user_id: str) -> int:
        k = self.user_index.get(user_id)
        if k is None:
            return UNK_ID
        return 2 + k

    def mention_token_id(self, name: str) -> int | None:
        """Username token for an @mention body, matched case-insensitively."""
        k = self._user_lower.get(name.lower())
        return None if k is None else 2 + k

    def word_id(self, token: str) -> int:
        return self.word_to_id.get(token, UNK_ID)

    def token_string(self, token_id: int) -> str:
        if token_id == PAD_ID:
            return PAD_TOKEN
        if token_id == UNK_ID:
            return UNK_TOKEN
        if token_id < 2 + len(self.users):
            return f"USER_{token_id - 2}"
        return self.words[token_id - 2 - len(self.users)]

    @classmethod
    def from_sessions(cls, sessions: list[Session]) -> "Vocabulary":
        """Scan a corpus in reading order; users first-seen, words first-seen."""
        users: list[str] = []
        seen_users = set()
        words: list[str] = []
        seen_words = set()

        def add_user(u: str) -> None:
            if u not in seen_users:
                seen_users.add(u)
                users.append(u)

        def add_words(text: str) -> None:
            for raw in text.lower().split():
                t = raw.strip(_EDGE_PUNCT)
                if not t or t.startswith("@"):
                    continue
                if t not in seen_words:
                    seen_words.add(t)
                    words.append(t)

        for s in sessions:
            for c in s.comments:
                add_user(c.user_id)
            for u in s.histories:
                add_user(u)
            for c in s.comments:
                add_words(c.text)
            for u, h in s.histories.items():
                add_words(h)
        return cls(users, words)

    def to_dict(self) -> dict:
        return {"users": self.users, "words": self.words}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(d["users"], d["words"])


def tokenize(text: str, author: str, vocab: Vocabulary,
             max_comment_len: int = 30) -> list[int]:
    """Lowercase, whitespace-split, strip edge punctuation, map to ids.

    The author's username token is prepended; @mentions of known users
    resolve to that user's username token; unknown words map to the unknown
    id.  The result is truncated to ``max_comment_len`` tokens.
    """
    toks = [vocab.user_token_id(author)]
    for raw in text.lower().split():
        t = raw.strip(_EDGE_PUNCT)
        if not t:
            continue
        if t.startswith("@") and len(t) > 1:
            uid = vocab.mention_token_id(t[1:])
            toks.append(uid if uid is not None else UNK_ID)
        else:
            toks.append(vocab.word_id(t))
    return toks[:max_comment_len]


def tokenize_history(text: str, vocab: Vocabulary, max_history_len: int) -> list[int]:
    """History paragraphs carry no author prefix and no mention resolution."""
    toks = []
    for raw in text.lower().split():
        t = raw.strip(_EDGE_PUNCT)
        if t:
            toks.append(vocab.word_id(t))
        if len(toks) >= max_history_len:
            break
    return toks


def prepare_sessions(sessions: list[Session], vocab: Vocabulary, *,
                     max_session_len: int = 140, max_comment_len: int = 30,
                     max_history_len: int = 120) -> list[Session]:
    """Tokenize comments and histories; over-long sessions keep the earliest comments."""
    out = []
    for s in sessions:
        comments = [replace(c, tokens=tokenize(c.text, c.user_id, vocab, max_comment_len))
                    for c in s.comments[:max_session_len]]
        history_tokens = {u: tokenize_history(h, vocab, max_history_len)
                          for u, h in s.histories.items()}
        out.append(Session(s.session_id, comments, s.label, dict(s.histories),
                           history_tokens))
    return out


def time_intervals(session: Session) -> np.ndarray:
    """Signed minute intervals: entry (k, j) = t_j - t_k.  Antisymmetric, zero diagonal."""
    t = np.array([c.timestamp_minutes for c in session.comments], dtype=np.float64)
    return t[None, :] - t[:, None]


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_sessions(sessions: list[Session], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in sessions:
            rec = {
                "session_id": s.session_id,
                "label": s.label,
                "comments": [{"user": c.user_id, "t": c.timestamp_minutes, "text": c.text}
                             for c in s.comments],
                "histories": s.histories,
            }
            fh.write(json.dumps(rec) + "\n")


def load_sessions(path: str) -> list[Session]:
    """Parse and validate a session file; errors carry 1-based line numbers."""
    sessions = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                comments = [Comment(c["user"], float(c["t"]), c["text"])
                            for c in rec["comments"]]
                session = Session(rec["session_id"], comments, int(rec["label"]),
                                  dict(rec.get("histories", {})))
            except (KeyError, TypeError, ValueError, json.JSONDecodeError) as e:
                raise CorpusError(f"{path}:{lineno}: malformed session record: {e}") from e
            try:
                session.validate()
            except CorpusError as e:
                raise CorpusError(f"{path}:{lineno}: {e}") from e
            sessions.append(session)
    return sessions


def split(corpus: list[Session], seed: int) -> tuple[list[Session], list[Session], list[Session]]:
    """Disjoint 80/10/10 partition, rounding toward train, deterministic by seed."""
    n = len(corpus)
    if n < 10:
        raise CorpusError(f"corpus too small to split: {n} sessions (need >= 10)")
    perm = rng_for(STREAM_SPLIT, seed).permutation(n)
    n_val = n // 10
    n_test = n // 10
    val = [corpus[i] for i in perm[:n_val]]
    test = [corpus[i] for i in perm[n_val:n_val + n_test]]
    train = [corpus[i] for i in perm[n_val + n_test:]]
    return train, val, test


# ---------------------------------------------------------------------------
# embeddings
# ---------------------------------------------------------------------------

@dataclass
class EmbeddingTable:
    matrix: np.ndarray  # vocab_size x embed_dim
    trainable: bool = True


def random_embeddings(vocab: Vocabulary, embed_dim: int, seed: int) -> EmbeddingTable:
    """Uniform [-0.1, 0.1] rows; padding row zeroed."""
    rng = rng_for(STREAM_EMBED, seed)
    m = rng.uniform(-0.1, 0.1, size=(vocab.size, embed_dim))
    m[PAD_ID, :] = 0.0
    return EmbeddingTable(m)


def load_embeddings(path: str, vocab: Vocabulary, embed_dim: int,
                    seed: int = 0) -> EmbeddingTable:
    """Load word-vector text format: header ``count dim``, then ``token v1 .. vdim``.

    Rows for in-vocabulary word tokens are copied verbatim; everything else
    (username tokens, unknown, words missing from the file) is initialized
    uniform in [-0.1, 0.1] from the run seed.  The padding row is zeroed.
    """
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise CorpusError(f"{path}: bad embedding header {header!r}")
        _, dim = int(header[0]), int(header[1])
        if dim != embed_dim:
            raise CorpusError(
                f"{path}: embedding dimension {dim} does not match configured {embed_dim}")
        vectors = {}
        for lineno, line in enumerate(fh, start=2):
            parts = line.rstrip("\n").split(" ")
            if len(parts) != dim + 1:
                raise CorpusError(f"{path}:{lineno}: expected {dim} values")
            vectors[parts[0]] = np.array([float(x) for x in parts[1:]], dtype=np.float64)

    table = random_embeddings(vocab, embed_dim, seed)
    base = 2 + len(vocab.users)
    for i, w in enumerate(vocab.words):
        if w in vectors:
            table.matrix[base + i] = vectors[w]
    table.matrix[PAD_ID, :] = 0.0
    return table


# ---------------------------------------------------------------------------
# synthetic corpus generator
# ---------------------------------------------------------------------------

_BENIGN_POOL = (
    "love", "nice", "great", "photo", "cool", "wow", "amazing", "cute",
    "haha", "thanks", "awesome", "pretty", "fun", "happy", "good", "best",
    "sweet", "beautiful", "lol", "yes", "see", "new", "day", "friend",
    "smile", "picture", "like", "post", "follow", "style", "vibes", "sunny",
    "chill", "music", "game", "team", "food", "coffee", "beach", "travel",
)

_OFFENSIVE_POOL = (
    "loser", "ugly", "stupid", "dumb", "pathetic", "worthless", "idiot",
    "trash", "hate", "freak", "creep", "gross", "lame", "weirdo", "clown",
)


@dataclass
class CorpusSpec:
    """Knobs for the synthetic generator.

    Bullying sessions plant one contiguous burst of at least ``burst_min``
    comments whose tokens come mostly from the offensive pool, with
    short gaps inside the burst and repetition of offensive tokens from
    earlier burst comments.  Non-bullying sessions draw benign tokens over
    long gaps by default; the two ``nonbully_*`` knobs dilute each signal
    for ablation-style corpora where neither content nor timing alone
    separates the classes.
    """
    n_sessions: int = 500
    bully_fraction: float = 0.31
    comments_min: int = 5
    comments_max: int = 11
    words_min: int = 4
    words_max: int = 9
    benign_pool: tuple[str, ...] = _BENIGN_POOL
    offensive_pool: tuple[str, ...] = _OFFENSIVE_POOL
    n_users: int = 40
    bully_user_fraction: float = 0.3
    burst_min: int = 3
    burst_max: int = 5
    burst_offensive_rate: float = 0.7
    burst_benign_interleave: float = 0.0
    repeat_prob: float = 0.5
    mention_prob: float = 0.25
    short_gap: tuple[float, float] = (0.2, 2.0)
    long_gap: tuple[float, float] = (5.0, 60.0)
    history_words_min: int = 8
    history_words_max: int = 16
    history_offensive_rate: float = 0.5
    nonbully_hot_run_fraction: float = 0.0
    nonbully_burst_fraction: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if not (0.0 <= self.bully_fraction <= 1.0):
            raise CorpusError(f"bully_fraction {self.bully_fraction} outside [0, 1]")
        if not self.benign_pool or not self.offensive_pool:
            raise CorpusError("token pools must be non-empty")
        if set(self.benign_pool) & set(self.offensive_pool):
            raise CorpusError("benign and offensive pools must be disjoint")
        if self.burst_min < 3:
            raise CorpusError("bursts must span at least 3 comments")
        if self.burst_offensive_rate < 0.5:
            raise CorpusError("burst_offensive_rate below 0.5 would not mark a burst")
        if self.n_sessions <= 0 or self.comments_min < 2 or self.words_min < 1:
            raise CorpusError("sizes must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("benign_pool", "offensive_pool", "short_gap", "long_gap"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise CorpusError(f"unknown corpus spec fields: {sorted(unknown)}")
        kwargs = dict(d)
        for k in ("benign_pool", "offensive_pool"):
            if k in kwargs:
                kwargs[k] = tuple(kwargs[k])
        for k in ("short_gap", "long_gap"):
            if k in kwargs:
                kwargs[k] = tuple(float(x) for x in kwargs[k])
        return cls(**kwargs)


def _gap(rng: np.random.Generator, bounds: tuple[float, float]) -> float:
    return float(rng.uniform(bounds[0], bounds[1]))


def generate_corpus(spec: CorpusSpec) -> list[Session]:
    """Deterministic synthetic corpus: identical spec+seed gives identical sessions."""
    spec.validate()
    rng = rng_for(STREAM_CORPUS, spec.seed)

    n_bully = int(spec.n_sessions * spec.bully_fraction + 0.5)
    labels = np.array([1] * n_bully + [0] * (spec.n_sessions - n_bully))
    rng.shuffle(labels)

    users = [f"u{i}" for i in range(spec.n_users)]
    n_bully_users = max(2, int(spec.n_users * spec.bully_user_fraction + 0.5))
    bully_users = users[:n_bully_users]
    benign_users = users[n_bully_users:]

    histories = {}
    for u in users:
        n_words = int(rng.integers(spec.history_words_min, spec.history_words_max + 1))
        words = []
        for _ in range(n_words):
            if u in bully_users and rng.random() < spec.history_offensive_rate:
                words.append(str(rng.choice(spec.offensive_pool)))
            else:
                words.append(str(rng.choice(spec.benign_pool)))
        histories[u] = " ".join(words)

    def benign_text() -> str:
        n_words = int(rng.integers(spec.words_min, spec.words_max + 1))
        return " ".join(str(rng.choice(spec.benign_pool)) for _ in range(n_words))

    def hot_words() -> list[str]:
        """An offensive-heavy comment: strictly more than half from the pool."""
        n_words = int(rng.integers(spec.words_min, spec.words_max + 1))
        n_off = max(int(np.ceil(n_words * spec.burst_offensive_rate)),
                    (n_words + 1) // 2 + 1)
        n_off = min(n_off, n_words)
        words = [str(rng.choice(spec.offensive_pool)) for _ in range(n_off)]
        words += [str(rng.choice(spec.benign_pool)) for _ in range(n_words - n_off)]
        rng.shuffle(words)
        return words

    sessions = []
    for i, label in enumerate(labels):
        def draw_window(n):
            """Offensive positions inside a window, plus the window itself.

            With no interleave the window is exactly the offensive run; a
            positive interleave widens the window and scatters the offensive
            comments through it, leaving benign chatter in between.
            """
            n_off = int(rng.integers(spec.burst_min,
                                     min(spec.burst_max, n - 1) + 1))
            keep = 1.0 - spec.burst_benign_interleave
            length = min(n - 1, int(np.ceil(n_off / max(keep, 1e-9))))
            start = int(rng.integers(1, n - length + 1))
            positions = start + np.sort(rng.choice(length, size=min(n_off, length),
                                                   replace=False))
            return start, length, set(int(x) for x in positions)

        n_comments = int(rng.integers(max(spec.comments_min, spec.burst_min + 1),
                                      spec.comments_max + 1))
        hot_positions: set[int] = set()
        tight_start = tight_len = 0
        if label == 1:
            # the planted burst: offensive content and short gaps, aligned
            tight_start, tight_len, hot_positions = draw_window(n_comments)
        else:
            hot_window = None
            if rng.random() < spec.nonbully_hot_run_fraction:
                # same offensive arrangement, but spread over ordinary gaps
                start, length, hot_positions = draw_window(n_comments)
                hot_window = (start, length)
            if rng.random() < spec.nonbully_burst_fraction:
                # rapid-fire benign chatter; dropped if it collides with the
                # hot run, otherwise the session would read as bullying
                start, length, _ = draw_window(n_comments)
                if hot_window is None or start >= sum(hot_window) \
                        or start + length <= hot_window[0]:
                    tight_start, tight_len = start, length

        # Users overlap across classes so neither a username token nor a
        # history is a label giveaway; only burst authorship is role-bound.
        owner = str(rng.choice(users))
        attackers = list(rng.choice(bully_users, size=min(3, len(bully_users)),
                                    replace=False))
        comments = []
        t = 0.0
        prev_offensive: list[str] = []
        for j in range(n_comments):
            in_hot = j in hot_positions and j > 0
            in_tight = tight_start <= j < tight_start + tight_len and j > 0
            if j > 0:
                t += _gap(rng, spec.short_gap if in_tight else spec.long_gap)
            if j == 0:
                user, text = owner, benign_text()
            elif in_hot:
                user = str(attackers[int(rng.integers(0, len(attackers)))])
                words = hot_words()
                if prev_offensive and rng.random() < spec.repeat_prob:
                    words[int(rng.integers(0, len(words)))] = str(
                        rng.choice(prev_offensive))
                if rng.random() < spec.mention_prob:
                    words.append(f"@{owner}")
                prev_offensive.extend(w for w in words if w in spec.offensive_pool)
                text = " ".join(words)
            else:
                user = str(rng.choice(users))
                text = benign_text()
            comments.append(Comment(user, round(t, 3), text))

        participants = []
        for c in comments:
            if c.user_id not in participants:
                participants.append(c.user_id)
        sessions.append(Session(
            session_id=f"s{i:05d}",
            comments=comments,
            label=int(label),
            histories={u: histories[u] for u in participants},
        ))
    for s in sessions:
        s.validate()
    return sessions


def offensive_burst_indices(session: Session, offensive_pool: tuple[str, ...]) -> list[int]:
    """Longest contiguous run of comments drawing >= 50% tokens from the pool.

    Recovers the planted burst of a generated bullying session from its text
    alone; returns [] when no run of length >= 3 exists.
    """
    pool = set(offensive_pool)

    def is_offensive(c: Comment) -> bool:
        words = [w.strip(_EDGE_PUNCT) for w in c.text.lower().split()]
        words = [w for w in words if w and not w.startswith("@")]
        if not words:
            return False
        return sum(w in pool for w in words) * 2 >= len(words)

    flags = [is_offensive(c) for c in session.comments]
    best: list[int] = []
    run: list[int] = []
    for i, f in enumerate(flags):
        if f:
            run.append(i)
            if len(run) > len(best):
                best = list(run)
        else:
            run = []
    return best if len(best) >= 3 else []
