"""Session-level cyberbullying detection with temporal graph attention.

Comment threads are encoded hierarchically (word-level bi-GRU, word
attention, comment-level bi-GRU), connected into a fully connected
per-session graph whose edge weights combine topic coherence with temporal
proximity, merged with per-user history encodings through a learned gate,
and pooled by user-level attention into a single bullying probability.
Everything runs on a small hand-rolled reverse-mode autodiff engine so the
gradients are checkable against finite differences.
"""

from .autodiff import Tape, Variable, backward, grad_check
from .data import (Comment, CorpusSpec, Session, Vocabulary, generate_corpus,
                   load_embeddings, load_sessions, prepare_sessions,
                   save_sessions, split, time_intervals, tokenize)
from .model import AblationFlags, ModelParams, Prediction, forward, init_params
from .training import (Metrics, SmoteConfig, TrainConfig, auc, evaluate,
                       load_checkpoint, repeat_runs, run_ablation,
                       save_checkpoint, smote, train)

__version__ = "0.1.0"

__all__ = [
    "AblationFlags", "Comment", "CorpusSpec", "Metrics", "ModelParams",
    "Prediction", "Session", "SmoteConfig", "Tape", "TrainConfig",
    "Variable", "Vocabulary", "auc", "backward", "evaluate", "forward",
    "generate_corpus", "grad_check", "init_params", "load_checkpoint",
    "load_embeddings", "load_sessions", "prepare_sessions", "repeat_runs",
    "run_ablation", "save_checkpoint", "save_sessions", "smote", "split",
    "time_intervals", "tokenize", "train",
]
