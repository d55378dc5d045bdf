"""Command-line surface: gen-data, train, eval, predict, ablate, explain.

Exit codes: 0 success, 2 usage/config/data error, 3 runtime or numerical
error.  Every command is deterministic given identical flags, files and
seeds; no output file embeds wall-clock time.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .data import (CorpusError, CorpusSpec, generate_corpus, load_sessions,
                   prepare_sessions, save_sessions)
from .model import AblationFlags, forward
from .training import (ConfigError, TrainConfig, TrainingError,
                       aggregate_metrics, evaluate, load_checkpoint,
                       metrics_csv_rows, repeat_runs, run_ablation,
                       save_checkpoint, summary_csv_row, train,
                       write_metrics_csv)

_DEFAULTS = TrainConfig()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bullygraph",
        description="Session-level cyberbullying detection with temporal "
                    "graph attention over comment threads.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic session corpus")
    p.add_argument("--spec", help="corpus spec JSON file (defaults built in)")
    p.add_argument("--out", required=True, help="output session JSONL file")
    p.add_argument("--seed", type=int, default=0, help="generator seed (default 0)")

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    _add_train_args(p)
    p.add_argument("--out", required=True, help="checkpoint output path")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a session file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="optional metrics CSV path")

    p = sub.add_parser("predict", help="write one probability per session")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("ablate", help="leave-one-out ablation table")
    _add_train_args(p)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seeds", type=int, default=5,
                   help="number of repeated runs per variant (default 5)")

    p = sub.add_parser("explain", help="export attention and graph weights")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--session", required=True, help="session id to explain")
    p.add_argument("--out", required=True, help="output directory")
    return parser


def _add_train_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="session JSONL file")
    p.add_argument("--config", help="training config JSON file")
    p.add_argument("--seed", type=int, help=f"seed override (default {_DEFAULTS.seed})")
    p.add_argument("--epochs", type=int,
                   help=f"epoch override (default {_DEFAULTS.epochs})")
    p.add_argument("--ablate", action="append", default=[],
                   choices=["no_topic", "no_time", "no_history", "no_graph"],
                   help="ablation flag, repeatable (default none)")
    p.add_argument("--oversample", action="store_true",
                   help="SMOTE-balance the training split (default off)")
    p.add_argument("--embeddings",
                   help="pretrained word-vector text file (default random init)")


def _load_config(args) -> TrainConfig:
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            config = TrainConfig.from_dict(json.load(fh))
    else:
        config = TrainConfig()
    if args.seed is not None:
        config.seed = args.seed
    if args.epochs is not None:
        config.epochs = args.epochs
    if args.ablate:
        config.ablation = AblationFlags.from_names(args.ablate)
    if args.oversample:
        config.oversample = True
    if args.embeddings:
        config.embeddings_path = args.embeddings
    config.validate()
    return config


def cmd_gen_data(args) -> int:
    if args.spec:
        with open(args.spec, encoding="utf-8") as fh:
            spec = CorpusSpec.from_dict(json.load(fh))
    else:
        spec = CorpusSpec()
    spec.seed = args.seed
    sessions = generate_corpus(spec)
    save_sessions(sessions, args.out)
    n_bully = sum(s.label for s in sessions)
    print(f"sessions {len(sessions)} bully {n_bully} "
          f"non-bully {len(sessions) - n_bully} -> {args.out}")
    return 0


def cmd_train(args) -> int:
    config = _load_config(args)
    corpus = load_sessions(args.data)
    result = train(corpus, config)
    save_checkpoint(args.out, result.params, config, result.vocab)
    with open(args.out + ".log", "w", encoding="utf-8") as fh:
        for line in result.epoch_log:
            fh.write(line + "\n")
    rows = [metrics_csv_rows("train", config.seed, "val", result.val_metrics),
            metrics_csv_rows("train", config.seed, "test", result.test_metrics),
            summary_csv_row("train", "test",
                            aggregate_metrics([result.test_metrics]))]
    write_metrics_csv(args.out + ".metrics.csv", rows)
    print(f"best epoch {result.best_epoch}")
    print(f"val  {result.val_metrics.text()}")
    print(f"test {result.test_metrics.text()}")
    return 0


def _load_for_inference(args):
    params, config, vocab = load_checkpoint(args.checkpoint)
    sessions = load_sessions(args.data)
    prepared = prepare_sessions(sessions, vocab,
                                max_session_len=config.max_session_len,
                                max_comment_len=config.max_comment_len,
                                max_history_len=config.max_history_len)
    return params, config, vocab, prepared


def cmd_eval(args) -> int:
    params, config, _, prepared = _load_for_inference(args)
    metrics = evaluate(params, prepared, config)
    print(metrics.text())
    if args.out:
        rows = [metrics_csv_rows("eval", config.seed, "all", metrics)]
        write_metrics_csv(args.out, rows)
    return 0


def cmd_predict(args) -> int:
    params, config, _, prepared = _load_for_inference(args)
    with open(args.out, "w", encoding="utf-8") as fh:
        for s in prepared:
            pred = forward(s, params, ablation=config.ablation,
                           time_transform=config.time_transform)
            fh.write(f"{pred.probability!r}\n")
    print(f"wrote {len(prepared)} predictions -> {args.out}")
    return 0


def cmd_ablate(args) -> int:
    config = _load_config(args)
    corpus = load_sessions(args.data)
    table = run_ablation(corpus, config, n_seeds=args.seeds)
    os.makedirs(args.out_dir, exist_ok=True)
    rows = [summary_csv_row(name, "test", m) for name, m in table.items()]
    write_metrics_csv(os.path.join(args.out_dir, "ablation.csv"), rows)
    for name, m in table.items():
        print(f"{name:12s} {m.text()}")
    return 0


def cmd_explain(args) -> int:
    params, config, vocab, prepared = _load_for_inference(args)
    by_id = {s.session_id: s for s in prepared}
    if args.session not in by_id:
        raise CorpusError(f"session {args.session!r} not found in {args.data}")
    session = by_id[args.session]
    pred = forward(session, params, ablation=config.ablation,
                   time_transform=config.time_transform)

    os.makedirs(args.out, exist_ok=True)
    n = len(pred.user_attention)
    with open(os.path.join(args.out, "user_attention.csv"), "w",
              encoding="utf-8") as fh:
        fh.write("comment_index,user_token,user_attention\n")
        for j in range(n):
            token = vocab.token_string(vocab.user_token_id(
                session.comments[j].user_id))
            fh.write(f"{j},{token},{float(pred.user_attention[j])!r}\n")

    with open(os.path.join(args.out, "word_attention.csv"), "w",
              encoding="utf-8") as fh:
        fh.write("comment_index,token,word_attention\n")
        for j, weights in enumerate(pred.word_attention):
            toks = session.comments[j].tokens[:len(weights)]
            for t, w in zip(toks, weights):
                fh.write(f"{j},{vocab.token_string(t)},{float(w)!r}\n")

    with open(os.path.join(args.out, "graph_weights.csv"), "w",
              encoding="utf-8") as fh:
        if pred.graph_weights is not None:
            for i in range(n):
                fh.write(",".join(repr(float(x)) for x in pred.graph_weights[i]) + "\n")

    with open(os.path.join(args.out, "prediction.json"), "w",
              encoding="utf-8") as fh:
        json.dump({"session_id": session.session_id,
                   "probability": pred.probability,
                   "label": pred.label}, fh)
        fh.write("\n")
    print(f"explanation bundle -> {args.out}")
    return 0


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "ablate": cmd_ablate,
    "explain": cmd_explain,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, CorpusError, FileNotFoundError,
            json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (TrainingError, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
