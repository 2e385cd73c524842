"""Command-line pipeline: ingest -> index -> retrieve -> train -> predict -> evaluate.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from collections.abc import Sequence
from pathlib import Path

from . import __version__
from .bm25 import build_index, load_index, retrieve, save_index
from .corpus import chunk_corpus, read_documents, read_passages, write_passages
from .dense import (HashedBowProvider, build_dense_index, dense_retrieve, load_dense_index,
                    provider_from_description, save_dense_index)
from .errors import DataError, NumericError
from .evaluation import read_predictions, score, write_predictions
from .jsonl import iter_jsonl, require, write_jsonl
from .manifest import write_manifest
from .model import FidModel, ModelConfig
from .trainer import (TrainConfig, contexts_from_retrieval, predict, read_qa, read_retrieval,
                      train)
from .vocab import build_vocab

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3

log = logging.getLogger("fidqa")


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


class UsageError(Exception):
    pass


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _k_list(text: str) -> list[int]:
    try:
        values = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError("k values must be positive integers")
    return values


def read_questions(path: str | Path) -> list[tuple[str, str]]:
    out = []
    seen: set[str] = set()
    for lineno, obj in iter_jsonl(path):
        where = f"{path}:{lineno}"
        qid = require(obj, "id", str, where)
        if qid in seen:
            raise DataError(f"{where}: duplicate question id {qid!r}")
        seen.add(qid)
        out.append((qid, require(obj, "question", str, where)))
    return out


def is_validation_id(qid: str) -> bool:
    """Deterministic ~10% validation split keyed on the example id."""
    return int.from_bytes(hashlib.sha256(qid.encode("utf-8")).digest()[:8], "big") % 10 == 0


def _contexts(retrieved: str, passages: str):
    by_id = {p.id: p for p in read_passages(passages)}
    return contexts_from_retrieval(read_retrieval(retrieved), by_id)


def _load_index(method: str, path: str):
    """Load an index, turning a method/file mismatch into a data error."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
    kinds = {b"FIDBM25\x00": "bm25", b"FIDDENSE": "dense"}
    kind = kinds.get(magic)
    if kind is None:
        raise DataError(f"{path}: not an index file")
    if kind != method:
        raise DataError(f"{path}: is a {kind} index but --method {method} was given")
    return load_index(path) if method == "bm25" else load_dense_index(path)


# commands ----------------------------------------------------------------------

def cmd_ingest(args) -> int:
    docs = read_documents(args.docs)
    n = write_passages(args.out, chunk_corpus(docs, args.words))
    write_manifest(args.out, "ingest", {"docs": args.docs}, {"words": args.words}, {"passages": n})
    print(f"{n} passages")
    return 0


def cmd_index(args) -> int:
    passages = read_passages(args.passages)
    if args.method == "bm25":
        save_index(build_index(passages), args.out)
        config = {"method": "bm25"}
    else:
        provider = HashedBowProvider(dim=args.dim, seed=args.seed)
        save_dense_index(build_dense_index(passages, provider), args.out)
        config = {"method": "dense", "provider": provider.describe()}
    write_manifest(args.out, "index", {"passages": args.passages}, config, {"passages": len(passages)})
    print(f"indexed {len(passages)} passages ({args.method})")
    return 0


def cmd_retrieve(args) -> int:
    index = _load_index(args.method, args.index)
    questions = read_questions(args.questions)
    if args.method == "bm25":
        results = (retrieve(index, q, args.k, qid) for qid, q in questions)
    else:
        provider = provider_from_description(index.provider or {"name": "hashed-bow", "dim": index.dim})
        results = (dense_retrieve(index, provider, q, args.k, qid) for qid, q in questions)
    n = write_jsonl(args.out, (r.to_json() for r in results))
    write_manifest(args.out, "retrieve", {"index": args.index, "questions": args.questions},
                   {"method": args.method, "k": args.k}, {"questions": n})
    print(f"retrieved passages for {n} questions")
    return 0


def _model_config(args, vocab_size: int) -> ModelConfig:
    return ModelConfig(vocab_size=vocab_size, d_model=args.d_model, n_heads=args.heads,
                       n_enc_layers=args.enc_layers, n_dec_layers=args.dec_layers, d_ff=args.d_ff,
                       max_input_len=args.max_input_len, max_answer_len=args.max_answer_len,
                       dropout_p=args.dropout, init_std=args.init_std)


def cmd_train(args) -> int:
    qa = read_qa(args.qa)
    contexts = _contexts(args.retrieved, args.passages)
    if args.val_qa:
        train_ex, val_ex = qa, read_qa(args.val_qa)
        val_contexts = _contexts(args.val_retrieved or args.retrieved, args.passages)
    else:
        train_ex = [q for q in qa if not is_validation_id(q.id)]
        val_ex = [q for q in qa if is_validation_id(q.id)]
        val_contexts = contexts
        if not val_ex or not train_ex:
            raise DataError(f"{args.qa}: the 90/10 id-hash split left an empty side; pass --val-qa")
    try:
        tc = TrainConfig(learning_rate=args.lr, dropout_p=args.dropout, batch_size=args.batch_size,
                         total_steps=args.steps, eval_every=min(args.eval_every, args.steps),
                         n_train_passages=args.n_passages, n_eval_passages=args.n_eval_passages,
                         eval_batch_size=args.batch_size, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if args.init_from:
        model = FidModel.load(args.init_from, seed=args.seed)
    else:
        texts = [p.title + " " + p.text for p in read_passages(args.passages)]
        texts += [q.question for q in qa] + [a for q in qa for a in q.answers]
        vocab = build_vocab(texts, args.vocab_size)
        try:
            config = _model_config(args, len(vocab))
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        model = FidModel(config, vocab, seed=args.seed)

    def on_log(rec):
        if "val_em" in rec:
            print(f"step {rec['step']} loss {rec['loss']:.4f} val EM {100 * rec['val_em']:.2f}", flush=True)

    result = train(model, train_ex, contexts, tc, val_ex, val_contexts, out_dir=args.out, on_log=on_log)
    summary = {"best_step": result.best_step, "best_val_em": result.best_em,
               "encoder_token_ops": result.encoder_token_ops, "encoder_pair_ops": result.encoder_pair_ops,
               "n_train": len(train_ex), "n_val": len(val_ex)}
    Path(args.out, "ops.json").write_text(json.dumps(summary, sort_keys=True) + "\n", encoding="utf-8")
    write_manifest(args.out, "train",
                   {"qa": args.qa, "retrieved": args.retrieved, "passages": args.passages,
                    "val_qa": args.val_qa, "val_retrieved": args.val_retrieved, "init_from": args.init_from},
                   {"train": tc.__dict__, "model": model.config.__dict__}, summary)
    print(f"best step {result.best_step} val EM {100 * result.best_em:.2f} "
          f"encoder token-ops {result.encoder_token_ops}")
    return 0


def cmd_predict(args) -> int:
    model = FidModel.load(args.ckpt)
    qa = read_qa(args.qa)
    preds = predict(model, qa, _contexts(args.retrieved, args.passages), args.n_passages, args.batch_size)
    write_predictions(args.out, preds)
    write_manifest(args.out, "predict",
                   {"ckpt": args.ckpt, "qa": args.qa, "retrieved": args.retrieved, "passages": args.passages},
                   {"n_passages": args.n_passages}, {"predictions": len(preds)})
    print(f"wrote {len(preds)} predictions")
    return 0


def cmd_evaluate(args) -> int:
    report = score(read_predictions(args.predictions), read_qa(args.qa))
    if args.out:
        Path(args.out).write_text(json.dumps(report.to_json(), sort_keys=True) + "\n", encoding="utf-8")
    print(report.summary())
    return 0


def cmd_scaling_study(args) -> int:
    from .study import scaling_study

    model = FidModel.load(args.ckpt)
    rows = scaling_study(model, read_qa(args.qa), _contexts(args.retrieved, args.passages), args.k_values,
                         args.batch_size)
    write_jsonl(args.out, (r.to_json() for r in rows))
    write_manifest(args.out, "scaling-study",
                   {"ckpt": args.ckpt, "qa": args.qa, "retrieved": args.retrieved, "passages": args.passages},
                   {"k_values": args.k_values})
    print(f"{'k':>5} {'EM':>7} {'encoder pairs':>15} {'joint pairs':>15}  truncated")
    for r in rows:
        print(f"{r.k:>5} {100 * r.em:>7.2f} {r.encoder_pairs:>15} {r.joint_pairs:>15}  {'yes' if r.truncated else 'no'}")
    return 0


def cmd_gradcheck(args) -> int:
    from .checks import tiny_model_gradcheck

    errors = tiny_model_gradcheck(seed=args.seed, max_coords=None if args.all else args.max_coords)
    worst = max(errors, key=errors.get)
    for name in errors:
        log.debug("%s %.3e", name, errors[name])
    print(f"max relative error {errors[worst]:.3e} ({worst}) over {len(errors)} parameters")
    if errors[worst] >= args.tol:
        print(f"gradient check FAILED (tolerance {args.tol:g})", file=sys.stderr)
        return EXIT_NUMERIC
    print("gradient check passed")
    return 0


def cmd_make_toy(args) -> int:
    from .synthetic import needle_corpus, split_by_entity

    corpus = needle_corpus(n_entities=args.entities, seed=args.seed)
    train_q, _, test_q = split_by_entity(corpus, n_test=max(1, args.entities // 5))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_jsonl(out / "docs.jsonl", ({"id": d.id, "title": d.title, "text": d.text} for d in corpus.documents))
    write_jsonl(out / "train.jsonl", (q.to_json() for q in train_q))
    write_jsonl(out / "test.jsonl", (q.to_json() for q in test_q))
    write_jsonl(out / "all_questions.jsonl", (q.to_json() for q in train_q + test_q))
    print(f"{len(corpus.documents)} documents, {len(train_q)} train and {len(test_q)} test questions in {out}")
    return 0


# parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fidqa", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"fidqa {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", help="split documents into fixed-length passages")
    p.add_argument("--docs", required=True, help="documents JSON-lines {id, title, text}")
    p.add_argument("--out", required=True, help="passages JSON-lines to write")
    p.add_argument("--words", type=_positive, default=100, help="words per passage (default 100)")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("index", help="build a BM25 or dense index over passages")
    p.add_argument("--passages", required=True, help="passages JSON-lines")
    p.add_argument("--method", choices=("bm25", "dense"), default="bm25", help="index type (default bm25)")
    p.add_argument("--out", required=True, help="index file to write")
    p.add_argument("--dim", type=_positive, default=256, help="dense embedding dimension (default 256)")
    p.add_argument("--seed", type=int, default=0, help="hash seed of the dense embedder (default 0)")
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("retrieve", help="retrieve the top-k passages for each question")
    p.add_argument("--method", choices=("bm25", "dense"), default="bm25", help="index type (default bm25)")
    p.add_argument("--index", required=True, help="index file from 'fidqa index'")
    p.add_argument("--questions", required=True, help="questions JSON-lines {id, question, ...}")
    p.add_argument("--k", type=_positive, default=100, help="passages per question (default 100)")
    p.add_argument("--out", required=True, help="retrieval results JSON-lines to write")
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("train", help="train or refinetune a FiD reader")
    p.add_argument("--qa", required=True, help="training QA JSON-lines {id, question, answers[, preferred_answer]}")
    p.add_argument("--retrieved", required=True, help="retrieval results covering the training questions")
    p.add_argument("--passages", required=True, help="passages JSON-lines the retrieval results refer to")
    p.add_argument("--out", required=True, help="output directory (log.jsonl, checkpoints, best.ckpt)")
    p.add_argument("--val-qa", help="validation QA file (default: 10%% of --qa split by id hash)")
    p.add_argument("--val-retrieved", help="retrieval results for --val-qa (default: --retrieved)")
    p.add_argument("--n-passages", type=_positive, default=100, help="passages per training example (default 100)")
    p.add_argument("--n-eval-passages", type=_positive, help="passages per validation example (default: --n-passages)")
    p.add_argument("--init-from", help="checkpoint to start from; its model config and vocabulary are reused")
    p.add_argument("--steps", type=_positive, default=10_000, help="gradient steps (default 10000)")
    p.add_argument("--eval-every", type=_positive, default=500, help="validation interval in steps (default 500)")
    p.add_argument("--lr", type=float, default=1e-4, help="constant Adam learning rate (default 1e-4)")
    p.add_argument("--batch-size", type=_positive, default=64, help="questions per step (default 64)")
    p.add_argument("--dropout", type=float, default=0.1, help="dropout rate (default 0.1)")
    p.add_argument("--seed", type=int, default=0, help="seed for init, dropout, sampling and shuffling (default 0)")
    g = p.add_argument_group("model (ignored with --init-from)")
    g.add_argument("--vocab-size", type=_positive, default=32_000, help="max vocabulary size (default 32000)")
    g.add_argument("--d-model", type=_positive, default=64, help="model width (default 64)")
    g.add_argument("--heads", type=_positive, default=4, help="attention heads (default 4)")
    g.add_argument("--enc-layers", type=_positive, default=2, help="encoder layers (default 2)")
    g.add_argument("--dec-layers", type=_positive, default=2, help="decoder layers (default 2)")
    g.add_argument("--d-ff", type=_positive, default=128, help="feed-forward width (default 128)")
    g.add_argument("--max-input-len", type=_positive, default=250, help="tokens per passage row (default 250)")
    g.add_argument("--max-answer-len", type=_positive, default=16, help="max answer tokens incl. EOS (default 16)")
    g.add_argument("--init-std", type=float, default=0.02, help="init std of weights and embeddings (default 0.02)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="greedy-decode answers with a checkpoint")
    p.add_argument("--ckpt", required=True, help="model checkpoint")
    p.add_argument("--qa", required=True, help="questions JSON-lines")
    p.add_argument("--retrieved", required=True, help="retrieval results for these questions")
    p.add_argument("--passages", required=True, help="passages JSON-lines")
    p.add_argument("--n-passages", type=_positive, default=100, help="passages per question (default 100)")
    p.add_argument("--batch-size", type=_positive, default=64, help="questions per decoding batch (default 64)")
    p.add_argument("--out", required=True, help="predictions JSON-lines to write")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="exact-match score of predictions")
    p.add_argument("--predictions", required=True, help="predictions JSON-lines {question_id, answer}")
    p.add_argument("--qa", required=True, help="gold QA JSON-lines")
    p.add_argument("--out", help="also write the full report as JSON")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("scaling-study", help="EM and encoder cost for several passage counts")
    p.add_argument("--ckpt", required=True, help="model checkpoint")
    p.add_argument("--retrieved", required=True, help="retrieval results")
    p.add_argument("--qa", required=True, help="gold QA JSON-lines")
    p.add_argument("--passages", required=True, help="passages JSON-lines")
    p.add_argument("--k-values", type=_k_list, default=[1, 5, 10, 25, 50, 100],
                   help="comma-separated passage counts (default 1,5,10,25,50,100)")
    p.add_argument("--batch-size", type=_positive, default=64, help="questions per decoding batch (default 64)")
    p.add_argument("--out", required=True, help="table JSON-lines to write, one row per k")
    p.set_defaults(func=cmd_scaling_study)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model at a tiny config")
    p.add_argument("--seed", type=int, default=0, help="seed for weights and probe coordinates (default 0)")
    p.add_argument("--max-coords", type=_positive, default=64, help="coordinates probed per parameter (default 64)")
    p.add_argument("--all", action="store_true", help="probe every coordinate (slow)")
    p.add_argument("--tol", type=float, default=1e-3, help="max allowed relative error (default 1e-3)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("make-toy", help="write the synthetic needle-in-haystack toy dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--entities", type=_positive, default=60, help="number of made-up entities (default 60)")
    p.add_argument("--seed", type=int, default=0, help="generator seed (default 0)")
    p.set_defaults(func=cmd_make_toy)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.exit(EXIT_USAGE, f"fidqa: error: {exc}\n")
    except DataError as exc:
        print(f"fidqa: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"fidqa: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"fidqa: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
