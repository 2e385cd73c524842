"""Adam fine-tuning loop with periodic exact-match evaluation.

Training targets follow two rules: an example's ``preferred_answer`` is
always the target when present, otherwise a target is drawn uniformly from
``answers`` afresh at every gradient step. All-uppercase targets are
title-cased before tokenization.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .bm25 import Hit, RetrievalResult
from .corpus import Passage
from .errors import DataError, NumericError
from .evaluation import EMReport, Prediction, score
from .jsonl import dumps, iter_jsonl, require
from .model import FidInput, FidModel, collate, make_input
from .rng import DROPOUT, SAMPLING, SHUFFLE, make_rng
from .vocab import DECODER_START, EOS, PAD

log = logging.getLogger(__name__)

Contexts = Mapping[str, Sequence[tuple[str, str]]]


@dataclass(frozen=True)
class QAExample:
    id: str
    question: str
    answers: tuple[str, ...]
    preferred_answer: str | None = None

    def __post_init__(self) -> None:
        if not self.answers:
            raise ValueError(f"example {self.id!r} has no answers")

    def to_json(self) -> dict:
        obj = {"id": self.id, "question": self.question, "answers": list(self.answers)}
        if self.preferred_answer is not None:
            obj["preferred_answer"] = self.preferred_answer
        return obj


def read_qa(path: str | Path) -> list[QAExample]:
    out: list[QAExample] = []
    seen: set[str] = set()
    for lineno, obj in iter_jsonl(path):
        where = f"{path}:{lineno}"
        qid = require(obj, "id", str, where)
        if qid in seen:
            raise DataError(f"{where}: duplicate question id {qid!r}")
        seen.add(qid)
        answers = require(obj, "answers", list, where)
        if not answers or not all(isinstance(a, str) for a in answers):
            raise DataError(f"{where}: 'answers' must be a non-empty list of strings")
        preferred = obj.get("preferred_answer")
        if preferred is not None and not isinstance(preferred, str):
            raise DataError(f"{where}: 'preferred_answer' must be a string")
        out.append(QAExample(qid, require(obj, "question", str, where), tuple(answers), preferred))
    return out


def select_target(example: QAExample, rng: np.random.Generator) -> str:
    if example.preferred_answer is not None:
        return example.preferred_answer
    if len(example.answers) == 1:
        return example.answers[0]
    return example.answers[int(rng.integers(len(example.answers)))]


def normalize_training_answer(answer: str) -> str:
    """Title-case answers written entirely in uppercase (``str.title`` semantics)."""
    return answer.title() if answer.isupper() else answer


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    dropout_p: float = 0.1
    batch_size: int = 64
    total_steps: int = 10_000
    eval_every: int = 500
    n_train_passages: int = 100
    n_eval_passages: int | None = None
    eval_batch_size: int = 64
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self) -> None:
        for name in ("batch_size", "total_steps", "eval_every", "n_train_passages", "eval_batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.eval_every > self.total_steps:
            raise ValueError("eval_every must not exceed total_steps")

    @property
    def eval_passages(self) -> int:
        return self.n_eval_passages or self.n_train_passages


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray | None],
              state: AdamState, lr: float) -> None:
    """One in-place Adam update; rejects the whole step on any non-finite gradient."""
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name} at step {state.t + 1}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** state.t
    corr2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / corr1
        v_hat = v / corr2
        p -= (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype)


def contexts_from_retrieval(results: Sequence[RetrievalResult], passages: Mapping[str, Passage]) -> dict[str, list[tuple[str, str]]]:
    out: dict[str, list[tuple[str, str]]] = {}
    for r in results:
        try:
            out[r.question_id] = [(passages[h.passage_id].title, passages[h.passage_id].text) for h in r.hits]
        except KeyError as exc:
            raise DataError(f"question {r.question_id!r}: unknown passage id {exc.args[0]!r}") from None
    return out


def read_retrieval(path: str | Path) -> list[RetrievalResult]:
    out = []
    for lineno, obj in iter_jsonl(path):
        where = f"{path}:{lineno}"
        hits = require(obj, "hits", list, where)
        try:
            parsed = [Hit(str(h["passage_id"]), float(h["score"])) for h in hits]
        except (TypeError, KeyError, ValueError):
            raise DataError(f"{where}: malformed hit entry") from None
        out.append(RetrievalResult(require(obj, "question_id", str, where), parsed))
    return out


def _inputs(model: FidModel, examples: Sequence[QAExample], contexts: Contexts, n: int) -> list[FidInput]:
    out = []
    for ex in examples:
        ctx = contexts.get(ex.id)
        if ctx is None:
            raise DataError(f"no retrieved passages for question {ex.id!r}")
        if len(ctx) < n:
            raise DataError(f"question {ex.id!r} has {len(ctx)} passages, {n} required")
        out.append(make_input(ex.question, ctx[:n], model.vocab, model.config.max_input_len))
    return out


def target_arrays(model: FidModel, answers: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
    """Decoder inputs (START + shifted target) and EOS-terminated targets, PAD-padded."""
    limit = model.config.max_answer_len
    seqs = [model.vocab.encode(a)[:limit - 1] + [EOS] for a in answers]
    width = max(len(s) for s in seqs)
    targets = np.full((len(seqs), width), PAD, dtype=np.int64)
    dec_in = np.full((len(seqs), width), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        targets[i, :len(s)] = s
        dec_in[i, 0] = DECODER_START
        dec_in[i, 1:len(s)] = s[:-1]
    return dec_in, targets


def loss_for_batch(model: FidModel, inputs: Sequence[FidInput], answers: Sequence[str]) -> T.Tensor:
    if not inputs:
        raise ValueError("empty batch")
    tokens, mask = collate(inputs)
    dec_in, targets = target_arrays(model, answers)
    return model.loss(tokens, mask, dec_in, targets)


def predict(model: FidModel, examples: Sequence[QAExample], contexts: Contexts, n_passages: int,
            batch_size: int = 64) -> list[Prediction]:
    """Greedy answers using the top ``n_passages`` (or all, if fewer) passages per question."""
    preds = []
    for start in range(0, len(examples), batch_size):
        chunk = examples[start:start + batch_size]
        inputs = []
        for ex in chunk:
            ctx = contexts.get(ex.id)
            if not ctx:
                raise DataError(f"no retrieved passages for question {ex.id!r}")
            inputs.append(make_input(ex.question, ctx[:n_passages], model.vocab, model.config.max_input_len))
        # group by passage count so every generate() call sees a rectangular batch
        by_n: dict[int, list[int]] = {}
        for i, x in enumerate(inputs):
            by_n.setdefault(x.n_passages, []).append(i)
        answers: list[str] = [""] * len(chunk)
        for idx in by_n.values():
            tokens, mask = collate([inputs[i] for i in idx])
            for i, ids in zip(idx, model.generate(tokens, mask)):
                answers[i] = model.vocab.decode(ids)
        preds.extend(Prediction(ex.id, a) for ex, a in zip(chunk, answers))
    return preds


def evaluate(model: FidModel, examples: Sequence[QAExample], contexts: Contexts, n_passages: int,
             batch_size: int = 64) -> EMReport:
    return score(predict(model, examples, contexts, n_passages, batch_size), examples)


@dataclass
class TrainResult:
    best_step: int
    best_em: float
    best_state: dict[str, np.ndarray]
    log: list[dict]
    encoder_token_ops: int
    encoder_pair_ops: int


def train(model: FidModel, train_examples: Sequence[QAExample], train_contexts: Contexts,
          config: TrainConfig, val_examples: Sequence[QAExample], val_contexts: Contexts | None = None,
          out_dir: str | Path | None = None,
          on_log: Callable[[dict], None] | None = None) -> TrainResult:
    """Run ``config.total_steps`` Adam steps; keep the checkpoint with the best validation EM.

    Continuing from a checkpoint is just passing a model loaded from it.
    On return the model holds the best parameters (ties go to the earliest
    evaluation). With ``out_dir``, writes ``log.jsonl``, one checkpoint per
    evaluation and ``best.ckpt``.
    """
    if not train_examples:
        raise DataError("no training examples")
    if not val_examples:
        raise DataError("no validation examples")
    val_contexts = train_contexts if val_contexts is None else val_contexts
    if config.dropout_p != model.config.dropout_p:
        log.info("model dropout %.3f overridden by train config %.3f", model.config.dropout_p, config.dropout_p)
    model.config = dataclasses.replace(model.config, dropout_p=config.dropout_p)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = (out / "log.jsonl").open("w", encoding="utf-8", newline="\n")
    else:
        log_fh = None

    inputs = _inputs(model, train_examples, train_contexts, config.n_train_passages)
    sample_rng = make_rng(config.seed, SAMPLING)
    shuffle_rng = make_rng(config.seed, SHUFFLE)
    model.dropout_rng = make_rng(config.seed, DROPOUT)
    adam = AdamState(beta1=config.beta1, beta2=config.beta2, eps=config.eps)
    params = {name: p.data for name, p in model.params.items()}

    order: list[int] = []
    records: list[dict] = []
    best_step, best_em, best_state = -1, -math.inf, model.state_dict()
    token_ops = pair_ops = 0

    try:
        for step in range(1, config.total_steps + 1):
            batch = []
            while len(batch) < config.batch_size:
                if not order:
                    order = list(shuffle_rng.permutation(len(inputs)))
                batch.append(order.pop())
            answers = [normalize_training_answer(select_target(train_examples[i], sample_rng)) for i in batch]

            model.train()
            tokens_before = model.counters["encoder_tokens"]
            pairs_before = model.counters["encoder_pairs"]
            model.zero_grad()
            loss = loss_for_batch(model, [inputs[i] for i in batch], answers)
            loss_value = loss.item()
            if not math.isfinite(loss_value):
                raise NumericError(f"non-finite loss at step {step}")
            T.backward(loss)
            adam_step(params, {n: p.grad for n, p in model.params.items()}, adam, config.learning_rate)
            token_ops += model.counters["encoder_tokens"] - tokens_before
            pair_ops += model.counters["encoder_pairs"] - pairs_before

            record = {"step": step, "loss": loss_value}
            if step % config.eval_every == 0:
                model.eval()
                report = evaluate(model, val_examples, val_contexts, config.eval_passages, config.eval_batch_size)
                record["val_em"] = report.em
                if report.em > best_em:
                    best_step, best_em, best_state = step, report.em, model.state_dict()
                if out is not None:
                    model.save(out / f"step-{step:06d}.ckpt")
                log.info("step %d loss %.4f val EM %.4f", step, loss_value, report.em)
            records.append(record)
            if log_fh is not None:
                log_fh.write(dumps(record) + "\n")
            if on_log is not None:
                on_log(record)
    finally:
        if log_fh is not None:
            log_fh.close()
        model.eval()

    model.load_state_dict(best_state)
    if out is not None:
        model.save(out / "best.ckpt")
    return TrainResult(best_step, best_em, best_state, records, token_ops, pair_ops)
