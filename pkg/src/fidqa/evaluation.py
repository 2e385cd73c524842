"""Exact-match scoring with SQuAD-style answer normalization."""

from __future__ import annotations

import re
import unicodedata
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

from .errors import DataError
from .jsonl import iter_jsonl, require, write_jsonl

_ARTICLES = re.compile(r"\b(a|an|the)\b")


def _is_punct(ch: str) -> bool:
    return unicodedata.category(ch).startswith("P")


def normalize_answer(s: str) -> str:
    """Lowercase, delete punctuation, drop articles, collapse whitespace."""
    s = s.lower()
    s = "".join(ch for ch in s if not _is_punct(ch))
    s = _ARTICLES.sub(" ", s)
    return " ".join(s.split())


def exact_match(prediction: str, gold_answers: Iterable[str]) -> int:
    pred = normalize_answer(prediction)
    return int(any(pred == normalize_answer(g) for g in gold_answers))


@dataclass(frozen=True)
class Prediction:
    question_id: str
    answer: str

    def to_json(self) -> dict:
        return {"question_id": self.question_id, "answer": self.answer}


@dataclass
class EMReport:
    n_questions: int
    n_correct: int
    em: float
    verdicts: dict[str, int] = field(default_factory=dict)

    def summary(self) -> str:
        return f"EM: {100.0 * self.em:.2f} ({self.n_correct}/{self.n_questions})"

    def to_json(self) -> dict:
        return {"n_questions": self.n_questions, "n_correct": self.n_correct, "em": self.em,
                "verdicts": self.verdicts}


def score(predictions: Sequence[Prediction], examples: Sequence) -> EMReport:
    """EM over ``examples`` (anything with ``id`` and ``answers``)."""
    by_id: dict[str, str] = {}
    for p in predictions:
        if p.question_id in by_id:
            raise DataError(f"duplicate prediction for question {p.question_id!r}")
        by_id[p.question_id] = p.answer
    gold_ids = {ex.id for ex in examples}
    unknown = sorted(set(by_id) - gold_ids)
    if unknown:
        raise DataError(f"prediction for unknown question {unknown[0]!r}")
    verdicts = {}
    for ex in examples:
        if ex.id not in by_id:
            raise DataError(f"missing prediction for question {ex.id!r}")
        verdicts[ex.id] = exact_match(by_id[ex.id], ex.answers)
    n = len(verdicts)
    correct = sum(verdicts.values())
    return EMReport(n, correct, correct / n if n else 0.0, verdicts)


def read_predictions(path: str | Path) -> list[Prediction]:
    out = []
    for lineno, obj in iter_jsonl(path):
        where = f"{path}:{lineno}"
        out.append(Prediction(require(obj, "question_id", str, where), require(obj, "answer", str, where)))
    return out


def write_predictions(path: str | Path, predictions: Iterable[Prediction]) -> int:
    return write_jsonl(path, (p.to_json() for p in predictions))
