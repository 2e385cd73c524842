"""Accuracy and encoder cost as a function of the number of passages."""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass

from .bm25 import RetrievalResult
from .model import FidModel, count_cross_passage_interactions
from .trainer import Contexts, QAExample, evaluate


@dataclass
class ScalingRow:
    k: int
    em: float
    n_correct: int
    n_questions: int
    encoder_pairs: int          # analytic n*L^2*layers*heads at L = max_input_len
    joint_pairs: int            # same for one concatenated sequence
    measured_encoder_pairs: int
    truncated: bool             # some question had fewer than k passages

    def to_json(self) -> dict:
        return dict(self.__dict__)


def recall_at_k(results: Sequence[RetrievalResult], gold: Mapping[str, set[str]], k: int) -> float:
    """Fraction of questions whose top-k hits contain one of their gold passage ids."""
    if not results:
        return 0.0
    found = sum(any(h.passage_id in gold[r.question_id] for h in r.hits[:k]) for r in results)
    return found / len(results)


def scaling_study(model: FidModel, examples: Sequence[QAExample], contexts: Contexts,
                  k_values: Sequence[int], batch_size: int = 64) -> list[ScalingRow]:
    cfg = model.config
    per_layer = cfg.n_enc_layers * cfg.n_heads
    rows = []
    for k in k_values:
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        truncated = any(len(contexts.get(ex.id, ())) < k for ex in examples)
        before = model.counters["encoder_pairs"]
        report = evaluate(model, examples, contexts, k, batch_size)
        fid, joint = count_cross_passage_interactions(k, cfg.max_input_len)
        rows.append(ScalingRow(k, report.em, report.n_correct, report.n_questions, fid * per_layer,
                               joint * per_layer, model.counters["encoder_pairs"] - before, truncated))
    return rows
