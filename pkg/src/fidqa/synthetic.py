"""Synthetic QA tasks with known answers.

``copy_task``: the answer is a span delimited by ``<<`` and ``>>`` inside
one of the example's passages; passages are given, not retrieved.

``needle_corpus``: a document collection about made-up entities. Each
entity has one document per attribute (``<entity> color red``) plus
chatter documents that mention it without any attribute. Questions ask
for an attribute through a synonym that never occurs in documents
("what is the hue of <entity> ?"), so BM25 can only match the entity name
and ranks the entity's documents by length alone. The answer occurs in
exactly one of the entity's documents, so recall grows with k until the
whole entity haystack is retrieved.

Splits are by entity: a reader evaluated on unseen entities cannot answer
from memorized facts and has to find the value in its passages.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import Document
from .rng import DATA, make_rng
from .trainer import QAExample

COPY_WORDS = (
    "amber basil cedar delta ember fjord garnet harbor iris juniper kelp lotus "
    "maple nectar onyx pebble quartz raven sage thistle umber violet willow yarrow"
).split()

# relation word used in documents -> (question synonym, values)
ATTRIBUTES = {
    "color": ("hue", ("red", "blue", "green", "yellow", "purple", "orange", "white", "black")),
    "metal": ("ore", ("iron", "copper", "silver", "gold", "tin", "zinc", "lead", "nickel")),
    "city": ("hometown", ("paris", "lima", "oslo", "cairo", "delhi", "tokyo", "quito", "dakar")),
    "animal": ("pet", ("cat", "dog", "owl", "fox", "yak", "eel", "bat", "ant")),
}

FILLER = (
    "river stone cloud market bridge song lamp garden window letter road winter "
    "harvest festival tower meadow candle journey engine mirror forest village "
    "storm castle mountain ocean valley desert island palace library museum"
).split()

_ONSETS = "b d f g k l m n p r s t v z".split()
_VOWELS = "a e i o u".split()


def copy_task(n_examples: int = 64, n_passages: int = 2, passage_len: int = 8, max_span: int = 2,
              seed: int = 0) -> tuple[list[QAExample], dict[str, list[tuple[str, str]]]]:
    rng = make_rng(seed, DATA)
    examples, contexts = [], {}
    for i in range(n_examples):
        qid = f"copy{i:04d}"
        span = [COPY_WORDS[j] for j in rng.integers(len(COPY_WORDS), size=int(rng.integers(1, max_span + 1)))]
        gold = int(rng.integers(n_passages))
        passages = []
        for j in range(n_passages):
            words = [COPY_WORDS[w] for w in rng.integers(len(COPY_WORDS), size=passage_len)]
            if j == gold:
                at = int(rng.integers(passage_len + 1))
                words = words[:at] + ["<<", *span, ">>"] + words[at:]
            passages.append((f"note {j}", " ".join(words)))
        answer = " ".join(span)
        examples.append(QAExample(qid, "what is marked ?", (answer,)))
        contexts[qid] = passages
    return examples, contexts


@dataclass
class NeedleCorpus:
    documents: list[Document]
    questions: list[QAExample]
    gold_doc: dict[str, str]            # question id -> id of the document holding the answer
    entity_docs: dict[str, list[str]]   # entity -> its document ids, in generation order
    question_entity: dict[str, str]     # question id -> entity


def _entity_names(n: int, rng: np.random.Generator) -> list[str]:
    names: list[str] = []
    seen: set[str] = set()
    while len(names) < n:
        name = "".join(_ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))] for _ in range(3))
        if name not in seen:
            seen.add(name)
            names.append(name)
    return names


def needle_corpus(n_entities: int = 125, n_chatter: int = 0, seed: int = 0,
                  attributes: tuple[str, ...] | None = None) -> NeedleCorpus:
    """One question per (entity, attribute): 125 entities x 4 attributes = 500 questions."""
    rng = make_rng(seed, DATA)
    attrs = attributes or tuple(ATTRIBUTES)
    docs: list[Document] = []
    questions: list[QAExample] = []
    gold: dict[str, str] = {}
    entity_docs: dict[str, list[str]] = {}
    question_entity: dict[str, str] = {}

    def filler(lo: int, hi: int) -> list[str]:
        return [FILLER[i] for i in rng.integers(len(FILLER), size=int(rng.integers(lo, hi + 1)))]

    for e, entity in enumerate(_entity_names(n_entities, rng)):
        bodies = []
        for attr in attrs:
            value = ATTRIBUTES[attr][1][rng.integers(len(ATTRIBUTES[attr][1]))]
            before, after = filler(0, 2), filler(0, 2)
            bodies.append((attr, value, " ".join([*before, entity, attr, value, *after])))
        for _ in range(n_chatter):
            before, after = filler(1, 3), filler(1, 3)
            bodies.append((None, None, " ".join([*before, entity, *after])))
        order = rng.permutation(len(bodies))
        ids = []
        for slot, k in enumerate(order):
            attr, value, body = bodies[k]
            doc_id = f"e{e:04d}-{slot}"
            ids.append(doc_id)
            docs.append(Document(doc_id, entity, body))
            if attr is not None:
                qid = f"q{len(questions):05d}"
                questions.append(QAExample(qid, f"what is the {ATTRIBUTES[attr][0]} of {entity} ?", (value,)))
                gold[qid] = doc_id
                question_entity[qid] = entity
        entity_docs[entity] = ids
    return NeedleCorpus(docs, questions, gold, entity_docs, question_entity)


def split_by_entity(corpus: NeedleCorpus, n_test: int, n_val: int = 0) -> tuple[list[QAExample], list[QAExample], list[QAExample]]:
    """(train, val, test) questions; the first ``n_test`` entities are test, the next ``n_val`` validation."""
    entities = list(corpus.entity_docs)
    if n_test + n_val >= len(entities):
        raise ValueError(f"{len(entities)} entities cannot hold {n_test} test + {n_val} val + training")
    role = {e: "test" for e in entities[:n_test]} | {e: "val" for e in entities[n_test:n_test + n_val]}
    parts: dict[str, list[QAExample]] = {"train": [], "val": [], "test": []}
    for q in corpus.questions:
        parts[role.get(corpus.question_entity[q.id], "train")].append(q)
    return parts["train"], parts["val"], parts["test"]
