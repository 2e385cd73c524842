"""Chunk source documents into non-overlapping fixed-size word passages."""

from __future__ import annotations

from collections.abc import Iterable, Iterator
from dataclasses import dataclass
from pathlib import Path

from .errors import DataError
from .jsonl import iter_jsonl, require, write_jsonl

DEFAULT_WORDS_PER_PASSAGE = 100


@dataclass(frozen=True)
class Document:
    id: str
    title: str
    text: str


@dataclass(frozen=True)
class Passage:
    id: str
    doc_id: str
    title: str
    text: str
    word_count: int

    def to_json(self) -> dict:
        return {"id": self.id, "doc_id": self.doc_id, "title": self.title, "text": self.text}


def split_words(text: str) -> list[str]:
    return text.split()


def chunk_document(doc: Document, words_per_passage: int = DEFAULT_WORDS_PER_PASSAGE) -> list[Passage]:
    if words_per_passage < 1:
        raise ValueError(f"words_per_passage must be >= 1, got {words_per_passage}")
    words = split_words(doc.text)
    passages = []
    for index, start in enumerate(range(0, len(words), words_per_passage)):
        chunk = words[start:start + words_per_passage]
        passages.append(Passage(
            id=f"{doc.id}#{index}",
            doc_id=doc.id,
            title=doc.title,
            text=" ".join(chunk),
            word_count=len(chunk),
        ))
    return passages


def chunk_corpus(docs: Iterable[Document], words_per_passage: int = DEFAULT_WORDS_PER_PASSAGE) -> Iterator[Passage]:
    for doc in docs:
        yield from chunk_document(doc, words_per_passage)


def read_documents(path: str | Path) -> list[Document]:
    docs: list[Document] = []
    seen: set[str] = set()
    for lineno, obj in iter_jsonl(path):
        where = f"{path}:{lineno}"
        doc_id = require(obj, "id", str, where)
        if not doc_id:
            raise DataError(f"{where}: empty document id")
        if doc_id in seen:
            raise DataError(f"{where}: duplicate document id {doc_id!r}")
        seen.add(doc_id)
        title = obj.get("title", "")
        if not isinstance(title, str):
            raise DataError(f"{where}: key 'title' must be str")
        docs.append(Document(doc_id, title, require(obj, "text", str, where)))
    return docs


def read_passages(path: str | Path) -> list[Passage]:
    passages: list[Passage] = []
    seen: set[str] = set()
    for lineno, obj in iter_jsonl(path):
        where = f"{path}:{lineno}"
        pid = require(obj, "id", str, where)
        if pid in seen:
            raise DataError(f"{where}: duplicate passage id {pid!r}")
        seen.add(pid)
        text = require(obj, "text", str, where)
        passages.append(Passage(
            id=pid,
            doc_id=require(obj, "doc_id", str, where),
            title=require(obj, "title", str, where),
            text=text,
            word_count=len(split_words(text)),
        ))
    return passages


def write_passages(path: str | Path, passages: Iterable[Passage]) -> int:
    return write_jsonl(path, (p.to_json() for p in passages))
