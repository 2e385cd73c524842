"""Okapi BM25 over an in-memory inverted index.

Binary index layout (all integers unsigned little-endian, floats IEEE-754
little-endian doubles)::

    magic        8 bytes   b"FIDBM25\\x00"
    version      u32       1
    N            u32       number of passages
    k1, b        f64, f64
    avgdl        f64
    N times:     u32 byte length + UTF-8 passage id, then u32 doc_len
    n_terms      u32
    n_terms times (terms in ascending code-point order):
                 u32 byte length + UTF-8 term
                 u32 df
                 df times: u32 passage ordinal, u32 tf   (ordinal ascending)
"""

from __future__ import annotations

import math
import re
import struct
from collections import Counter
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

from .corpus import Passage
from .errors import DataError

K1 = 1.2
B = 0.75

MAGIC = b"FIDBM25\x00"
VERSION = 1

_TOKEN = re.compile(r"[^\W_]+")


def analyze(text: str) -> list[str]:
    """Lowercase and split on every non-alphanumeric character."""
    return _TOKEN.findall(text.lower())


@dataclass(frozen=True)
class Hit:
    passage_id: str
    score: float


@dataclass
class RetrievalResult:
    question_id: str
    hits: list[Hit]

    def to_json(self) -> dict:
        return {
            "question_id": self.question_id,
            "hits": [{"passage_id": h.passage_id, "score": h.score} for h in self.hits],
        }


@dataclass
class InvertedIndex:
    N: int
    postings: dict[str, list[tuple[int, int]]]
    doc_len: list[int]
    avgdl: float
    passage_ids: list[str]
    k1: float = K1
    b: float = B
    df: dict[str, int] = field(init=False)

    def __post_init__(self) -> None:
        self.df = {term: len(plist) for term, plist in self.postings.items()}
        self._tf = [dict() for _ in range(self.N)]
        for term, plist in self.postings.items():
            for ordinal, tf in plist:
                self._tf[ordinal][term] = tf

    def idf(self, term: str) -> float:
        df = self.df.get(term, 0)
        return math.log(1.0 + (self.N - df + 0.5) / (df + 0.5))

    def tf(self, term: str, ordinal: int) -> int:
        return self._tf[ordinal].get(term, 0)

    def _length_norm(self, ordinal: int) -> float:
        # only reached for passages holding a query term, so avgdl > 0
        return self.k1 * (1.0 - self.b + self.b * self.doc_len[ordinal] / self.avgdl)


def build_index(passages: Iterable[Passage], k1: float = K1, b: float = B) -> InvertedIndex:
    postings: dict[str, list[tuple[int, int]]] = {}
    doc_len: list[int] = []
    ids: list[str] = []
    for ordinal, p in enumerate(passages):
        terms = analyze(p.title + " " + p.text)
        doc_len.append(len(terms))
        ids.append(p.id)
        for term, tf in Counter(terms).items():
            postings.setdefault(term, []).append((ordinal, tf))
    if not ids:
        raise DataError("cannot index an empty corpus")
    if len(set(ids)) != len(ids):
        raise DataError("duplicate passage ids in corpus")
    avgdl = sum(doc_len) / len(doc_len)
    return InvertedIndex(len(ids), postings, doc_len, avgdl, ids, k1, b)


def _distinct(terms: Iterable[str]) -> list[str]:
    return list(dict.fromkeys(terms))


def _term_score(index: InvertedIndex, term: str, tf: int, ordinal: int) -> float:
    return index.idf(term) * tf * (index.k1 + 1.0) / (tf + index._length_norm(ordinal))


def bm25_score(index: InvertedIndex, query_terms: Sequence[str], passage_ordinal: int) -> float:
    if not 0 <= passage_ordinal < index.N:
        raise IndexError(f"passage ordinal {passage_ordinal} out of range")
    score = 0.0
    for term in _distinct(query_terms):
        tf = index.tf(term, passage_ordinal)
        if tf:
            score += _term_score(index, term, tf, passage_ordinal)
    return score


def score_all(index: InvertedIndex, query_terms: Sequence[str]) -> dict[int, float]:
    """Term-at-a-time accumulation over postings; only touched passages appear."""
    acc: dict[int, float] = {}
    for term in _distinct(query_terms):
        for ordinal, tf in index.postings.get(term, ()):
            acc[ordinal] = acc.get(ordinal, 0.0) + _term_score(index, term, tf, ordinal)
    return acc


def retrieve(index: InvertedIndex, question: str, k: int, question_id: str = "") -> RetrievalResult:
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    acc = score_all(index, analyze(question))
    positive = sorted(
        ((score, index.passage_ids[o]) for o, score in acc.items() if score > 0.0),
        key=lambda t: (-t[0], t[1]),
    )
    hits = [Hit(pid, score) for score, pid in positive[:k]]
    if len(hits) < k:
        # pad with zero-score passages, lowest ordinal first
        for ordinal in range(index.N):
            if len(hits) >= k:
                break
            if acc.get(ordinal, 0.0) <= 0.0:
                hits.append(Hit(index.passage_ids[ordinal], 0.0))
    return RetrievalResult(question_id, hits)


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def save_index(index: InvertedIndex, path: str | Path) -> None:
    parts = [MAGIC, struct.pack("<IIddd", VERSION, index.N, index.k1, index.b, index.avgdl)]
    for pid, dl in zip(index.passage_ids, index.doc_len):
        parts.append(_pack_str(pid))
        parts.append(struct.pack("<I", dl))
    terms = sorted(index.postings)
    parts.append(struct.pack("<I", len(terms)))
    for term in terms:
        plist = index.postings[term]
        parts.append(_pack_str(term))
        parts.append(struct.pack("<I", len(plist)))
        parts.append(struct.pack(f"<{2 * len(plist)}I", *(v for pair in plist for v in pair)))
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes, path: Path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, fmt: str) -> tuple:
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise DataError(f"{self.path}: truncated index file")
        out = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return out

    def string(self) -> str:
        (n,) = self.take("<I")
        if self.pos + n > len(self.buf):
            raise DataError(f"{self.path}: truncated index file")
        s = self.buf[self.pos:self.pos + n].decode("utf-8")
        self.pos += n
        return s


def load_index(path: str | Path) -> InvertedIndex:
    path = Path(path)
    buf = path.read_bytes()
    if buf[:8] != MAGIC:
        raise DataError(f"{path}: not a BM25 index file")
    r = _Reader(buf, path)
    r.pos = 8
    version, n, k1, b, avgdl = r.take("<IIddd")
    if version != VERSION:
        raise DataError(f"{path}: unsupported BM25 index version {version}")
    ids, doc_len = [], []
    for _ in range(n):
        ids.append(r.string())
        doc_len.append(r.take("<I")[0])
    (n_terms,) = r.take("<I")
    postings: dict[str, list[tuple[int, int]]] = {}
    for _ in range(n_terms):
        term = r.string()
        (df,) = r.take("<I")
        flat = r.take(f"<{2 * df}I")
        postings[term] = list(zip(flat[0::2], flat[1::2]))
    return InvertedIndex(n, postings, doc_len, avgdl, ids, k1, b)
