"""Exact dot-product passage retrieval over fixed-dimension embeddings.

Vector index layout (little-endian)::

    magic     8 bytes  b"FIDDENSE"
    version   u32      1
    n, dim    u32, u32
    vectors   n * dim float32, row-major
    ids       n times: u32 byte length + UTF-8 passage id
    provider  u32 byte length + UTF-8 JSON {"name": ..., "dim": ..., "seed": ...}

The trailing provider record lets ``retrieve`` rebuild the question-side
embedder that produced the passage vectors.
"""

from __future__ import annotations

import hashlib
import json
import struct
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np

from .bm25 import Hit, RetrievalResult, analyze
from .corpus import Passage
from .errors import DataError

MAGIC = b"FIDDENSE"
VERSION = 1


def term_hash(term: str, seed: int) -> int:
    """Seeded 64-bit hash: keyed BLAKE2b with an 8-byte digest, read little-endian."""
    key = seed.to_bytes(8, "little", signed=False)
    digest = hashlib.blake2b(term.encode("utf-8"), digest_size=8, key=key).digest()
    return int.from_bytes(digest, "little")


def hashed_bow_embed(text: str, dim: int, seed: int = 0) -> np.ndarray:
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    vec = np.zeros(dim, dtype=np.float64)
    for term in analyze(text):
        h = term_hash(term, seed)
        # bucket from the low bits, sign from the top bit
        vec[h % dim] += -1.0 if h >> 63 else 1.0
    norm = np.linalg.norm(vec)
    return vec / norm if norm > 0 else vec


class EmbeddingProvider(Protocol):
    name: str
    dim: int

    def embed_question(self, text: str) -> np.ndarray: ...

    def embed_passage(self, title: str, text: str) -> np.ndarray: ...


@dataclass(frozen=True)
class HashedBowProvider:
    dim: int = 256
    seed: int = 0
    name: str = "hashed-bow"

    def embed_question(self, text: str) -> np.ndarray:
        return hashed_bow_embed(text, self.dim, self.seed)

    def embed_passage(self, title: str, text: str) -> np.ndarray:
        return hashed_bow_embed(title + " " + text, self.dim, self.seed)

    def describe(self) -> dict:
        return {"name": self.name, "dim": self.dim, "seed": self.seed}


PROVIDERS = {"hashed-bow": HashedBowProvider}


def provider_from_description(desc: dict) -> EmbeddingProvider:
    try:
        cls = PROVIDERS[desc["name"]]
    except KeyError:
        raise DataError(f"unknown embedding provider {desc.get('name')!r}") from None
    return cls(dim=int(desc["dim"]), seed=int(desc.get("seed", 0)))


@dataclass
class DenseIndex:
    vectors: np.ndarray
    passage_ids: list[str]
    provider: dict | None = None

    def __post_init__(self) -> None:
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.passage_ids):
            raise DataError("vector rows must match passage count")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


def build_dense_index(passages: Iterable[Passage], provider: EmbeddingProvider) -> DenseIndex:
    ids, rows = [], []
    for p in passages:
        ids.append(p.id)
        rows.append(provider.embed_passage(p.title, p.text))
    if not ids:
        raise DataError("cannot index an empty corpus")
    desc = provider.describe() if hasattr(provider, "describe") else {"name": provider.name, "dim": provider.dim}
    return DenseIndex(np.asarray(rows, dtype=np.float32).reshape(len(ids), provider.dim), ids, desc)


def top_k(scores: np.ndarray, ids: Sequence[str], k: int) -> list[Hit]:
    """Exhaustive ranking: descending score, ties by ascending passage id."""
    order = sorted(range(len(ids)), key=lambda i: (-scores[i], ids[i]))
    return [Hit(ids[i], float(scores[i])) for i in order[:k]]


def search(index: DenseIndex, query: np.ndarray, k: int, question_id: str = "") -> RetrievalResult:
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    query = np.asarray(query, dtype=np.float64)
    if query.shape != (index.dim,):
        raise ValueError(f"query dimension {query.shape} does not match index dimension {index.dim}")
    scores = index.vectors.astype(np.float64) @ query
    return RetrievalResult(question_id, top_k(scores, index.passage_ids, k))


def dense_retrieve(index: DenseIndex, provider: EmbeddingProvider, question: str, k: int,
                   question_id: str = "") -> RetrievalResult:
    if provider.dim != index.dim:
        raise ValueError(f"provider dim {provider.dim} != index dim {index.dim}")
    return search(index, provider.embed_question(question), k, question_id)


def save_dense_index(index: DenseIndex, path: str | Path) -> None:
    n, dim = index.vectors.shape
    parts = [MAGIC, struct.pack("<III", VERSION, n, dim),
             np.ascontiguousarray(index.vectors, dtype="<f4").tobytes()]
    for pid in index.passage_ids:
        raw = pid.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
    meta = json.dumps(index.provider or {}, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(meta)) + meta)
    Path(path).write_bytes(b"".join(parts))


def load_dense_index(path: str | Path) -> DenseIndex:
    path = Path(path)
    buf = path.read_bytes()
    if buf[:8] != MAGIC:
        raise DataError(f"{path}: not a dense index file")
    try:
        version, n, dim = struct.unpack_from("<III", buf, 8)
        if version != VERSION:
            raise DataError(f"{path}: unsupported dense index version {version}")
        pos = 20
        vectors = np.frombuffer(buf, dtype="<f4", count=n * dim, offset=pos).reshape(n, dim).astype(np.float32)
        pos += 4 * n * dim
        ids = []
        for _ in range(n):
            (length,) = struct.unpack_from("<I", buf, pos)
            ids.append(buf[pos + 4:pos + 4 + length].decode("utf-8"))
            pos += 4 + length
        (length,) = struct.unpack_from("<I", buf, pos)
        provider = json.loads(buf[pos + 4:pos + 4 + length]) or None
    except (struct.error, ValueError) as exc:
        if isinstance(exc, DataError):
            raise
        raise DataError(f"{path}: truncated or corrupt dense index") from exc
    return DenseIndex(vectors, ids, provider)
