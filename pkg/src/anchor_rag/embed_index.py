"""Exact dense retrieval over chunk embeddings.

The index is a plain (ids, matrix) pair searched by brute-force cosine,
which is exact and fast at desk scale (tens of thousands of chunks).
Vectors are unit-normalized, stored as float32, and scored in float64.
Two providers are included: an OpenAI-compatible HTTP embedder and a
deterministic hashing embedder (character n-grams feature-hashed into a
fixed dimension) used for tests and offline runs.
"""

from __future__ import annotations

import json
import re
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import requests

from anchor_rag.corpus import Chunk
from anchor_rag.prompt_kit import ReasoningTriple

INDEX_MAGIC = b"ARIX"
INDEX_VERSION = 1

QUERY_STYLES = ("space", "pipe")


class EmbedIndexError(ValueError):
    """Invalid index input, dimension mismatch, or provider failure."""


class EmbeddingProvider(Protocol):
    provider_id: str
    dim: int

    def embed_batch(self, texts: Sequence[str]) -> np.ndarray: ...


class HashingEmbedder:
    """Deterministic text embedder: feature-hashed character n-grams.

    Text is lowercased and every non-alphanumeric run becomes one space, so
    snake_case predicates land in the same buckets as their plain-text
    forms. Each n-gram is CRC-hashed to a signed bucket; the count vector
    is then L2-normalized.
    """

    def __init__(self, dim: int = 256, ngram_sizes: Sequence[int] = (3, 4, 5)):
        if dim < 2:
            raise EmbedIndexError("embedding dim must be >= 2")
        self.dim = dim
        self.ngram_sizes = tuple(ngram_sizes)
        sizes = "-".join(str(n) for n in self.ngram_sizes)
        self.provider_id = f"hashing-v1:d{dim}:n{sizes}"

    @staticmethod
    def _normalize_text(text: str) -> str:
        return " ".join(re.sub(r"[^a-z0-9]+", " ", text.lower()).split())

    def _embed_one(self, text: str) -> np.ndarray:
        v = np.zeros(self.dim, dtype=np.float64)
        t = self._normalize_text(text)
        grams = [t[i : i + n] for n in self.ngram_sizes for i in range(len(t) - n + 1)]
        if not grams and t:
            grams = [t]
        for gram in grams:
            h = zlib.crc32(gram.encode("utf-8"))
            sign = 1.0 if (h >> 31) & 1 else -1.0
            v[h % self.dim] += sign
        norm = float(np.linalg.norm(v))
        if norm == 0.0:
            v[0] = 1.0
        else:
            v /= norm
        return v

    def embed_batch(self, texts: Sequence[str]) -> np.ndarray:
        return np.stack([self._embed_one(t) for t in texts]).astype(np.float32)


class RemoteEmbedder:
    """OpenAI-compatible ``/embeddings`` endpoint client."""

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key: str | None = None,
        dim: int | None = None,
        batch_size: int = 128,
        timeout_s: float = 60.0,
    ):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key = api_key
        self.dim = dim or 0  # discovered from the first response when unset
        self.batch_size = batch_size
        self.timeout_s = timeout_s
        self.provider_id = f"remote:{model}"

    def _post(self, texts: Sequence[str]) -> list[list[float]]:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            resp = requests.post(
                f"{self.base_url}/embeddings",
                json={"model": self.model, "input": list(texts)},
                headers=headers,
                timeout=self.timeout_s,
            )
            resp.raise_for_status()
        except requests.RequestException as exc:
            raise EmbedIndexError(f"embedding request failed: {exc}") from exc
        data = sorted(resp.json()["data"], key=lambda row: row["index"])
        return [row["embedding"] for row in data]

    def embed_batch(self, texts: Sequence[str]) -> np.ndarray:
        rows: list[list[float]] = []
        for i in range(0, len(texts), self.batch_size):
            rows.extend(self._post(texts[i : i + self.batch_size]))
        matrix = np.asarray(rows, dtype=np.float64)
        if matrix.ndim != 2:
            raise EmbedIndexError("embedding endpoint returned a ragged batch")
        if self.dim == 0:
            self.dim = matrix.shape[1]
            self.provider_id = f"remote:{self.model}"
        if matrix.shape[1] != self.dim:
            raise EmbedIndexError(f"endpoint returned dim {matrix.shape[1]}, expected {self.dim}")
        norms = np.linalg.norm(matrix, axis=1, keepdims=True)
        norms[norms == 0.0] = 1.0
        return (matrix / norms).astype(np.float32)


def embed(texts: Sequence[str], provider: EmbeddingProvider) -> np.ndarray:
    """Embed texts to unit vectors, one row per input, order preserved."""
    if not texts:
        raise EmbedIndexError("no texts to embed")
    if any(not t for t in texts):
        raise EmbedIndexError("texts must be non-empty strings")
    matrix = provider.embed_batch(texts)
    norms = np.linalg.norm(matrix.astype(np.float64), axis=1)
    if not np.all(np.abs(norms - 1.0) <= 1e-6):
        raise EmbedIndexError("provider returned non-unit vectors")
    return matrix


@dataclass(frozen=True)
class RetrievalHit:
    chunk_id: str
    score: float
    query_index: int


class Index:
    """Immutable exact-cosine index: chunk ids plus their unit vectors."""

    def __init__(self, ids: Sequence[str], vectors: np.ndarray, provider: EmbeddingProvider):
        if len(ids) == 0:
            raise EmbedIndexError("cannot build an empty index")
        if len(set(ids)) != len(ids):
            raise EmbedIndexError("duplicate chunk ids in index")
        if vectors.shape[0] != len(ids):
            raise EmbedIndexError("ids/vectors row count mismatch")
        self.ids = list(ids)
        self._stored = np.ascontiguousarray(vectors, dtype=np.float32)
        self._matrix = self._stored.astype(np.float64)
        self.dim = int(vectors.shape[1])
        self.provider = provider
        self.provider_id = provider.provider_id
        self._row_of = {cid: i for i, cid in enumerate(self.ids)}

    def __len__(self) -> int:
        return len(self.ids)

    def vector(self, chunk_id: str) -> np.ndarray:
        return self._matrix[self._row_of[chunk_id]]

    def search(self, query: str, k: int = 5) -> list[RetrievalHit]:
        """Top-k by exact cosine; ties broken by ascending chunk id."""
        if not query:
            raise EmbedIndexError("empty query string")
        if k < 1:
            raise EmbedIndexError("k must be >= 1")
        q = embed([query], self.provider)[0].astype(np.float64)
        if q.shape[0] != self.dim:
            raise EmbedIndexError(f"query dim {q.shape[0]} does not match index dim {self.dim}")
        scores = self._matrix @ q
        order = sorted(range(len(self.ids)), key=lambda i: (-scores[i], self.ids[i]))
        return [
            RetrievalHit(chunk_id=self.ids[i], score=float(scores[i]), query_index=0)
            for i in order[: min(k, len(self.ids))]
        ]

    # --- persistence -------------------------------------------------------
    # Binary layout: magic, version, dim, count, provider id, id table,
    # row-major float32 vectors. A JSONL sidecar lists the rows for
    # inspection without parsing the binary.

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        provider_bytes = self.provider_id.encode("utf-8")
        with path.open("wb") as fh:
            fh.write(INDEX_MAGIC)
            fh.write(struct.pack("<IIQ", INDEX_VERSION, self.dim, len(self.ids)))
            fh.write(struct.pack("<I", len(provider_bytes)))
            fh.write(provider_bytes)
            for cid in self.ids:
                raw = cid.encode("utf-8")
                fh.write(struct.pack("<I", len(raw)))
                fh.write(raw)
            fh.write(self._stored.tobytes(order="C"))
        sidecar = path.with_name(path.name + ".manifest.jsonl")
        with sidecar.open("w", encoding="utf-8") as fh:
            header = {
                "kind": "embed_index_manifest",
                "schema_version": INDEX_VERSION,
                "dim": self.dim,
                "count": len(self.ids),
                "provider_id": self.provider_id,
            }
            fh.write(json.dumps(header) + "\n")
            for i, cid in enumerate(self.ids):
                fh.write(json.dumps({"row": i, "chunk_id": cid}, ensure_ascii=False) + "\n")

    @classmethod
    def load(cls, path: str | Path, provider: EmbeddingProvider) -> "Index":
        path = Path(path)
        with path.open("rb") as fh:
            if fh.read(4) != INDEX_MAGIC:
                raise EmbedIndexError(f"{path} is not an embedding index")
            version, dim, count = struct.unpack("<IIQ", fh.read(16))
            if version != INDEX_VERSION:
                raise EmbedIndexError(f"{path}: unsupported index version {version}")
            (provider_len,) = struct.unpack("<I", fh.read(4))
            provider_id = fh.read(provider_len).decode("utf-8")
            ids = []
            for _ in range(count):
                (id_len,) = struct.unpack("<I", fh.read(4))
                ids.append(fh.read(id_len).decode("utf-8"))
            vectors = np.frombuffer(fh.read(count * dim * 4), dtype=np.float32).reshape(count, dim)
        if provider.provider_id != provider_id:
            raise EmbedIndexError(
                f"index was built with provider {provider_id!r}, got {provider.provider_id!r}"
            )
        return cls(ids, vectors, provider)


def build_index(chunks: Sequence[Chunk], provider: EmbeddingProvider) -> Index:
    """Embed all chunk texts and assemble the index."""
    if not chunks:
        raise EmbedIndexError("cannot build an index from zero chunks")
    ids = [c.chunk_id for c in chunks]
    if len(set(ids)) != len(ids):
        raise EmbedIndexError("duplicate chunk ids")
    vectors = embed([c.text for c in chunks], provider)
    return Index(ids, vectors, provider)


def search(index: Index, query: str, k: int = 5) -> list[RetrievalHit]:
    return index.search(query, k=k)


def triple_query(triple: ReasoningTriple, style: str = "space") -> str:
    """Render a triple as a retrieval query string.

    ``space`` joins the fields with single spaces (predicates kept
    verbatim, underscores intact); ``pipe`` keeps the field separators.
    """
    if style == "space":
        return f"{triple.subject} {triple.predicate} {triple.object}"
    if style == "pipe":
        return f"{triple.subject} | {triple.predicate} | {triple.object}"
    raise EmbedIndexError(f"unknown query style: {style!r} (expected one of {QUERY_STYLES})")


def retrieve_for_queries(index: Index, queries: Sequence[str], k_per_query: int = 5) -> tuple[list[str], list[RetrievalHit]]:
    """Per-query top-k plus the de-duplicated union of chunk ids.

    Union order is first occurrence: query order, then rank order within a
    query. The full hit lists are returned for tracing.
    """
    if not queries:
        raise EmbedIndexError("no queries to retrieve for")
    ordered: list[str] = []
    seen: set[str] = set()
    hits: list[RetrievalHit] = []
    for qi, query in enumerate(queries):
        for hit in index.search(query, k=k_per_query):
            hit = RetrievalHit(chunk_id=hit.chunk_id, score=hit.score, query_index=qi)
            hits.append(hit)
            if hit.chunk_id not in seen:
                seen.add(hit.chunk_id)
                ordered.append(hit.chunk_id)
    return ordered, hits


def retrieve_for_triples(
    index: Index,
    triples: Sequence[ReasoningTriple],
    k_per_triple: int = 5,
    style: str = "space",
) -> list[str]:
    """Retrieve top-k per triple and unite the results, dropping repeats."""
    if not triples:
        raise EmbedIndexError("no triples to retrieve for")
    queries = [triple_query(t, style=style) for t in triples]
    ordered, _ = retrieve_for_queries(index, queries, k_per_query=k_per_triple)
    return ordered
