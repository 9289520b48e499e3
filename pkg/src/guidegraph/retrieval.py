"""Embedding store and top-k cosine candidate retrieval for duplicate detection.

Pools are at most hundreds of nodes per document, so retrieval is exact
brute force. The scripted embedding backend is a seeded character-n-gram
feature hasher: deterministic, whitespace-insensitive after label
normalization, and good enough to put near-identical labels first.
"""
from __future__ import annotations

import hashlib
import json
import logging
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Protocol

import numpy as np
import requests

from .core import canonical_json, normalize_label
from .errors import EmbeddingError, OracleTransportError

logger = logging.getLogger(__name__)

DEFAULT_DIM = 256
DEFAULT_SEED = 13
CACHE_FORMAT = "embedding-cache/1"


class EmbeddingBackend(Protocol):
    name: str

    def embed_text(self, text: str) -> np.ndarray: ...


class HashingEmbeddingBackend:
    """Deterministic feature-hashing embedder over character trigrams."""

    def __init__(self, dim: int = DEFAULT_DIM, seed: int = DEFAULT_SEED, ngram: int = 3) -> None:
        if dim <= 0:
            raise EmbeddingError("embedding dimension must be positive")
        self.name = f"hashing-v1:dim={dim}:seed={seed}:n={ngram}"
        self._dim = dim
        self._seed = seed
        self._ngram = ngram

    def embed_text(self, text: str) -> np.ndarray:
        padded = f" {text} "
        vector = np.zeros(self._dim, dtype=np.float64)
        for i in range(max(1, len(padded) - self._ngram + 1)):
            gram = padded[i : i + self._ngram]
            digest = hashlib.blake2b(
                f"{self._seed}:{gram}".encode("utf-8"), digest_size=8
            ).digest()
            value = int.from_bytes(digest, "big")
            sign = 1.0 if value & 1 else -1.0
            vector[(value >> 1) % self._dim] += sign
        return vector


class LiveEmbeddingBackend:
    """Embeddings endpoint sharing the OpenAI-compatible API surface."""

    def __init__(self, base_url: str, model: str, auth_token: str | None = None,
                 timeout: float = 60.0, session: requests.Session | None = None) -> None:
        self.name = f"live:{model}"
        self._url = base_url.rstrip("/") + "/embeddings"
        self._model = model
        self._token = auth_token
        self._timeout = timeout
        self._session = session or requests.Session()

    def embed_text(self, text: str) -> np.ndarray:
        headers = {"Content-Type": "application/json"}
        if self._token:
            headers["Authorization"] = f"Bearer {self._token}"
        try:
            resp = self._session.post(
                self._url,
                json={"model": self._model, "input": [text]},
                headers=headers,
                timeout=self._timeout,
            )
            resp.raise_for_status()
            data = resp.json()
            return np.asarray(data["data"][0]["embedding"], dtype=np.float64)
        except requests.RequestException as exc:
            raise OracleTransportError(f"embedding request failed: {exc}") from exc


class EmbeddingStore:
    """Cache of label embeddings keyed by normalized label text.

    Dimensionality is fixed by the first vector; zero vectors are rejected
    at ingest. Reads and inserts are internally synchronized.
    """

    def __init__(self, backend: EmbeddingBackend) -> None:
        self.backend = backend
        self._cache: dict[str, np.ndarray] = {}
        self._dim: int | None = None
        self._lock = threading.Lock()

    def _ingest(self, key: str, vector: np.ndarray) -> np.ndarray:
        vector = np.asarray(vector, dtype=np.float64)
        if float(np.linalg.norm(vector)) == 0.0:
            raise EmbeddingError(f"zero embedding vector for {key!r}")
        if self._dim is None:
            self._dim = vector.size
        elif vector.size != self._dim:
            raise EmbeddingError(
                f"dimension mismatch for {key!r}: {vector.size} != {self._dim}"
            )
        self._cache[key] = vector
        return vector

    def vector(self, label: str) -> np.ndarray:
        key = normalize_label(label)
        with self._lock:
            cached = self._cache.get(key)
            if cached is not None:
                return cached
            return self._ingest(key, self.backend.embed_text(key))

    def put(self, label: str, vector) -> None:
        """Install a vector directly (used by tests with hand-placed vectors)."""
        key = normalize_label(label)
        with self._lock:
            self._ingest(key, np.asarray(vector, dtype=np.float64))

    def cosine(self, label_a: str, label_b: str) -> float:
        a = self.vector(label_a)
        b = self.vector(label_b)
        return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))

    def save(self, path: str | Path) -> None:
        with self._lock:
            entries = {
                hashlib.sha256(key.encode("utf-8")).hexdigest(): {
                    "label": key,
                    "values": [float(x) for x in vec],
                }
                for key, vec in sorted(self._cache.items())
            }
        doc = {"format": CACHE_FORMAT, "backend": self.backend.name, "entries": entries}
        Path(path).write_text(canonical_json(doc), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path, backend: EmbeddingBackend) -> "EmbeddingStore":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        if doc.get("format") != CACHE_FORMAT:
            raise EmbeddingError(f"unsupported cache format {doc.get('format')!r}")
        store = cls(backend)
        if doc.get("backend") != backend.name:
            logger.warning("embedding cache was built by %r, not %r; ignoring it",
                           doc.get("backend"), backend.name)
            return store
        for entry in doc["entries"].values():
            store._ingest(entry["label"], np.asarray(entry["values"], dtype=np.float64))
        return store


@dataclass(frozen=True)
class CandidateSet:
    """Top-k pool members by cosine similarity, ties broken by ascending id."""

    entries: tuple[tuple[str, float], ...]
    k: int

    def labels(self, pool: Mapping[str, str]) -> list[str]:
        return [pool[node_id] for node_id, _ in self.entries]


def cosine_candidates(query: str, pool: Mapping[str, str], k: int,
                      store: EmbeddingStore) -> CandidateSet:
    """Rank pool members (node_id -> label) by cosine similarity to the query.

    The query may be a node id present in the pool (which is then excluded
    from its own candidates) or a raw label. An empty pool yields an empty
    candidate set.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if query in pool:
        query_label = pool[query]
        members = [(nid, label) for nid, label in pool.items() if nid != query]
    else:
        query_label = query
        members = list(pool.items())
    if not members:
        return CandidateSet(entries=(), k=k)
    q = store.vector(query_label)
    q_norm = float(np.linalg.norm(q))
    scored = []
    for node_id, label in members:
        v = store.vector(label)
        sim = float(np.dot(q, v) / (q_norm * np.linalg.norm(v)))
        scored.append((node_id, sim))
    scored.sort(key=lambda item: (-item[1], item[0]))
    return CandidateSet(entries=tuple(scored[:k]), k=k)
