"""Token-window chunking, embedding providers and an exact cosine-similarity vector index."""

from __future__ import annotations

import hashlib
import json
import logging
import re
import struct
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable, Iterable, Mapping, Protocol, Sequence

import numpy as np

from ._io import atomic_write_bytes
from .corpus import CuratedDocument
from .errors import DimensionError, IndexFormatError, IntegrityError
from .transport import Transport, bearer, default_transport

logger = logging.getLogger(__name__)

DEFAULT_WINDOWS = (512, 256, 128)
DEFAULT_OVERLAP = 50
REMOTE_DIMENSION = 3072

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def tokenize(text: str) -> list[str]:
    """Split on whitespace; every punctuation character becomes its own token."""
    return _TOKEN_RE.findall(text)


def token_spans(text: str) -> list[tuple[int, int]]:
    return [m.span() for m in _TOKEN_RE.finditer(text)]


def chunk_offsets(n_tokens: int, window: int, overlap: int = DEFAULT_OVERLAP) -> list[tuple[int, int]]:
    """(start, length) pairs for a sliding window of stride ``window - overlap``.

    A trailing partial window is emitted only when it reaches past the end of the
    previous one, so every token is covered and no chunk is a pure subset.
    """
    if window <= 0:
        raise ValueError("window must be positive")
    if not 0 <= overlap < window:
        raise ValueError(f"overlap ({overlap}) must be in [0, window={window})")
    if n_tokens <= 0:
        return []
    stride = window - overlap
    out = [(0, min(window, n_tokens))]
    start = 0
    while start + window < n_tokens:
        start += stride
        out.append((start, min(window, n_tokens - start)))
    return out


@dataclass
class Chunk:
    doc_id: str
    chunk_id: str
    window: int
    token_start: int
    token_len: int
    text: str
    metadata: dict = field(default_factory=dict)


def chunk_document(
    doc: CuratedDocument, windows: Sequence[int] = DEFAULT_WINDOWS, overlap: int = DEFAULT_OVERLAP
) -> list[Chunk]:
    if overlap >= min(windows):
        raise ValueError(f"overlap ({overlap}) must be smaller than every window {list(windows)}")
    spans = token_spans(doc.text)
    if not spans:
        raise ValueError(f"document {doc.id!r} has no tokens")
    chunks = []
    for window in windows:
        for start, length in chunk_offsets(len(spans), window, overlap):
            lo = spans[start][0]
            hi = spans[start + length - 1][1]
            meta = dict(doc.metadata)
            meta.update(doc_id=doc.id, window=window)
            chunks.append(
                Chunk(
                    doc_id=doc.id,
                    chunk_id=f"{doc.id}:w{window}:t{start}",
                    window=window,
                    token_start=start,
                    token_len=length,
                    text=doc.text[lo:hi],
                    metadata=meta,
                )
            )
    return chunks


# --------------------------------------------------------------------------- embedding providers


class Embedder(Protocol):
    name: str
    dimension: int

    def embed(self, texts: Sequence[str]) -> np.ndarray: ...


@lru_cache(maxsize=200_000)
def _token_vector(token: str, dimension: int) -> np.ndarray:
    seed = int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest(), "little")
    vec = np.random.default_rng(seed).standard_normal(dimension)
    vec.flags.writeable = False
    return vec


class MockEmbedder:
    """Deterministic offline embedder: each lowercased token seeds a pseudo-random
    vector, the token vectors are summed and the result is scaled to unit length."""

    def __init__(self, dimension: int = 256, name: str = "mock-hash"):
        if dimension < 1:
            raise ValueError("dimension must be >= 1")
        self.dimension = dimension
        self.name = name

    def _one(self, text: str) -> np.ndarray:
        toks = [t.lower() for t in tokenize(text)] or ["\x00" + text]
        vec = np.zeros(self.dimension)
        for tok in toks:
            vec += _token_vector(tok, self.dimension)
        norm = np.linalg.norm(vec)
        if norm == 0.0:
            vec = _token_vector("\x01" + text, self.dimension).copy()
            norm = np.linalg.norm(vec)
        return vec / norm

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        return np.stack([self._one(t) for t in texts]) if texts else np.zeros((0, self.dimension))


class HTTPEmbedder:
    """Remote embedding endpoint: ``{input, model}`` -> ``{data: [{embedding}]}``."""

    def __init__(
        self,
        url: str = "https://api.openai.com/v1/embeddings",
        model: str = "text-embedding-3-large",
        dimension: int = REMOTE_DIMENSION,
        api_key_env: str | None = "OPENAI_API_KEY",
        transport: Transport | None = None,
    ):
        self.url = url
        self.model = model
        self.dimension = dimension
        self.api_key_env = api_key_env
        self.name = model
        self._transport = transport

    @property
    def transport(self) -> Transport:
        return self._transport or default_transport()

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        body = self.transport.post_json(
            self.url, {"input": list(texts), "model": self.model}, headers=bearer(self.api_key_env)
        )
        data = body.get("data")
        if not isinstance(data, list) or len(data) != len(texts):
            raise IntegrityError(f"expected {len(texts)} embeddings, got {len(data or [])}")
        if all("index" in d for d in data):
            data = sorted(data, key=lambda d: d["index"])
        return np.asarray([d["embedding"] for d in data], dtype=np.float64)


def embed(texts: Sequence[str], provider: Embedder) -> np.ndarray:
    """Embed ``texts`` in order; every row has the provider's declared dimension."""
    if any(not isinstance(t, str) or not t.strip() for t in texts):
        raise ValueError("texts must be non-empty strings")
    vectors = np.asarray(provider.embed(list(texts)), dtype=np.float64)
    if vectors.ndim != 2 or vectors.shape != (len(texts), provider.dimension):
        raise IntegrityError(
            f"provider {provider.name!r} returned shape {vectors.shape}, "
            f"expected ({len(texts)}, {provider.dimension})"
        )
    return vectors


# --------------------------------------------------------------------------- vector index


@dataclass
class EmbeddingRecord:
    chunk_id: str
    vector: np.ndarray
    norm: float


Filter = Callable[[Mapping], bool] | Mapping | None

_MAGIC = b"ONCOIDX\n"
FORMAT_VERSION = 1


def _predicate(flt: Filter) -> Callable[[Mapping], bool] | None:
    if flt is None or callable(flt):
        return flt
    items = dict(flt)
    return lambda meta: all(meta.get(k) == v for k, v in items.items())


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.linalg.norm(a) * np.linalg.norm(b)
    return float(a @ b / denom) if denom else 0.0


class VectorIndex:
    """Exact nearest-neighbour index over cosine similarity.

    Writers are serialized; readers search an immutable snapshot, so concurrent
    ``search`` calls are safe while a single writer appends.
    """

    def __init__(self, dimension: int, embedder_name: str | None = None):
        if dimension < 1:
            raise ValueError("dimension must be >= 1")
        self.dimension = dimension
        self.embedder_name = embedder_name
        self.chunks: dict[str, Chunk] = {}
        self._lock = threading.Lock()
        # (ids, vectors, norms, id_rank) swapped as one tuple so readers never see a torn update
        self._state = ([], np.zeros((0, dimension)), np.zeros(0), np.zeros(0, dtype=np.int64))

    @property
    def _ids(self) -> list[str]:
        return self._state[0]

    @property
    def _vectors(self) -> np.ndarray:
        return self._state[1]

    @property
    def _norms(self) -> np.ndarray:
        return self._state[2]

    def __len__(self) -> int:
        return len(self._ids)

    @property
    def ids(self) -> list[str]:
        return list(self._ids)

    @property
    def vectors(self) -> np.ndarray:
        return self._vectors

    def records(self) -> list[EmbeddingRecord]:
        return [EmbeddingRecord(cid, self._vectors[i], float(self._norms[i])) for i, cid in enumerate(self._ids)]

    def add(self, chunks: Sequence[Chunk], vectors) -> None:
        vectors = np.asarray(vectors, dtype=np.float64)
        if len(chunks) == 0:
            return
        if vectors.shape != (len(chunks), self.dimension):
            raise DimensionError(f"vectors have shape {vectors.shape}, index dimension is {self.dimension}")
        norms = np.linalg.norm(vectors, axis=1)
        if np.any(norms == 0) or not np.all(np.isfinite(norms)):
            raise ValueError("vectors must be finite and non-zero")
        with self._lock:
            new_ids = [c.chunk_id for c in chunks]
            if len(set(new_ids)) != len(new_ids) or any(c in self.chunks for c in new_ids):
                raise ValueError("duplicate chunk_id")
            ids = self._ids + new_ids
            mat = np.vstack([self._vectors, vectors])
            all_norms = np.concatenate([self._norms, norms])
            rank = np.empty(len(ids), dtype=np.int64)
            rank[np.argsort(np.asarray(ids, dtype=object), kind="stable")] = np.arange(len(ids))
            for c in chunks:
                self.chunks[c.chunk_id] = c
            self._state = (ids, mat, all_norms, rank)

    def scores(self, query) -> np.ndarray:
        q = self._check_query(query)
        _, mat, norms, _ = self._state
        return (mat @ q) / (norms * np.linalg.norm(q))

    def _check_query(self, query) -> np.ndarray:
        q = np.asarray(query, dtype=np.float64).ravel()
        if q.shape[0] != self.dimension:
            raise DimensionError(f"query has dimension {q.shape[0]}, index has {self.dimension}")
        if not np.linalg.norm(q) > 0:
            raise ValueError("query vector must be non-zero")
        return q

    def search(self, query_vector, top_n: int, filter: Filter = None) -> list[tuple[str, float]]:
        """Top ``top_n`` (chunk_id, cosine) pairs, best first; ties go to the smaller chunk_id."""
        if top_n < 1:
            raise ValueError("top_n must be >= 1")
        q = self._check_query(query_vector)
        ids, mat, norms, rank = self._state
        if not ids:
            return []
        pred = _predicate(filter)
        cand = np.arange(len(ids))
        if pred is not None:
            cand = np.fromiter(
                (i for i, cid in enumerate(ids) if pred(self.chunks[cid].metadata)), dtype=np.int64
            )
            if cand.size == 0:
                return []
        scores = (mat[cand] @ q) / (norms[cand] * np.linalg.norm(q))
        if top_n < cand.size:
            kth = np.partition(scores, cand.size - top_n)[cand.size - top_n]
            keep = scores >= kth
            cand, scores = cand[keep], scores[keep]
        order = np.lexsort((rank[cand], -scores))[:top_n]
        return [(ids[cand[i]], float(scores[i])) for i in order]

    # ------------------------------------------------------------------ persistence

    def persist(self, path) -> None:
        vec_bytes = np.ascontiguousarray(self._vectors, dtype="<f8").tobytes()
        header = {
            "version": FORMAT_VERSION,
            "dimension": self.dimension,
            "count": len(self._ids),
            "embedder": self.embedder_name,
            "sha256": hashlib.sha256(vec_bytes).hexdigest(),
            "chunks": [asdict(self.chunks[cid]) for cid in self._ids],
        }
        head = json.dumps(header, ensure_ascii=False).encode("utf-8")
        atomic_write_bytes(path, _MAGIC + struct.pack("<Q", len(head)) + head + vec_bytes)

    @classmethod
    def load(cls, path) -> "VectorIndex":
        data = Path(path).read_bytes()
        if not data.startswith(_MAGIC):
            raise IndexFormatError(f"{path}: not an index file (bad magic)")
        off = len(_MAGIC)
        if len(data) < off + 8:
            raise IndexFormatError(f"{path}: truncated header")
        (hlen,) = struct.unpack("<Q", data[off : off + 8])
        off += 8
        if len(data) < off + hlen:
            raise IndexFormatError(f"{path}: truncated header")
        try:
            header = json.loads(data[off : off + hlen].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise IndexFormatError(f"{path}: corrupted header ({exc})") from None
        if header.get("version") != FORMAT_VERSION:
            raise IndexFormatError(f"{path}: unsupported version {header.get('version')!r}, expected {FORMAT_VERSION}")
        dim, count = header["dimension"], header["count"]
        body = data[off + hlen :]
        if len(body) != dim * count * 8:
            raise IndexFormatError(f"{path}: truncated vector block ({len(body)} of {dim * count * 8} bytes)")
        if hashlib.sha256(body).hexdigest() != header.get("sha256"):
            raise IndexFormatError(f"{path}: corrupted vector block (checksum mismatch)")
        if len(header["chunks"]) != count:
            raise IndexFormatError(f"{path}: header lists {len(header['chunks'])} chunks, count is {count}")
        index = cls(dim, embedder_name=header.get("embedder"))
        vectors = np.frombuffer(body, dtype="<f8").reshape(count, dim).astype(np.float64)
        index.add([Chunk(**c) for c in header["chunks"]], vectors)
        return index


def build_index(
    docs: Iterable[CuratedDocument],
    embedder: Embedder,
    windows: Sequence[int] = DEFAULT_WINDOWS,
    overlap: int = DEFAULT_OVERLAP,
    batch_size: int = 64,
    workers: int = 1,
) -> VectorIndex:
    chunks: list[Chunk] = []
    for doc in docs:
        if not tokenize(doc.text):
            logger.warning("skipping empty document %s", doc.id)
            continue
        chunks.extend(chunk_document(doc, windows, overlap))
    index = VectorIndex(embedder.dimension, embedder_name=embedder.name)
    batches = [chunks[i : i + batch_size] for i in range(0, len(chunks), batch_size)]
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        for batch, vecs in zip(batches, pool.map(lambda b: embed([c.text for c in b], embedder), batches)):
            index.add(batch, vecs)
    return index
