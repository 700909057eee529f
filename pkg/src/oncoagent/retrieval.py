"""Question decomposition and the retrieve -> rerank -> top-k -> merge -> dedup pipeline."""

from __future__ import annotations

import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ProviderError
from .index import Embedder, VectorIndex, embed
from .transport import Transport, bearer, default_transport

logger = logging.getLogger(__name__)

RERANKERS = ("cosine", "external")


@dataclass
class RetrievalConfig:
    n: int = 40
    k: int = 10
    max_subqueries: int = 12
    reranker: str = "cosine"
    rerank_url: str | None = None
    rerank_model: str | None = None
    rerank_api_key_env: str | None = None
    workers: int = 4

    def __post_init__(self):
        if self.k < 1 or self.n < 1:
            raise ValueError("n and k must be >= 1")
        if self.k > self.n:
            raise ValueError(f"k ({self.k}) must not exceed n ({self.n})")
        if self.max_subqueries < 1:
            raise ValueError("max_subqueries must be >= 1")
        if self.reranker not in RERANKERS:
            raise ValueError(f"reranker must be one of {RERANKERS}")


@dataclass
class Subquery:
    text: str
    origin: str = "model_generated"


@dataclass
class RankedPassage:
    chunk_id: str
    text: str
    metadata: dict
    retrieval_score: float
    rerank_score: float | None = None

    @property
    def doc_id(self) -> str | None:
        return self.metadata.get("doc_id")


@dataclass
class QuestionContext:
    """Deduplicated passages; passage ``i`` (1-based) is labelled "Source i"."""

    passages: list[RankedPassage] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.passages)

    @property
    def provenance(self) -> dict[int, str]:
        return {i: p.chunk_id for i, p in enumerate(self.passages, start=1)}

    def source(self, number: int) -> RankedPassage:
        if not 1 <= number <= len(self.passages):
            raise KeyError(number)
        return self.passages[number - 1]

    def labelled(self) -> list[str]:
        return [f"Source {i}: {p.text}" for i, p in enumerate(self.passages, start=1)]

    def render(self) -> str:
        return "\n\n".join(self.labelled())


# --------------------------------------------------------------------------- subqueries

_BULLET_RE = re.compile(r"^\s*(?:[-*•]+|\(?\d+[.):]|[Qq]\d+[.):])\s*")


def parse_subqueries(text: str, cap: int) -> list[str]:
    out = []
    for line in text.splitlines():
        line = _BULLET_RE.sub("", line).strip().strip('"').strip()
        if not line or line.endswith(":"):
            continue
        out.append(line)
    return out[:cap]


def generate_subqueries(patient_context, question, tool_outputs, model_provider, config: RetrievalConfig) -> list[Subquery]:
    if not question or not question.strip():
        raise ValueError("question must be non-empty")
    text = model_provider.complete(
        "subqueries",
        {
            "case_context": patient_context,
            "question": question,
            "tool_outputs": tool_outputs or "(none)",
            "max_subqueries": str(config.max_subqueries),
        },
    )
    lines = parse_subqueries(text, config.max_subqueries)
    if not lines:
        logger.warning("no parseable subqueries; falling back to the question")
        return [Subquery(question.strip(), origin="manual")]
    return [Subquery(line) for line in lines]


# --------------------------------------------------------------------------- retrieval


def retrieve_for_subquery(
    index: VectorIndex | Sequence[VectorIndex], subquery: Subquery | str, config: RetrievalConfig, embedder: Embedder
) -> list[RankedPassage]:
    """Top ``config.n`` passages across one or more indexes by exact cosine similarity."""
    indexes = [index] if isinstance(index, VectorIndex) else list(index)
    text = subquery.text if isinstance(subquery, Subquery) else subquery
    query = embed([text], embedder)[0]
    hits: list[tuple[float, str, VectorIndex]] = []
    for idx in indexes:
        if len(idx) == 0:
            continue
        hits.extend((score, cid, idx) for cid, score in idx.search(query, config.n))
    hits.sort(key=lambda h: (-h[0], h[1]))
    out = []
    for score, cid, idx in hits[: config.n]:
        chunk = idx.chunks[cid]
        out.append(RankedPassage(cid, chunk.text, dict(chunk.metadata), score))
    return out


class CosineReranker:
    name = "cosine"

    def score(self, query: str, passages: Sequence[RankedPassage]) -> list[float]:
        return [p.retrieval_score for p in passages]


class ExternalReranker:
    """HTTP rerank endpoint: ``{query, documents, top_n}`` -> ``{results: [{index, relevance_score}]}``."""

    name = "external"

    def __init__(self, url: str, model: str | None = None, api_key_env: str | None = None, transport: Transport | None = None):
        self.url = url
        self.model = model
        self.api_key_env = api_key_env
        self._transport = transport

    def score(self, query: str, passages: Sequence[RankedPassage]) -> list[float]:
        payload = {"query": query, "documents": [p.text for p in passages], "top_n": len(passages)}
        if self.model:
            payload["model"] = self.model
        transport = self._transport or default_transport()
        body = transport.post_json(self.url, payload, headers=bearer(self.api_key_env))
        scores: list[float | None] = [None] * len(passages)
        for item in body.get("results", []):
            i = int(item["index"])
            if 0 <= i < len(passages):
                scores[i] = float(item["relevance_score"])
        if any(s is None or not np.isfinite(s) for s in scores):
            raise ProviderError("rerank response does not score every passage")
        return scores


def make_reranker(config: RetrievalConfig, transport: Transport | None = None):
    if config.reranker == "external":
        if not config.rerank_url:
            raise ValueError("external reranker needs retrieval.rerank_url")
        return ExternalReranker(config.rerank_url, config.rerank_model, config.rerank_api_key_env, transport)
    return CosineReranker()


def rerank(passages: Sequence[RankedPassage], subquery: Subquery | str, reranker=None) -> list[RankedPassage]:
    """Reorder by descending rerank score (stable). External failures fall back to cosine order."""
    reranker = reranker or CosineReranker()
    text = subquery.text if isinstance(subquery, Subquery) else subquery
    if not passages:
        return []
    try:
        scores = reranker.score(text, passages)
    except Exception as exc:
        if isinstance(reranker, CosineReranker):
            raise
        logger.warning("reranker %s failed (%s); keeping cosine order", reranker.name, exc)
        scores = CosineReranker().score(text, passages)
    scored = [
        RankedPassage(p.chunk_id, p.text, p.metadata, p.retrieval_score, float(s)) for p, s in zip(passages, scores)
    ]
    order = sorted(range(len(scored)), key=lambda i: -scored[i].rerank_score)
    return [scored[i] for i in order]


def top_k(passages: Sequence[RankedPassage], k: int) -> list[RankedPassage]:
    if k < 1:
        raise ValueError("k must be >= 1")
    return list(passages[:k])


def normalize_passage(text: str) -> str:
    return " ".join(text.lower().split())


def merge_and_dedup(per_subquery_lists: Sequence[Sequence[RankedPassage]]) -> QuestionContext:
    seen: set[str] = set()
    kept = []
    for plist in per_subquery_lists:
        for p in plist:
            key = normalize_passage(p.text)
            if key in seen:
                continue
            seen.add(key)
            kept.append(p)
    return QuestionContext(kept)


def retrieve_context(
    indexes: VectorIndex | Sequence[VectorIndex],
    subqueries: Sequence[Subquery],
    config: RetrievalConfig,
    embedder: Embedder,
    reranker=None,
) -> tuple[QuestionContext, list[list[RankedPassage]]]:
    """Run retrieve_n -> rerank -> top_k per subquery (concurrently), then merge and deduplicate."""
    reranker = reranker or make_reranker(config)

    def one(sq: Subquery) -> list[RankedPassage]:
        passages = retrieve_for_subquery(indexes, sq, config, embedder)
        return top_k(rerank(passages, sq, reranker), config.k) if passages else []

    with ThreadPoolExecutor(max_workers=max(1, config.workers)) as pool:
        per_subquery = list(pool.map(one, subqueries))
    return merge_and_dedup(per_subquery), per_subquery
