"""Slow, obviously-correct reference implementations used as test oracles."""

from __future__ import annotations

import math


def brute_chunk_offsets(n: int, window: int, overlap: int) -> list[tuple[int, int]]:
    """Enumerate windows at multiples of the stride; keep one only while the previous one
    stopped short of the end of the document."""
    stride = window - overlap
    out: list[tuple[int, int]] = []
    s = 0
    while s < n:
        if out and out[-1][0] + out[-1][1] >= n:
            break
        out.append((s, min(window, n - s)))
        s += stride
    return out


def py_cosine(a, b) -> float:
    dot = sum(x * y for x, y in zip(a, b))
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(y * y for y in b))
    return dot / (na * nb)


def brute_search(items: list[tuple[str, list[float]]], query, top_n: int, pred=None):
    scored = [(cid, py_cosine(vec, query)) for cid, vec in items if pred is None or pred(cid)]
    scored.sort(key=lambda t: (-t[1], t[0]))
    return scored[:top_n]


def brute_pipeline(items, texts, metadata, query_vectors, n: int, k: int):
    """Per-subquery retrieve n -> identity rerank -> top k -> concatenate -> dedup by normalized text."""
    per = []
    for q in query_vectors:
        hits = brute_search(items, q, n)
        per.append([cid for cid, _ in hits[:k]])
    seen, merged = set(), []
    for lst in per:
        for cid in lst:
            key = " ".join(texts[cid].lower().split())
            if key not in seen:
                seen.add(key)
                merged.append(cid)
    return per, merged


def brute_majority(labels, hierarchy):
    """Walk the hierarchy from most adverse to least; first label reaching the top count wins."""
    best = max(sum(1 for x in labels if x == h) for h in hierarchy)
    for h in reversed(hierarchy):
        if sum(1 for x in labels if x == h) == best:
            return h
    raise AssertionError("unreachable")
