"""Built-in tools and the factory wiring them into a :class:`Registry`."""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Sequence

import numpy as np

from ..corpus import CuratedDocument, clean_text
from ..errors import ProviderError, ToolError, ToolRefused
from ..index import DEFAULT_OVERLAP, DEFAULT_WINDOWS, Embedder, VectorIndex, build_index
from .clients import Clients
from .registry import Registry, Tool, ToolSpec

logger = logging.getLogger(__name__)

DEFAULT_REFUSAL_MARKERS = (
    r"\bI(?:'m| am) sorry\b",
    r"\bI can(?:not|'t) (?:assist|help|provide|analy[sz]e|interpret)",
    r"\b(?:unable|not able) to (?:assist|help|provide|analy[sz]e|interpret)",
)


class RefusalDetector:
    def __init__(self, markers: Sequence[str] = DEFAULT_REFUSAL_MARKERS):
        self.patterns = [re.compile(m, re.IGNORECASE) for m in markers]

    def __call__(self, text: str) -> bool:
        return any(p.search(text) for p in self.patterns)


class AttachmentResolver:
    """Resolve tool arguments to files: by attachment label, by ref relative to the case, or by path."""

    def __init__(self, base_dir=".", attachments: Sequence[dict] = ()):
        self.base_dir = Path(base_dir)
        self.by_label = {a["label"]: a["ref"] for a in attachments if a.get("label")}

    def __call__(self, ref: str) -> Path:
        if not isinstance(ref, str) or not ref.strip():
            raise ToolError(f"invalid file reference {ref!r}")
        ref = self.by_label.get(ref, ref)
        path = Path(ref)
        if not path.is_absolute():
            path = self.base_dir / path
        if not path.is_file():
            raise ToolError(f"cannot resolve {ref!r}: no such file")
        return path


# --------------------------------------------------------------------------- operations

_OPS = {"add": lambda a, b: a + b, "sub": lambda a, b: a - b, "mul": lambda a, b: a * b}


def calculator(op: str, a: float, b: float) -> float:
    try:
        a, b = float(a), float(b)
    except (TypeError, ValueError):
        raise ToolError(f"calculator operands must be numbers, got {a!r}, {b!r}") from None
    if op == "div":
        if b == 0:
            raise ToolError("division by zero")
        return a / b
    if op not in _OPS:
        raise ToolError(f"unknown operation {op!r}; expected add, sub, mul or div")
    return _OPS[op](a, b)


def web_search(query: str, *, client, max_results: int = 5) -> list[dict]:
    results = []
    for r in client.search(query, max_results)[:max_results]:
        results.append({"title": r.get("title", ""), "url": r.get("url"), "extracted_text": clean_text(r.get("text", ""))})
    return results


@dataclass
class PubMedResult:
    query: str
    abstracts: list[dict]
    index: VectorIndex = field(repr=False)


def pubmed_search(
    query: str,
    *,
    client,
    embedder: Embedder,
    windows: Sequence[int] = DEFAULT_WINDOWS,
    overlap: int = DEFAULT_OVERLAP,
    max_results: int = 10,
) -> PubMedResult:
    """Fetch abstracts and index them in a fresh per-case index, separate from the main corpus."""
    abstracts = client.search(query, max_results)
    docs = []
    for a in abstracts:
        text = clean_text(" ".join(filter(None, [a.get("title"), a.get("abstract")])))
        if text:
            meta = {"source": "pubmed", "title": a.get("title", ""), "authors": a.get("authors", []),
                    "published": a.get("published"), "url": f"https://pubmed.ncbi.nlm.nih.gov/{a['pmid']}/"}
            docs.append(CuratedDocument(f"pubmed:{a['pmid']}", meta, text))
    index = build_index(docs, embedder, windows, overlap) if docs else VectorIndex(embedder.dimension, embedder.name)
    return PubMedResult(query, abstracts, index)


def oncokb_lookup(gene: str, alteration: str, *, client) -> dict:
    if not gene or not gene.strip():
        raise ToolError("gene must be non-empty")
    gene, alteration = gene.strip(), " ".join(str(alteration).split())
    rec = client.lookup(gene, alteration)
    if rec is None:
        return {"gene": gene, "alteration": alteration, "status": "not found",
                "oncogenicity": "Unknown", "evidence_level": None, "therapies": []}
    return {
        "gene": gene,
        "alteration": alteration,
        "status": "found",
        "oncogenicity": rec.get("oncogenicity", "Unknown"),
        "evidence_level": rec.get("evidence_level"),
        "therapies": list(rec.get("therapies", [])),
    }


def vision_report(
    image_refs: Sequence[str],
    prompt: str,
    *,
    provider,
    resolver: AttachmentResolver,
    is_refusal=RefusalDetector(),
    framing: str = "",
) -> str:
    """Report each image separately, then (for several images) add a comparison section."""
    if isinstance(image_refs, str):
        image_refs = [image_refs]
    if not image_refs:
        raise ToolError("vision_report needs at least one image")
    paths = [resolver(r) for r in image_refs]

    def ask(template, variables, images):
        text = provider.complete(template, {"framing": framing, "prompt": prompt or "", **variables}, images=images)
        if is_refusal(text):
            raise ToolRefused(f"vision model refused: {text.strip()[:120]}")
        return text.strip()

    reports = [ask("vision_report", {"image_ref": ref}, [p]) for ref, p in zip(image_refs, paths)]
    if len(reports) == 1:
        return reports[0]
    sections = [f"## Image {i} ({ref})\n\n{rep}" for i, (ref, rep) in enumerate(zip(image_refs, reports), start=1)]
    comparison = ask("vision_compare", {"reports": "\n\n".join(sections)}, paths)
    return "\n\n".join(sections + [f"## Comparison\n\n{comparison}"])


def _check_prompt(prompt) -> dict:
    if isinstance(prompt, (list, tuple)):
        prompt = {"point": list(prompt)} if len(prompt) == 2 else {"box": list(prompt)}
    if not isinstance(prompt, dict):
        raise ToolError(f"segmentation prompt must be a point or box, got {prompt!r}")
    if "point" in prompt:
        pt = prompt["point"]
        if len(pt) != 2 or not all(isinstance(v, (int, float)) for v in pt):
            raise ToolError(f"invalid point prompt {pt!r}")
        return {"point": [float(v) for v in pt]}
    if "box" in prompt:
        box = prompt["box"]
        if len(box) != 4 or not all(isinstance(v, (int, float)) for v in box) or box[0] >= box[2] or box[1] >= box[3]:
            raise ToolError(f"invalid box prompt {box!r}; expected [x0, y0, x1, y1] with x0 < x1, y0 < y1")
        return {"box": [float(v) for v in box]}
    raise ToolError("segmentation prompt needs a 'point' or 'box'")


def mask_area(mask) -> float:
    """Mask-positive pixel count; fractional (partial-coverage) pixels contribute their coverage."""
    m = np.asarray(mask, dtype=np.float64)
    return float(np.clip(m[m > 0], 0.0, 1.0).sum())


def segment_area(image_ref: str, prompt, *, client, resolver: AttachmentResolver) -> dict:
    path = resolver(image_ref)
    prompt = _check_prompt(prompt)
    try:
        mask, mask_ref = client.segment(path, prompt)
    except ProviderError as exc:
        raise ToolError(f"segmentation failed: {exc}") from exc
    return {"image_ref": image_ref, "mask_ref": mask_ref, "area_pixels": mask_area(mask)}


HISTO_TARGETS = ("MSI", "KRAS", "BRAF")


def histo_classify(feature_ref: str, target: str, *, client, resolver: AttachmentResolver) -> dict:
    target = str(target).upper()
    if target not in HISTO_TARGETS:
        raise ToolError(f"target must be one of {HISTO_TARGETS}, got {target!r}")
    path = resolver(feature_ref)
    pred = client.classify(path, target)
    label, score = pred.get("label"), float(pred.get("score", math.nan))
    if label not in ("positive", "negative") or not 0.0 <= score <= 1.0:
        raise ToolError(f"invalid classifier output {pred!r}")
    return {"target": target, "label": label, "score": score}


# --------------------------------------------------------------------------- registry


def _fmt(x: float) -> str:
    return f"{x:g}"


def _summarize_search(out) -> str:
    if not out["results"]:
        return f"Web search for '{out['query']}' returned no results."
    lines = [f"Web search for '{out['query']}':"]
    lines += [f"- {r['title']}: {r['extracted_text'][:400]}" for r in out["results"]]
    return "\n".join(lines)


def _summarize_oncokb(out) -> str:
    if out["status"] != "found":
        return f"OncoKB: {out['gene']} {out['alteration']} not found."
    therapies = ", ".join(out["therapies"]) or "none listed"
    return (f"OncoKB: {out['gene']} {out['alteration']} is {out['oncogenicity']} "
            f"(highest level {out['evidence_level']}); therapies: {therapies}.")


def build_registry(
    clients: Clients,
    *,
    vision_provider,
    embedder: Embedder,
    resolver: AttachmentResolver | None = None,
    is_refusal: RefusalDetector | None = None,
    framing: str = "",
    windows: Sequence[int] = DEFAULT_WINDOWS,
    overlap: int = DEFAULT_OVERLAP,
    web_max_results: int = 5,
    pubmed_max_results: int = 10,
) -> Registry:
    resolver = resolver or AttachmentResolver()
    is_refusal = is_refusal or RefusalDetector()
    num = {"type": "number", "required": True}
    tools = [
        Tool(
            ToolSpec("calculator", "Elementary arithmetic on two numbers: add, sub, mul or div (a / b).", {
                "op": {"type": "string", "enum": ["add", "sub", "mul", "div"], "description": "operation", "required": True},
                "a": {**num, "description": "first operand"},
                "b": {**num, "description": "second operand"},
            }),
            calculator,
            summarize=lambda o: f"{o['op']}({_fmt(o['a'])}, {_fmt(o['b'])}) = {o['result']:.2f}",
            to_output=lambda r, args: {"op": args["op"], "a": float(args["a"]), "b": float(args["b"]), "result": r},
        ),
        Tool(
            ToolSpec("web_search", "Search the web (Google) and return the cleaned text of the top pages.", {
                "query": {"type": "string", "description": "search query", "required": True},
            }),
            partial(web_search, client=clients.search, max_results=web_max_results),
            summarize=_summarize_search,
            to_output=lambda r, args: {"query": args["query"], "results": r},
        ),
        Tool(
            ToolSpec("pubmed_search", "Search PubMed; abstracts are indexed for retrieval in a separate per-case database.", {
                "query": {"type": "string", "description": "PubMed query", "required": True},
            }),
            partial(pubmed_search, client=clients.pubmed, embedder=embedder, windows=windows, overlap=overlap,
                    max_results=pubmed_max_results),
            summarize=lambda o: f"PubMed search for '{o['query']}' retrieved {len(o['abstracts'])} abstract(s): "
            + ("; ".join(a["title"] for a in o["abstracts"]) or "none") + ".",
            to_output=lambda r, args: {
                "query": r.query,
                "abstracts": [{"pmid": a["pmid"], "title": a.get("title", "")} for a in r.abstracts],
                "chunks": len(r.index),
            },
        ),
        Tool(
            ToolSpec("oncokb_lookup", "Look up oncogenicity, evidence level and therapies for a gene alteration in OncoKB.", {
                "gene": {"type": "string", "description": "HUGO gene symbol, e.g. BRAF", "required": True},
                "alteration": {"type": "string", "description": "alteration, e.g. V600E or 'ROS1 fusion'", "required": True},
            }),
            partial(oncokb_lookup, client=clients.oncokb),
            summarize=_summarize_oncokb,
        ),
        Tool(
            ToolSpec("vision_report", "Structured radiology report for one or more images; several images are also compared.", {
                "image_refs": {"type": "array", "items": {"type": "string"}, "description": "image files or labels", "required": True},
                "prompt": {"type": "string", "description": "what to focus on", "required": True},
            }),
            partial(vision_report, provider=vision_provider, resolver=resolver, is_refusal=is_refusal, framing=framing),
            summarize=lambda o: o["report"],
            to_output=lambda r, args: {"report": r, "images": list(args["image_refs"]) if not isinstance(args["image_refs"], str) else [args["image_refs"]]},
        ),
        Tool(
            ToolSpec("segment_area", "Segment a lesion (MedSAM) from a point or box prompt and measure its area in pixels.", {
                "image_ref": {"type": "string", "description": "image file or label", "required": True},
                "prompt": {"type": "object", "description": "{'point': [x, y]} or {'box': [x0, y0, x1, y1]}", "required": True},
            }),
            partial(segment_area, client=clients.segmentation, resolver=resolver),
            summarize=lambda o: f"Segmented area in {o['image_ref']}: {o['area_pixels']:.1f} pixels (mask {o['mask_ref']}).",
        ),
        Tool(
            ToolSpec("histo_classify", "Predict MSI status or KRAS/BRAF mutation from precomputed histology feature vectors.", {
                "feature_ref": {"type": "string", "description": "path of the precomputed feature file", "required": True},
                "target": {"type": "string", "enum": list(HISTO_TARGETS), "description": "prediction target", "required": True},
            }),
            partial(histo_classify, client=clients.histology, resolver=resolver),
            summarize=lambda o: f"Histology classifier {o['target']}: {o['label']} (score {o['score']:.2f}).",
        ),
    ]
    return Registry(tools)
