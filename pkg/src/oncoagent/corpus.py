"""Document ingestion: TEI-lite parsing, cleaning, structural normalization and jsonlines archiving.

Curated documents carry their structure inline: a heading at level ``L`` is a line of
``L`` hash characters, a space and the heading text, and every block is separated
from the next by exactly one blank line.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import xml.etree.ElementTree as ET
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

from ._io import atomic_write_text
from .errors import CorpusError, CorpusFormatError, EmptyDocumentError, TEIParseError

logger = logging.getLogger(__name__)

SOURCES = ("mdcalc", "uptodate", "meditron", "asco", "esmo", "onkopedia", "custom")

TEI_NS = "http://www.tei-c.org/ns/1.0"

_URL_RE = re.compile(r"(?:\b[A-Za-z][A-Za-z0-9+.\-]*://|\bwww\.)\S*[^\s.,;:!?)\]}\"']", re.IGNORECASE)
_IPV4_RE = re.compile(r"(?:\d{1,3}\.){3}\d{1,3}")
_WS_RE = re.compile(r"\s+")
_HEADING_RE = re.compile(r"^(#+)(?: (.*))?$")


@dataclass
class Section:
    level: int
    heading: str
    paragraphs: list[str] = field(default_factory=list)


@dataclass
class SourceDocument:
    id: str
    title: str
    source: str = "custom"
    authors: list[str] = field(default_factory=list)
    published: str | None = None
    url: str | None = None
    sections: list[Section] = field(default_factory=list)

    def __post_init__(self):
        if not self.id:
            raise CorpusError("document id must be non-empty")
        if self.source not in SOURCES:
            raise CorpusError(f"unknown source {self.source!r}; expected one of {SOURCES}")
        for sec in self.sections:
            if sec.level < 1:
                raise CorpusError(f"heading level must be >= 1, got {sec.level}")
            sec.paragraphs = [p.strip() for p in sec.paragraphs]


@dataclass
class CuratedDocument:
    id: str
    metadata: dict
    text: str

    @property
    def title(self) -> str:
        return self.metadata.get("title") or ""

    def to_json(self) -> dict:
        return {"id": self.id, "metadata": self.metadata, "text": self.text}


# --------------------------------------------------------------------------- cleaning


def _strip_nonprintable(text: str) -> str:
    return "".join(ch for ch in text if ch.isprintable() or ch.isspace())


def _collapse(m: re.Match) -> str:
    n = m.group().count("\n")
    return "\n\n" if n >= 2 else "\n" if n else " "


def clean_text(raw: str) -> str:
    """Remove URLs, IPv4-shaped substrings and non-printable characters; collapse whitespace.

    A whitespace run becomes one space, or one newline / one blank line if it spans
    line breaks, so curated multi-line text is a fixed point. Removal repeats until
    nothing changes, which makes the function idempotent.
    """
    text = _strip_nonprintable(raw.replace("\r\n", "\n").replace("\r", "\n"))
    while True:
        stripped = _IPV4_RE.sub(" ", _URL_RE.sub(" ", text))
        if stripped == text:
            break
        text = stripped
    return _WS_RE.sub(_collapse, text).strip()


def _one_line(text: str) -> str:
    return " ".join(clean_text(text).split())


# --------------------------------------------------------------------------- TEI


def _local(tag) -> str:
    if not isinstance(tag, str):
        return ""
    return tag.rsplit("}", 1)[-1]


def _children(elem, name):
    return [c for c in elem if _local(c.tag) == name]


def _find(elem, *path):
    cur = [elem]
    for name in path:
        nxt = []
        for e in cur:
            nxt.extend(e.iter() if name == "**" else _children(e, name))
        cur = nxt
    return cur


def _text_of(elem) -> str:
    return _WS_RE.sub(" ", "".join(elem.itertext())).strip()


def _byte_offset(text: str, line: int, column: int) -> int:
    lines = text.splitlines(keepends=True)
    prefix = "".join(lines[: max(line - 1, 0)])
    tail = lines[line - 1][:column] if 0 < line <= len(lines) else ""
    return len((prefix + tail).encode("utf-8"))


def _head_level(head, depth: int) -> int:
    # GROBID emits flat divs whose head carries dotted numbering ("2.1.")
    if depth == 1 and head is not None:
        n = (head.get("n") or "").strip().rstrip(".")
        if re.fullmatch(r"\d+(?:\.\d+)*", n):
            return n.count(".") + 1
    return depth


def _walk_divs(div, depth: int, out: list[Section]) -> None:
    heads = _children(div, "head")
    head = heads[0] if heads else None
    paragraphs = [t for t in (_text_of(p) for p in _children(div, "p")) if t]
    heading = _text_of(head) if head is not None else ""
    if heading or paragraphs:
        out.append(Section(_head_level(head, depth), heading, paragraphs))
    for child in _children(div, "div"):
        _walk_divs(child, depth + 1, out)


def parse_tei(xml_text: str | bytes, doc_id: str | None = None, source: str = "custom") -> SourceDocument:
    """Parse a TEI document into a :class:`SourceDocument`.

    Only header metadata and body ``div``/``head``/``p`` elements are interpreted;
    figures, tables, formulas and the back matter are dropped.
    """
    if isinstance(xml_text, bytes):
        xml_text = xml_text.decode("utf-8")
    try:
        root = ET.fromstring(xml_text)
    except ET.ParseError as exc:
        line, col = exc.position
        raise TEIParseError(f"malformed XML: {exc}", _byte_offset(xml_text, line, col)) from None

    headers = _find(root, "teiHeader")
    header = headers[0] if headers else None
    title = ""
    authors: list[str] = []
    published = None
    url = None
    if header is not None:
        titles = _find(header, "fileDesc", "titleStmt", "title")
        if titles:
            title = _text_of(titles[0])
        for pers in _find(header, "fileDesc", "sourceDesc", "**"):
            if _local(pers.tag) != "persName":
                continue
            parts = [_text_of(c) for c in pers if _local(c.tag) in ("forename", "surname")]
            name = " ".join(p for p in parts if p) or _text_of(pers)
            if name and name not in authors:
                authors.append(name)
        for date in header.iter():
            if _local(date.tag) == "date" and (date.get("when") or _text_of(date)):
                published = date.get("when") or _text_of(date)
                break
        for elem in header.iter():
            tag = _local(elem.tag)
            if tag == "ptr" and elem.get("target"):
                url = elem.get("target")
                break
            if tag == "idno" and (elem.get("type") or "").lower() == "url":
                url = _text_of(elem)
                break

    bodies = [e for e in root.iter() if _local(e.tag) == "body"]
    if not bodies:
        raise EmptyDocumentError("TEI document has no <body>")
    sections: list[Section] = []
    body = bodies[0]
    loose = [t for t in (_text_of(p) for p in _children(body, "p")) if t]
    if loose:
        sections.append(Section(1, title, loose))
    for div in _children(body, "div"):
        _walk_divs(div, 1, sections)

    if doc_id is None:
        doc_id = root.get("{http://www.w3.org/XML/1998/namespace}id") or (
            "tei-" + hashlib.sha1(xml_text.encode("utf-8")).hexdigest()[:12]
        )
    return SourceDocument(
        id=doc_id, title=title, source=source, authors=authors, published=published, url=url, sections=sections
    )


# --------------------------------------------------------------------------- markdown / plain text


def parse_sections(text: str) -> list[Section]:
    """Rebuild the section tree from hash-prefixed heading lines and blank-line separated paragraphs."""
    sections: list[Section] = []
    for block in (b for b in text.split("\n\n")):
        block = block.strip("\n")
        if not block:
            continue
        m = _HEADING_RE.match(block) if "\n" not in block else None
        if m:
            sections.append(Section(len(m.group(1)), m.group(2) or ""))
        elif sections:
            sections[-1].paragraphs.append(block)
        else:
            sections.append(Section(1, "", [block]))
    return sections


def parse_text(text: str, doc_id: str, title: str | None = None, source: str = "custom", **meta) -> SourceDocument:
    """Parse plain text or markdown; ``#`` heading lines open sections, blank lines split paragraphs."""
    sections: list[Section] = []
    para: list[str] = []

    def flush():
        if para:
            joined = " ".join(para).strip()
            if joined:
                if not sections:
                    sections.append(Section(1, title or ""))
                sections[-1].paragraphs.append(joined)
            para.clear()

    for line in text.splitlines():
        m = re.match(r"^\s{0,3}(#{1,6})\s+(.*?)\s*#*\s*$", line)
        if m:
            flush()
            sections.append(Section(len(m.group(1)), m.group(2).strip()))
        elif not line.strip():
            flush()
        else:
            para.append(line.strip())
    flush()
    if title is None:
        title = next((s.heading for s in sections if s.heading), doc_id)
    return SourceDocument(id=doc_id, title=title, source=source, sections=sections, **meta)


# --------------------------------------------------------------------------- normalization


def normalize_structure(doc: SourceDocument) -> CuratedDocument:
    blocks: list[str] = []
    for sec in doc.sections:
        heading = _one_line(sec.heading)
        blocks.append("#" * sec.level + (" " + heading if heading else ""))
        for p in sec.paragraphs:
            cleaned = _one_line(p).lstrip("#").strip()
            if cleaned:
                blocks.append(cleaned)
    metadata = {
        "source": doc.source,
        "title": _one_line(doc.title),
        "authors": list(doc.authors),
        "published": doc.published,
        "url": doc.url,
    }
    return CuratedDocument(id=doc.id, metadata=metadata, text="\n\n".join(blocks))


def keyword_filter(docs: Iterable[CuratedDocument], keywords: list[str]) -> list[CuratedDocument]:
    """Keep documents whose title or text contains at least one keyword, case-insensitively."""
    needles = [k.casefold() for k in keywords if k and k.strip()]
    if not needles:
        raise ValueError("keyword list must contain at least one non-empty keyword")
    kept = []
    for doc in docs:
        hay = (doc.title + "\n" + doc.text).casefold()
        if any(n in hay for n in needles):
            kept.append(doc)
    return kept


# --------------------------------------------------------------------------- jsonlines


def archive_jsonl(docs: Iterable[CuratedDocument], path) -> int:
    lines = [json.dumps(d.to_json(), ensure_ascii=False) for d in docs]
    atomic_write_text(path, "".join(line + "\n" for line in lines))
    return len(lines)


def load_jsonl(path) -> list[CuratedDocument]:
    docs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(f"invalid JSON: {exc.msg}", lineno) from None
            if not isinstance(obj, dict) or not {"id", "metadata", "text"} <= obj.keys():
                raise CorpusFormatError("expected an object with id, metadata and text", lineno)
            docs.append(CuratedDocument(obj["id"], obj["metadata"], obj["text"]))
    return docs


def read_meditron_jsonl(path, source: str = "meditron") -> list[SourceDocument]:
    """Read preprocessed guideline jsonlines (``id``, ``title``, ``clean_text``/``text``, ``url``)."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(f"invalid JSON: {exc.msg}", lineno) from None
            body = obj.get("clean_text") or obj.get("text") or obj.get("raw_text") or ""
            doc_id = str(obj.get("id") or f"{Path(path).stem}-{lineno}")
            src = obj.get("source") if obj.get("source") in SOURCES else source
            out.append(parse_text(body, doc_id, title=obj.get("title"), source=src, url=obj.get("url")))
    return out


def ingest_directory(in_dir, fmt: str, source: str = "custom") -> list[CuratedDocument]:
    """Ingest every file of one format under ``in_dir`` (sorted by path) into curated documents."""
    in_dir = Path(in_dir)
    patterns = {"tei": ("*.xml", "*.tei"), "jsonl": ("*.jsonl",), "text": ("*.txt", "*.md")}
    if fmt not in patterns:
        raise ValueError(f"unknown format {fmt!r}")
    files = sorted({p for pat in patterns[fmt] for p in in_dir.rglob(pat)})
    docs: list[SourceDocument] = []
    for path in files:
        rel = path.relative_to(in_dir).with_suffix("").as_posix().replace("/", "__")
        if fmt == "tei":
            try:
                docs.append(parse_tei(path.read_bytes(), doc_id=rel, source=source))
            except EmptyDocumentError:
                logger.warning("skipping %s: no body", path)
        elif fmt == "jsonl":
            docs.extend(read_meditron_jsonl(path, source="meditron" if source == "custom" else source))
        else:
            docs.append(parse_text(path.read_text(encoding="utf-8"), rel, source=source))
    seen = set()
    curated = []
    for doc in docs:
        if doc.id in seen:
            raise CorpusError(f"duplicate document id {doc.id!r}")
        seen.add(doc.id)
        curated.append(normalize_structure(doc))
    return curated


def source_to_dict(doc: SourceDocument) -> dict:
    return asdict(doc)
