"""External service clients. Each remote adapter has a fixture-backed mock with the same interface."""

from __future__ import annotations

import base64
import json
import logging
import os
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from html.parser import HTMLParser
from pathlib import Path
from typing import Protocol

import numpy as np

from ..errors import ProviderError, ToolError
from ..transport import Transport, bearer, default_transport

logger = logging.getLogger(__name__)

DEFAULT_MOCKS = Path(__file__).resolve().parent.parent / "fixtures" / "mocks.json"


class SearchClient(Protocol):
    def search(self, query: str, num: int) -> list[dict]: ...


class PubMedClient(Protocol):
    def search(self, query: str, max_results: int) -> list[dict]: ...


class OncoKBClient(Protocol):
    def lookup(self, gene: str, alteration: str) -> dict | None: ...


class SegmentationClient(Protocol):
    def segment(self, image_path: Path, prompt: dict) -> tuple[np.ndarray, str]: ...


class HistologyClient(Protocol):
    def classify(self, feature_path: Path, target: str) -> dict: ...


def _key(*parts: str) -> str:
    return "|".join(" ".join(p.split()).upper() for p in parts)


# --------------------------------------------------------------------------- mocks


class MockSearchClient:
    def __init__(self, pages: dict[str, list[dict]]):
        self.pages = {" ".join(q.lower().split()): v for q, v in pages.items()}
        self.queries: list[str] = []

    def search(self, query: str, num: int) -> list[dict]:
        self.queries.append(query)
        return [dict(p) for p in self.pages.get(" ".join(query.lower().split()), [])][:num]


class MockPubMedClient:
    def __init__(self, results: dict[str, list[dict]]):
        self.results = {" ".join(q.lower().split()): v for q, v in results.items()}
        self.queries: list[str] = []

    def search(self, query: str, max_results: int) -> list[dict]:
        self.queries.append(query)
        return [dict(a) for a in self.results.get(" ".join(query.lower().split()), [])][:max_results]


class MockOncoKBClient:
    def __init__(self, records: dict[str, dict]):
        self.records = {}
        for k, v in records.items():
            gene, _, alt = k.partition("|")
            self.records[_key(gene, alt)] = v

    def lookup(self, gene: str, alteration: str) -> dict | None:
        rec = self.records.get(_key(gene, alteration))
        return dict(rec) if rec is not None else None


class MockSegmentationClient:
    """Maps an image file name to a stored ``.npy`` mask; the prompt is validated but not used."""

    def __init__(self, masks: dict[str, str], base_dir: Path):
        self.masks = masks
        self.base_dir = Path(base_dir)

    def segment(self, image_path: Path, prompt: dict) -> tuple[np.ndarray, str]:
        name = Path(image_path).name
        if name not in self.masks:
            raise ToolError(f"segmentation mock has no mask for {name}")
        mask_path = self.base_dir / self.masks[name]
        return np.load(mask_path, allow_pickle=False), self.masks[name]


class MockHistologyClient:
    def __init__(self, predictions: dict[str, dict[str, dict]]):
        self.predictions = predictions

    def classify(self, feature_path: Path, target: str) -> dict:
        stem = Path(feature_path).stem
        try:
            return dict(self.predictions[stem][target])
        except KeyError:
            raise ToolError(f"no histology prediction configured for {stem}/{target}") from None


# --------------------------------------------------------------------------- remote adapters


class _TextExtractor(HTMLParser):
    def __init__(self):
        super().__init__()
        self.parts: list[str] = []
        self._skip = 0

    def handle_starttag(self, tag, attrs):
        if tag in ("script", "style", "noscript"):
            self._skip += 1

    def handle_endtag(self, tag):
        if tag in ("script", "style", "noscript") and self._skip:
            self._skip -= 1

    def handle_data(self, data):
        if not self._skip:
            self.parts.append(data)


def html_to_text(html: str) -> str:
    parser = _TextExtractor()
    parser.feed(html)
    return " ".join(parser.parts)


class GoogleSearchClient:
    url = "https://www.googleapis.com/customsearch/v1"

    def __init__(self, api_key_env="GOOGLE_API_KEY", cx_env="GOOGLE_CSE_ID", transport: Transport | None = None, fetch_pages=True):
        self.api_key_env = api_key_env
        self.cx_env = cx_env
        self.transport = transport or default_transport()
        self.fetch_pages = fetch_pages

    def search(self, query: str, num: int) -> list[dict]:
        params = {"key": os.environ.get(self.api_key_env, ""), "cx": os.environ.get(self.cx_env, ""), "q": query, "num": min(num, 10)}
        body = self.transport.get_json(self.url, params=params)
        out = []
        for item in body.get("items", [])[:num]:
            text = item.get("snippet", "")
            if self.fetch_pages and item.get("link"):
                try:
                    text = html_to_text(self.transport.get_text(item["link"])) or text
                except ProviderError as exc:
                    logger.warning("could not fetch %s: %s", item["link"], exc)
            out.append({"title": item.get("title", ""), "url": item.get("link"), "text": text})
        return out


class EutilsPubMedClient:
    base = "https://eutils.ncbi.nlm.nih.gov/entrez/eutils"

    def __init__(self, api_key_env="NCBI_API_KEY", email: str | None = None, transport: Transport | None = None):
        self.api_key_env = api_key_env
        self.email = email
        self.transport = transport or default_transport()

    def _params(self, **kw):
        if os.environ.get(self.api_key_env):
            kw["api_key"] = os.environ[self.api_key_env]
        if self.email:
            kw["email"] = self.email
        return kw

    def search(self, query: str, max_results: int) -> list[dict]:
        found = self.transport.get_json(
            f"{self.base}/esearch.fcgi", params=self._params(db="pubmed", term=query, retmax=max_results, retmode="json")
        )
        ids = found.get("esearchresult", {}).get("idlist", [])
        if not ids:
            return []
        xml = self.transport.get_text(
            f"{self.base}/efetch.fcgi", params=self._params(db="pubmed", id=",".join(ids), retmode="xml")
        )
        return parse_pubmed_xml(xml)


def parse_pubmed_xml(xml: str) -> list[dict]:
    try:
        root = ET.fromstring(xml)
    except ET.ParseError as exc:
        raise ProviderError(f"malformed PubMed XML: {exc}") from None
    out = []
    for art in root.iter("PubmedArticle"):
        pmid = art.findtext(".//PMID", default="").strip()
        title = "".join(art.find(".//ArticleTitle").itertext()).strip() if art.find(".//ArticleTitle") is not None else ""
        parts = []
        for ab in art.iter("AbstractText"):
            label = ab.get("Label")
            body = "".join(ab.itertext()).strip()
            parts.append(f"{label}: {body}" if label else body)
        if pmid and parts:
            out.append({"pmid": pmid, "title": title, "abstract": " ".join(parts)})
    return out


class HTTPOncoKBClient:
    base = "https://www.oncokb.org/api/v1"

    def __init__(self, api_key_env="ONCOKB_API_KEY", transport: Transport | None = None):
        self.api_key_env = api_key_env
        self.transport = transport or default_transport()

    def lookup(self, gene: str, alteration: str) -> dict | None:
        parts = alteration.split()
        if len(parts) == 2 and parts[1].lower() == "fusion":
            body = self.transport.get_json(
                f"{self.base}/annotate/structuralVariants",
                params={"hugoSymbolA": gene, "hugoSymbolB": parts[0], "structuralVariantType": "FUSION", "isFunctionalFusion": "true"},
                headers=bearer(self.api_key_env),
            )
        else:
            body = self.transport.get_json(
                f"{self.base}/annotate/mutations/byProteinChange",
                params={"hugoSymbol": gene, "alteration": alteration},
                headers=bearer(self.api_key_env),
            )
        if not body.get("geneExist", True) or body.get("oncogenic") in (None, "Unknown") and not body.get("treatments"):
            return None
        therapies = sorted({" + ".join(d["drugName"] for d in t.get("drugs", [])) for t in body.get("treatments", [])})
        return {
            "oncogenicity": body.get("oncogenic"),
            "evidence_level": body.get("highestSensitiveLevel"),
            "therapies": therapies,
        }


class HTTPSegmentationClient:
    """POST ``{image: base64, prompt}`` -> ``{mask: [[...]]}``."""

    def __init__(self, url: str, api_key_env: str | None = None, transport: Transport | None = None):
        self.url = url
        self.api_key_env = api_key_env
        self.transport = transport or default_transport()

    def segment(self, image_path: Path, prompt: dict) -> tuple[np.ndarray, str]:
        payload = {"image": base64.b64encode(Path(image_path).read_bytes()).decode("ascii"), "prompt": prompt}
        body = self.transport.post_json(self.url, payload, headers=bearer(self.api_key_env))
        return np.asarray(body["mask"], dtype=np.float64), body.get("mask_ref", f"{Path(image_path).stem}_mask")


class HTTPHistologyClient:
    """POST ``{features: path, target}`` -> ``{label, score}``; the server reads the precomputed features."""

    def __init__(self, url: str, api_key_env: str | None = None, transport: Transport | None = None):
        self.url = url
        self.api_key_env = api_key_env
        self.transport = transport or default_transport()

    def classify(self, feature_path: Path, target: str) -> dict:
        return self.transport.post_json(
            self.url, {"features": str(feature_path), "target": target}, headers=bearer(self.api_key_env)
        )


# --------------------------------------------------------------------------- bundles


@dataclass
class Clients:
    search: SearchClient
    pubmed: PubMedClient
    oncokb: OncoKBClient
    segmentation: SegmentationClient
    histology: HistologyClient

    @classmethod
    def mock(cls, bundle=None) -> "Clients":
        path = Path(bundle) if bundle else DEFAULT_MOCKS
        data = json.loads(path.read_text(encoding="utf-8"))
        return cls(
            search=MockSearchClient(data.get("web_search", {})),
            pubmed=MockPubMedClient(data.get("pubmed", {})),
            oncokb=MockOncoKBClient(data.get("oncokb", {})),
            segmentation=MockSegmentationClient(data.get("segmentation", {}), path.parent),
            histology=MockHistologyClient(data.get("histology", {})),
        )

    @classmethod
    def remote(cls, settings: dict, transport: Transport | None = None) -> "Clients":
        return cls(
            search=GoogleSearchClient(
                settings.get("google_api_key_env", "GOOGLE_API_KEY"), settings.get("google_cx_env", "GOOGLE_CSE_ID"), transport
            ),
            pubmed=EutilsPubMedClient(settings.get("ncbi_api_key_env", "NCBI_API_KEY"), settings.get("ncbi_email"), transport),
            oncokb=HTTPOncoKBClient(settings.get("oncokb_api_key_env", "ONCOKB_API_KEY"), transport),
            segmentation=HTTPSegmentationClient(settings.get("segmentation_url", "http://localhost:8001/segment"), None, transport),
            histology=HTTPHistologyClient(settings.get("histology_url", "http://localhost:8002/classify"), None, transport),
        )
