"""Chat-completion providers behind one contract: (template id, variables) -> text.

Every call is rendered from a versioned template in ``prompts.toml`` and recorded in
a :class:`CallLog` with model, temperature and response, so runs can be audited and
replayed. Text and vision share the interface; they differ only in model name.
"""

from __future__ import annotations

import base64
import contextvars
import copy
import hashlib
import json
import logging
import mimetypes
import re
import string
import sys
import threading
from contextlib import contextmanager
from datetime import datetime, timezone
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Sequence

from .errors import ProviderError
from .transport import Transport, bearer, default_transport

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

logger = logging.getLogger(__name__)

DEFAULT_TEMPERATURE = 0.1
DEFAULT_CHAT_MODEL = "gpt-4-0125-preview"
DEFAULT_VISION_MODEL = "gpt-4-vision-preview"


@lru_cache(maxsize=None)
def load_templates() -> dict[str, dict]:
    raw = resources.files("oncoagent").joinpath("prompts.toml").read_text(encoding="utf-8")
    return tomllib.loads(raw)


def render(template_id: str, variables: Mapping[str, Any]) -> str:
    templates = load_templates()
    if template_id not in templates:
        raise ProviderError(f"unknown template {template_id!r}")
    text = templates[template_id]["text"]
    values = {k: v if isinstance(v, str) else json.dumps(v, ensure_ascii=False, indent=1) for k, v in variables.items()}
    try:
        return string.Template(text).substitute(values).strip()
    except KeyError as exc:
        raise ProviderError(f"template {template_id!r} is missing variable {exc}") from None


# --------------------------------------------------------------------------- call logging

_scope: contextvars.ContextVar[dict] = contextvars.ContextVar("provider_scope", default={})
_bucket: contextvars.ContextVar[list | None] = contextvars.ContextVar("provider_bucket", default=None)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="milliseconds")


@contextmanager
def provider_scope(**labels):
    """Label provider calls made inside the block (e.g. ``stage="tools", call_id="A"``)."""
    token = _scope.set({**_scope.get(), **labels})
    try:
        yield
    finally:
        _scope.reset(token)


@contextmanager
def deferred_log():
    """Collect log entries made in this thread; the caller flushes them in a deterministic order."""
    pending: list = []
    token = _bucket.set(pending)
    try:
        yield pending
    finally:
        _bucket.reset(token)


def flush_deferred(pending: list) -> None:
    for log, entry in pending:
        log._append(entry)


class CallLog:
    def __init__(self):
        self.entries: list[dict] = []
        self._lock = threading.Lock()

    def record(self, entry: dict) -> None:
        entry = {**_scope.get(), **entry}
        pending = _bucket.get()
        if pending is not None:
            pending.append((self, entry))
        else:
            self._append(entry)

    def _append(self, entry: dict) -> None:
        with self._lock:
            self.entries.append(entry)

    def count(self, template_id: str) -> int:
        return sum(1 for e in self.entries if e["template_id"] == template_id)


# --------------------------------------------------------------------------- providers


class ChatProvider:
    """Base class; subclasses implement :meth:`_generate`."""

    model = DEFAULT_CHAT_MODEL

    def __init__(self, model: str | None = None, temperature: float = DEFAULT_TEMPERATURE, log: CallLog | None = None):
        if model:
            self.model = model
        if not 0.0 <= temperature <= 2.0:
            raise ValueError("temperature must be within [0, 2]")
        self.temperature = temperature
        self.log = log if log is not None else CallLog()

    def complete(
        self,
        template_id: str,
        variables: Mapping[str, Any],
        *,
        temperature: float | None = None,
        images: Sequence[str | Path] = (),
    ) -> str:
        temp = self.temperature if temperature is None else temperature
        prompt = render(template_id, variables)
        entry = {
            "template_id": template_id,
            "template_version": load_templates()[template_id].get("version"),
            "model": self.model,
            "temperature": temp,
            "images": [str(Path(i).name) for i in images],
            "prompt_sha256": hashlib.sha256(prompt.encode("utf-8")).hexdigest(),
        }
        try:
            text = self._generate(template_id, dict(variables), prompt, temp, list(images))
        except ProviderError as exc:
            self.log.record({**entry, "error": str(exc), "timestamp": _now()})
            raise
        self.log.record({**entry, "response": text, "timestamp": _now()})
        return text

    def _generate(self, template_id, variables, prompt, temperature, images) -> str:
        raise NotImplementedError


class ScriptedProvider(ChatProvider):
    """Deterministic provider answering from a script keyed by template id.

    A script value may be
      - a string: returned on every call;
      - a list: consumed in order, the last element repeating;
      - ``{"key": var, "responses": {value: text}, "default": text}``: chosen by the
        value of template variable ``var`` (safe under concurrent tool execution);
      - ``{"raise": message}``: the call fails with :class:`ProviderError`.
    """

    def __init__(self, script: Mapping[str, Any], model: str | None = None, **kw):
        super().__init__(model=model, **kw)
        self.script = copy.deepcopy(dict(script))
        self._cursor: dict[str, int] = {}
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path, **kw) -> "ScriptedProvider":
        return cls(json.loads(Path(path).read_text(encoding="utf-8")), **kw)

    def _generate(self, template_id, variables, prompt, temperature, images) -> str:
        if template_id not in self.script:
            raise ProviderError(f"no scripted response for template {template_id!r}")
        return self._resolve(template_id, self.script[template_id], variables)

    def _resolve(self, template_id, entry, variables) -> str:
        if isinstance(entry, str):
            return entry
        if isinstance(entry, list):
            if not entry:
                raise ProviderError(f"empty script for {template_id!r}")
            with self._lock:
                i = self._cursor.get(template_id, 0)
                self._cursor[template_id] = i + 1
            return self._resolve(template_id, entry[min(i, len(entry) - 1)], variables)
        if isinstance(entry, dict):
            if "raise" in entry:
                raise ProviderError(str(entry["raise"]))
            value = str(variables.get(entry.get("key", ""), ""))
            responses = entry.get("responses", {})
            if value in responses:
                return self._resolve(template_id, responses[value], variables)
            if "default" in entry:
                return self._resolve(template_id, entry["default"], variables)
            raise ProviderError(f"no scripted response for {template_id!r} with {entry.get('key')}={value!r}")
        raise ProviderError(f"invalid script entry for {template_id!r}")


_SOURCE_RE = re.compile(r"^Source (\d+): (.*)$", re.MULTILINE)


class OfflineProvider(ChatProvider):
    """Rule-based stand-in used in offline mode when no script is configured.

    Answers are derived from the prompt variables only: no tools are planned, the
    question itself is the only subquery, and the cited response quotes the first
    sentence of the leading sources.
    """

    model = "offline-rules"

    def _generate(self, template_id, variables, prompt, temperature, images) -> str:
        if template_id == "plan_actions":
            return '{"calls": []}'
        if template_id == "subqueries":
            return variables.get("question", "")
        if template_id == "strategy":
            return "Summarize the retrieved guideline evidence relevant to the question."
        if template_id == "cited_response":
            parts = []
            for num, text in _SOURCE_RE.findall(variables.get("sources", ""))[:3]:
                first = re.split(r"(?<=[.!?])\s+", text.strip())[0].rstrip(".!?")
                parts.append(f"{first} [Source {num}].")
            return " ".join(parts) or "No supporting sources were retrieved."
        if template_id == "citation_check":
            return "supported"
        if template_id == "suggestions":
            return ""
        if template_id == "vision_report":
            return f"Image {variables.get('image_ref')}: no automated findings available offline."
        if template_id == "vision_compare":
            return "No comparison available offline."
        raise ProviderError(f"offline provider cannot answer {template_id!r}")


class OpenAIChatProvider(ChatProvider):
    """Chat-completions adapter; images are sent inline as base64 data URLs."""

    def __init__(
        self,
        model: str = DEFAULT_CHAT_MODEL,
        base_url: str = "https://api.openai.com/v1",
        api_key_env: str = "OPENAI_API_KEY",
        transport: Transport | None = None,
        **kw,
    ):
        super().__init__(model=model, **kw)
        self.base_url = base_url.rstrip("/")
        self.api_key_env = api_key_env
        self._transport = transport

    def _generate(self, template_id, variables, prompt, temperature, images) -> str:
        content: list[dict] = [{"type": "text", "text": prompt}]
        for img in images:
            mime = mimetypes.guess_type(str(img))[0] or "application/octet-stream"
            data = base64.b64encode(Path(img).read_bytes()).decode("ascii")
            content.append({"type": "image_url", "image_url": {"url": f"data:{mime};base64,{data}"}})
        payload = {
            "model": self.model,
            "temperature": temperature,
            "messages": [{"role": "user", "content": content if images else prompt}],
        }
        transport = self._transport or default_transport()
        body = transport.post_json(f"{self.base_url}/chat/completions", payload, headers=bearer(self.api_key_env))
        try:
            return body["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError):
            raise ProviderError(f"malformed chat completion response: {str(body)[:200]}") from None
