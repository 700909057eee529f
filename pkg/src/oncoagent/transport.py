"""Thin HTTP transport shared by every remote client.

All network traffic goes through a :class:`Transport` instance so offline runs can
be checked with a recording stub.
"""

from __future__ import annotations

import logging
import os
import time

import requests

from .errors import ProviderError, RetryableError

logger = logging.getLogger(__name__)

RETRY_STATUS = {408, 429, 500, 502, 503, 504}


class Transport:
    def __init__(self, timeout: float = 60.0, retries: int = 3, backoff: float = 0.5, session=None):
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.session = session or requests.Session()

    def request(self, method: str, url: str, *, json=None, params=None, headers=None):
        last = None
        for attempt in range(1, self.retries + 1):
            try:
                resp = self.session.request(
                    method, url, json=json, params=params, headers=headers, timeout=self.timeout
                )
            except requests.RequestException as exc:
                last = RetryableError(f"{method} {url}: {exc}")
            else:
                if resp.status_code in RETRY_STATUS:
                    last = RetryableError(f"{method} {url}: HTTP {resp.status_code}")
                elif resp.status_code >= 400:
                    raise ProviderError(f"{method} {url}: HTTP {resp.status_code}: {resp.text[:200]}")
                else:
                    return resp
            logger.warning("attempt %d/%d failed: %s", attempt, self.retries, last)
            if attempt < self.retries:
                time.sleep(self.backoff * 2 ** (attempt - 1))
        raise last

    def post_json(self, url: str, payload: dict, headers=None) -> dict:
        return self.request("POST", url, json=payload, headers=headers).json()

    def get_json(self, url: str, params=None, headers=None) -> dict:
        return self.request("GET", url, params=params, headers=headers).json()

    def get_text(self, url: str, params=None, headers=None) -> str:
        return self.request("GET", url, params=params, headers=headers).text


_default: Transport | None = None


def default_transport() -> Transport:
    global _default
    if _default is None:
        _default = Transport()
    return _default


def set_default_transport(transport: Transport | None) -> None:
    global _default
    _default = transport


def bearer(env_var: str | None) -> dict:
    """Authorization header from an environment variable; empty when unset."""
    if not env_var:
        return {}
    key = os.environ.get(env_var)
    return {"Authorization": f"Bearer {key}"} if key else {}
