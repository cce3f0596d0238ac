"""Minimal JSON-over-HTTP client shared by the external backends."""

from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass
from typing import Any

import httpx

log = logging.getLogger(__name__)

API_KEY_ENV = "STAGEVIS_API_KEY"


class ServiceError(RuntimeError):
    pass


@dataclass(frozen=True)
class ServiceClient:
    endpoint: str
    timeout: float = 30.0
    retries: int = 3
    backoff: float = 0.5
    api_key_env: str = API_KEY_ENV

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def post(self, payload: dict[str, Any]) -> dict[str, Any]:
        """POST `payload`, retrying transport errors and 5xx/429 with exponential backoff."""
        last: Exception | None = None
        for attempt in range(self.retries + 1):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                resp = httpx.post(self.endpoint, json=payload, headers=self._headers(), timeout=self.timeout)
            except httpx.HTTPError as exc:
                last = exc
                log.warning("%s: attempt %d failed: %s", self.endpoint, attempt + 1, exc)
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last = ServiceError(f"HTTP {resp.status_code}")
                log.warning("%s: attempt %d got HTTP %d", self.endpoint, attempt + 1, resp.status_code)
                continue
            if resp.status_code >= 400:
                raise ServiceError(f"{self.endpoint}: HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                body = resp.json()
            except ValueError:
                raise ServiceError(f"{self.endpoint}: response is not JSON") from None
            if not isinstance(body, dict):
                raise ServiceError(f"{self.endpoint}: response is not a JSON object")
            return body
        raise ServiceError(f"{self.endpoint}: giving up after {self.retries + 1} attempts: {last}")
