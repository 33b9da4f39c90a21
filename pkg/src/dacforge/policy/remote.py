"""Client for an OpenAI-compatible ``/completions`` endpoint."""

from __future__ import annotations

import logging
import os
import time
from typing import Callable

import httpx

from .base import BackendError, Completion, GenerationRequest, split_tokens

logger = logging.getLogger(__name__)

RETRY_STATUS = {408, 409, 429, 500, 502, 503, 504}


class RemoteBackend:
    def __init__(
        self,
        api_base: str,
        model: str,
        api_key: str | None = None,
        *,
        max_retries: int = 4,
        backoff: float = 1.0,
        max_backoff: float = 30.0,
        timeout: float = 600.0,
        logprobs: bool = True,
        system_prompt: str | None = None,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.api_base = api_base.rstrip("/")
        self.model = model
        self.max_retries = max_retries
        self.backoff = backoff
        self.max_backoff = max_backoff
        self.logprobs = logprobs
        self.system_prompt = system_prompt
        self._sleep = sleep
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._client = httpx.Client(timeout=timeout, headers=headers, transport=transport)

    @classmethod
    def from_env(cls, **kwargs) -> "RemoteBackend":
        """Build from DACFORGE_API_BASE / DACFORGE_MODEL / DACFORGE_API_KEY."""
        base = os.environ.get("DACFORGE_API_BASE")
        model = os.environ.get("DACFORGE_MODEL")
        if not base or not model:
            raise BackendError("DACFORGE_API_BASE and DACFORGE_MODEL must be set for the remote backend")
        return cls(base, model, os.environ.get("DACFORGE_API_KEY"), **kwargs)

    def describe(self) -> dict:
        return {"backend": "remote", "api_base": self.api_base, "model": self.model}

    def close(self) -> None:
        self._client.close()

    def _payload(self, request: GenerationRequest) -> dict:
        prompt = request.prompt
        if self.system_prompt:
            prompt = f"{self.system_prompt}\n\n{prompt}"
        payload = {
            "model": self.model,
            "prompt": prompt,
            "n": request.n,
            "temperature": request.temperature,
            "top_p": request.top_p,
            "max_tokens": request.max_tokens,
        }
        if self.logprobs:
            payload["logprobs"] = 1
        if request.seed is not None:
            payload["seed"] = request.seed
        return payload

    def generate(self, request: GenerationRequest) -> list[Completion]:
        payload = self._payload(request)
        url = f"{self.api_base}/completions"
        for attempt in range(self.max_retries + 1):
            try:
                response = self._client.post(url, json=payload)
            except httpx.TransportError as exc:
                failure = f"transport error: {exc}"
            else:
                if response.status_code == 200:
                    return self._parse(response, request.n)
                if response.status_code not in RETRY_STATUS:
                    raise BackendError(f"completion request failed with HTTP {response.status_code}: {response.text[:200]}")
                failure = f"HTTP {response.status_code}"
            if attempt == self.max_retries:
                raise BackendError(f"giving up after {attempt + 1} attempts: {failure}")
            delay = min(self.backoff * 2**attempt, self.max_backoff)
            logger.warning("completion attempt %d failed (%s); retrying in %.1fs", attempt + 1, failure, delay)
            self._sleep(delay)
        raise AssertionError("unreachable")

    def _parse(self, response: httpx.Response, n: int) -> list[Completion]:
        try:
            choices = response.json()["choices"]
            choices = sorted(choices, key=lambda c: c.get("index", 0))
            out = []
            for choice in choices:
                text = choice["text"]
                lp = (choice.get("logprobs") or {}).get("token_logprobs")
                if lp is not None:
                    lp = tuple(min(float(x), 0.0) for x in lp if x is not None)
                count = len(lp) if lp is not None else len(split_tokens(text))
                out.append(
                    Completion(
                        text=text,
                        token_logprobs=lp,
                        truncated=choice.get("finish_reason") == "length",
                        token_count=count,
                    )
                )
        except (ValueError, KeyError, TypeError) as exc:
            raise BackendError(f"malformed completion response: {exc!r}") from exc
        if len(out) != n:
            raise BackendError(f"malformed completion response: {len(out)} choices for n={n}")
        return out
