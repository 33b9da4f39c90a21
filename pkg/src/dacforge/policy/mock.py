from __future__ import annotations

import threading
from collections import deque
from typing import Mapping, Sequence, Union

from ..prompts import identify_prompt
from .base import Completion, GenerationRequest, ScriptExhausted, split_tokens, truncate_tokens

ScriptItem = Union[str, Mapping]


def _to_completion(item: ScriptItem, max_tokens: int) -> Completion:
    if isinstance(item, str):
        text, count, truncated = truncate_tokens(item, max_tokens)
        return Completion(text=text, truncated=truncated, token_count=count)
    text = item["text"]
    logprobs = item.get("token_logprobs")
    count = len(logprobs) if logprobs is not None else len(split_tokens(text))
    return Completion(
        text=text,
        token_logprobs=tuple(logprobs) if logprobs is not None else None,
        truncated=bool(item.get("truncated", False)),
        token_count=count,
    )


class MockBackend:
    """Replays canned responses, each exactly once.

    ``script`` is either a flat sequence, consumed in call order, or a mapping
    routed by prompt: keys are ``(kind, statement)`` tuples or a bare ``kind``
    (``"division"``, ``"conquering"``, ``"cot"``), tried in that order. Routed
    scripts give the same output under any call interleaving; a flat script is
    only deterministic when calls are serialized.
    """

    def __init__(self, script: Sequence[ScriptItem] | Mapping[object, Sequence[ScriptItem]]):
        self._lock = threading.Lock()
        if isinstance(script, Mapping):
            self._routes = {key: deque(items) for key, items in script.items()}
            self._queue = None
        else:
            self._routes = None
            self._queue = deque(script)
        self.calls: list[GenerationRequest] = []

    def _queue_for(self, prompt: str) -> deque:
        if self._queue is not None:
            return self._queue
        info = identify_prompt(prompt)
        if info is not None:
            for key in ((info.kind, info.statement), info.kind):
                if key in self._routes:
                    return self._routes[key]
        raise ScriptExhausted(f"no scripted route for prompt starting {prompt[:60]!r}")

    def generate(self, request: GenerationRequest) -> list[Completion]:
        with self._lock:
            self.calls.append(request)
            queue = self._queue_for(request.prompt)
            if len(queue) < request.n:
                raise ScriptExhausted(f"script has {len(queue)} response(s) left, request wants {request.n}")
            items = [queue.popleft() for _ in range(request.n)]
        return [_to_completion(item, request.max_tokens) for item in items]

    def remaining(self) -> int:
        if self._queue is not None:
            return len(self._queue)
        return sum(len(q) for q in self._routes.values())

    def describe(self) -> dict:
        return {"backend": "mock", "remaining": self.remaining()}
