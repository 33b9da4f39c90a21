from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from typing import Protocol, Sequence


class BackendError(RuntimeError):
    """Generation failed for good (after any retries)."""


class ScriptExhausted(BackendError):
    pass


@dataclass(frozen=True)
class GenerationRequest:
    prompt: str
    n: int = 1
    temperature: float = 1.0
    top_p: float = 1.0
    max_tokens: int = 8192
    seed: int | None = None

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"n must be >= 1, got {self.n}")
        if not 0.0 < self.top_p <= 1.0:
            raise ValueError(f"top_p must lie in (0, 1], got {self.top_p}")
        if self.max_tokens < 1:
            raise ValueError(f"max_tokens must be >= 1, got {self.max_tokens}")
        if self.temperature < 0:
            raise ValueError(f"temperature must be >= 0, got {self.temperature}")


@dataclass(frozen=True)
class Completion:
    text: str
    token_logprobs: tuple[float, ...] | None = None
    truncated: bool = False
    token_count: int = 0

    def __post_init__(self):
        if self.token_logprobs is not None:
            if len(self.token_logprobs) != self.token_count:
                raise ValueError("token_logprobs length must equal token_count")
            if any(lp > 0 for lp in self.token_logprobs):
                raise ValueError("log-probabilities must be <= 0")


class Backend(Protocol):
    def generate(self, request: GenerationRequest) -> list[Completion]: ...

    def describe(self) -> dict: ...


def generate(backend: Backend, request: GenerationRequest) -> list[Completion]:
    completions = list(backend.generate(request))
    if len(completions) != request.n:
        raise BackendError(f"backend returned {len(completions)} completions, expected {request.n}")
    return completions


def split_tokens(text: str) -> list[str]:
    """Whitespace tokenization whose pieces concatenate back to ``text``."""
    return re.findall(r"\s*\S+|\s+$", text) if text else []


def truncate_tokens(text: str, max_tokens: int) -> tuple[str, int, bool]:
    tokens = split_tokens(text)
    if len(tokens) <= max_tokens:
        return text, len(tokens), False
    return "".join(tokens[:max_tokens]), max_tokens, True


def derive_seed(global_seed: int, *parts: object) -> int:
    """Stable 63-bit seed from a global seed and a request identity.

    Concurrency-safe by construction: the seed for (problem, purpose, index) never
    depends on scheduling order.
    """
    key = "\x1f".join([str(global_seed), *map(str, parts)]).encode("utf-8")
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "big") >> 1


def as_completions(items: Sequence[str]) -> list[Completion]:
    out = []
    for text in items:
        out.append(Completion(text=text, token_count=len(split_tokens(text))))
    return out
