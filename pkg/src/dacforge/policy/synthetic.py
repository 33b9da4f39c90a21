"""A seeded stand-in policy whose final-answer success is caused by subproblem success.

Each conquering sample draws per-subproblem correctness ``s_i ~ Bernoulli(p_sub)``
and then a final-answer success ``C ~ Bernoulli(g(s))``. The emitted texts are
ordinary division / conquering / direct responses, so the real parsing and
reward code runs on them unchanged.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from ..prompts import identify_prompt
from .base import BackendError, Completion, GenerationRequest, derive_seed, split_tokens, truncate_tokens

_QUALITY_RE = re.compile(r"\[p_sub=([0-9.]+)\]")
_FILLER = (
    "so", "we", "note", "that", "the", "value", "follows", "from", "substituting", "into",
    "equation", "hence", "simplify", "both", "sides", "term", "gives", "check", "case", "then",
)


class NonMonotoneError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticPolicyParams:
    """Causal model parameters.

    ``g`` maps the number of correct subproblems (0..m) to P(C=1). ``g_vector``
    optionally gives P(C=1 | s) per configuration instead, indexed by
    ``sum(s_i << i)``; it must then have 2**m entries.
    """

    m: int
    p_sub: float
    g: tuple[float, ...]
    g_vector: tuple[float, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "g", tuple(float(x) for x in self.g))
        if self.g_vector is not None:
            object.__setattr__(self, "g_vector", tuple(float(x) for x in self.g_vector))
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if not 0.0 <= self.p_sub <= 1.0:
            raise ValueError("p_sub must lie in [0, 1]")
        if len(self.g) != self.m + 1:
            raise ValueError(f"g needs m+1={self.m + 1} entries, got {len(self.g)}")
        if self.g_vector is not None and len(self.g_vector) != 2**self.m:
            raise ValueError(f"g_vector needs 2**m={2**self.m} entries, got {len(self.g_vector)}")
        values = self.g + (self.g_vector or ())
        if any(not 0.0 <= v <= 1.0 for v in values):
            raise ValueError("success probabilities must lie in [0, 1]")

    def check_monotone(self) -> None:
        """Raise NonMonotoneError unless g is nondecreasing in every coordinate."""
        for j in range(self.m):
            if self.g[j + 1] < self.g[j]:
                raise NonMonotoneError(f"g decreases from {j} to {j + 1} correct subproblems")
        if self.g_vector is not None:
            table = self.g_vector
            for idx in range(len(table)):
                for i in range(self.m):
                    if not idx >> i & 1 and table[idx | 1 << i] < table[idx]:
                        raise NonMonotoneError(f"g_vector decreases when subproblem {i + 1} flips to correct")

    def success_prob(self, s) -> float:
        s = np.asarray(s, dtype=bool)
        if self.g_vector is not None:
            return self.g_vector[int(np.dot(s, 1 << np.arange(self.m)))]
        return self.g[int(s.sum())]

    def success_probs(self, s: np.ndarray) -> np.ndarray:
        """Vectorized ``success_prob`` over rows of a boolean (n, m) array."""
        if self.g_vector is not None:
            return np.asarray(self.g_vector)[s.astype(np.int64) @ (1 << np.arange(self.m))]
        return np.asarray(self.g)[s.sum(axis=1)]

    def to_dict(self) -> dict:
        out = {"m": self.m, "p_sub": self.p_sub, "g": list(self.g)}
        if self.g_vector is not None:
            out["g_vector"] = list(self.g_vector)
        return out


def synthetic_rollout(params: SyntheticPolicyParams, rng_seed) -> tuple[np.ndarray, bool]:
    params.check_monotone()
    rng = np.random.default_rng(rng_seed)
    s = rng.random(params.m) < params.p_sub
    c = bool(rng.random() < params.success_prob(s))
    return s, c


def _wrong_answer(answer: str, rng: np.random.Generator) -> str:
    return str(int(answer) + int(rng.integers(1, 10)))


def _filler(rng: np.random.Generator, lo: int, hi: int) -> str:
    n = int(rng.integers(lo, hi + 1))
    return " ".join(_FILLER[i] for i in rng.integers(0, len(_FILLER), size=n))


@dataclass
class SyntheticBackend:
    """Deterministic simulated policy.

    ``answers`` maps problem statements to their reference answers; the backend
    reads the statement back out of each prompt. ``division_quality`` lists the
    per-group subproblem accuracies a division sample can land on (uniformly);
    conquering samples read that value back from the group text, so groups of
    different quality lead to different final-answer success rates.
    """

    answers: Mapping[str, str]
    params: SyntheticPolicyParams
    division_quality: Sequence[float] | None = None
    cot_accuracy: float | Mapping[str, float] = 0.3
    malformed_rate: float = 0.0
    short_division_rate: float = 0.0
    uncovered_rate: float = 0.0
    filler_tokens: tuple[int, int] = (8, 40)
    seed: int = 0
    snapshot: int = 0
    drift: float = 0.05
    _answers: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.params.check_monotone()
        self._answers = {k.strip(): v for k, v in self.answers.items()}

    def describe(self) -> dict:
        return {
            "backend": "synthetic",
            "params": self.params.to_dict(),
            "division_quality": list(self.division_quality) if self.division_quality else None,
            "cot_accuracy": dict(self.cot_accuracy) if isinstance(self.cot_accuracy, Mapping) else self.cot_accuracy,
            "malformed_rate": self.malformed_rate,
            "short_division_rate": self.short_division_rate,
            "uncovered_rate": self.uncovered_rate,
            "seed": self.seed,
        }

    def _answer(self, statement: str) -> str:
        try:
            return self._answers[statement.strip()]
        except KeyError:
            raise BackendError("synthetic backend has no reference answer for this problem") from None

    def generate(self, request: GenerationRequest) -> list[Completion]:
        info = identify_prompt(request.prompt)
        if info is None:
            raise BackendError("synthetic backend only understands division, conquering and direct prompts")
        answer = self._answer(info.statement)
        base = request.seed if request.seed is not None else derive_seed(self.seed, request.prompt)
        out = []
        for i in range(request.n):
            rng = np.random.default_rng([base, i])
            if info.kind == "division":
                text = self._division_text(rng)
            elif info.kind == "conquering":
                text = self._conquer_text(info.group.subproblems, answer, rng)
            else:
                text = self._cot_text(answer, self._cot_rate(info.statement), rng)
            text, count, truncated = truncate_tokens(text, request.max_tokens)
            out.append(
                Completion(
                    text=text,
                    token_logprobs=tuple(self.score(request.prompt, text)),
                    truncated=truncated,
                    token_count=count,
                )
            )
        return out

    def _division_text(self, rng: np.random.Generator) -> str:
        quality = float(rng.choice(self.division_quality)) if self.division_quality else self.params.p_sub
        roll = rng.random()
        if roll < self.malformed_rate:
            indices = [1, 2, 4]
        elif roll < self.malformed_rate + self.short_division_rate:
            indices = [1, 2]
        else:
            indices = list(range(1, self.params.m + 1))
        blocks = [
            f"<SUBPROBLEM {i}>\nDetermine intermediate quantity {i} needed for the original problem. "
            f"[p_sub={quality:.3f}]\n</SUBPROBLEM {i}>"
            for i in indices
        ]
        return "\n\n".join(blocks)

    def _conquer_text(self, subproblems: Sequence[str], answer: str, rng: np.random.Generator) -> str:
        m = self.params.m
        match = _QUALITY_RE.search(subproblems[0]) if subproblems else None
        quality = float(match.group(1)) if match else self.params.p_sub
        n_g = len(subproblems)
        s = rng.random(n_g) < quality
        if self.params.g_vector is not None and n_g == m:
            p_success = self.params.success_prob(s)
        else:
            p_success = self.params.g[min(int(s.sum()), m)]
        correct = bool(rng.random() < p_success)
        label = "Part" if rng.random() < self.uncovered_rate else "Subproblem"
        lines = []
        lo, hi = self.filler_tokens
        for i, ok in enumerate(s, start=1):
            verdict = "This step checks out." if ok else "This step contains a slip."
            lines.append(f"{label} {i}: {_filler(rng, lo, hi)}. {verdict}")
        final = answer if correct else _wrong_answer(answer, rng)
        lines.append(f"Combining the results above, the final answer is $\\boxed{{{final}}}$.")
        return "\n\n".join(lines)

    def _cot_rate(self, statement: str) -> float:
        if isinstance(self.cot_accuracy, Mapping):
            return float(self.cot_accuracy.get(statement.strip(), 0.0))
        return float(self.cot_accuracy)

    def _cot_text(self, answer: str, rate: float, rng: np.random.Generator) -> str:
        correct = bool(rng.random() < rate)
        lo, hi = self.filler_tokens
        body = _filler(rng, 2 * lo, 3 * hi)
        final = answer if correct else _wrong_answer(answer, rng)
        return f"{body}.\n\nTherefore the answer is $\\boxed{{{final}}}$."

    def score(self, prompt: str, text: str) -> list[float]:
        """Per-token log-probabilities of ``text`` under this snapshot of the policy.

        Snapshot 0 is the sampling policy; other snapshots perturb it slightly so
        probability ratios against snapshot 0 sit near one.
        """
        n = len(split_tokens(text))
        digest = hashlib.sha256(f"{self.seed}\x1f{prompt}\x1f{text}".encode()).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "big"))
        logp = np.log(rng.uniform(0.2, 1.0, size=n))
        if self.snapshot:
            noise = np.random.default_rng([int.from_bytes(digest[8:16], "big"), self.snapshot])
            logp = np.minimum(logp + self.drift * noise.standard_normal(n), 0.0)
        return [float(x) for x in logp]
