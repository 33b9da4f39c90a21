"""Extraction of subproblems, boxed answers and subproblem coverage from responses."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass

from .corpus import canonicalize_answer

logger = logging.getLogger(__name__)

MAX_SUBPROBLEMS = 16

_TAG_RE = re.compile(r"<(/?)SUBPROBLEM\s+(\d+)\s*>")
_BOXED_RE = re.compile(r"\\boxed\s*\{")


@dataclass(frozen=True)
class SubproblemGroup:
    subproblems: tuple[str, ...]
    format_valid: bool
    raw: str = ""

    def __len__(self) -> int:
        return len(self.subproblems)

    @classmethod
    def of(cls, texts, raw: str = "") -> "SubproblemGroup":
        """A well-formed group built directly from subproblem texts."""
        texts = tuple(t.strip() for t in texts)
        return cls(texts, bool(texts) and all(texts), raw)


@dataclass(frozen=True)
class ExtractedAnswer:
    value: str | None
    found_boxed: bool
    raw: str | None = None


def parse_subproblems(y_d: str, max_subproblems: int = MAX_SUBPROBLEMS) -> SubproblemGroup:
    """Parse ``<SUBPROBLEM i> ... </SUBPROBLEM i>`` blocks from a division response.

    Never raises. A response is format-valid when the tags form clean, non-nested
    pairs numbered 1..n without gaps or repeats, every body is non-empty, and
    n <= ``max_subproblems``. Otherwise the flag is False and ``subproblems`` holds
    whatever cleanly paired bodies could be salvaged.
    """
    if not isinstance(y_d, str):
        y_d = str(y_d, "utf-8", "replace") if isinstance(y_d, (bytes, bytearray)) else str(y_d)

    pairs: list[tuple[int, str]] = []
    clean = True
    open_tag: re.Match | None = None
    for m in _TAG_RE.finditer(y_d):
        closing, idx = m.group(1) == "/", int(m.group(2))
        if not closing:
            if open_tag is not None:
                clean = False  # nested or unterminated
            open_tag = m
            continue
        if open_tag is None or int(open_tag.group(2)) != idx:
            clean = False
            open_tag = None
            continue
        body = y_d[open_tag.end():m.start()].strip()
        if body:
            pairs.append((idx, body))
        else:
            clean = False
        open_tag = None
    if open_tag is not None:
        clean = False

    indices = [i for i, _ in pairs]
    texts = tuple(t for _, t in pairs)
    valid = (
        clean
        and bool(pairs)
        and indices == list(range(1, len(pairs) + 1))
        and len(pairs) <= max_subproblems
    )
    if pairs and not valid:
        logger.debug("salvaged %d subproblem(s) from malformed division, indices %s", len(pairs), indices)
    return SubproblemGroup(texts, valid, y_d)


def _last_boxed_content(text: str) -> str | None:
    for m in reversed(list(_BOXED_RE.finditer(text))):
        depth = 1
        i = m.end()
        while i < len(text):
            ch = text[i]
            if ch == "{":
                depth += 1
            elif ch == "}":
                depth -= 1
                if depth == 0:
                    return text[m.end():i]
            i += 1
    return None


def extract_boxed_answer(y_c: str) -> ExtractedAnswer:
    """Canonical integer inside the last balanced ``\\boxed{...}`` of ``y_c``.

    >>> extract_boxed_answer(r"\\boxed{1} then \\boxed{2}").value
    '2'
    """
    content = _last_boxed_content(y_c)
    if content is None:
        return ExtractedAnswer(None, False)
    return ExtractedAnswer(canonicalize_answer(content), True, content)


def check_subproblem_coverage(y_c: str, n_g: int) -> bool:
    """True iff "subproblem i" (any case) appears in ``y_c`` for every i in 1..n_g-1."""
    if n_g < 1:
        raise ValueError("n_g must be >= 1")
    lowered = y_c.lower()
    for i in range(1, n_g):
        if not re.search(rf"subproblem\s+{i}(?!\d)", lowered):
            return False
    return True
