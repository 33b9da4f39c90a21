"""Problem datasets: loading, answer canonicalization and difficulty filtering."""

from __future__ import annotations

import csv
import json
import logging
import re
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Mapping

logger = logging.getLogger(__name__)

_INTEGER_RE = re.compile(r"[+-]?\d+")
_THOUSANDS_RE = re.compile(r"[+-]?\d{1,3}(?:,\d{3})+")
_WRAPPERS = ("\\boxed", "\\text", "\\mathrm", "\\textbf")


class CorpusError(Exception):
    pass


@dataclass(frozen=True)
class Problem:
    id: str
    statement: str
    answer: str
    source: str = ""
    difficulty: float | None = None


@dataclass(frozen=True)
class LoadReport:
    path: str
    loaded: int
    skipped: int
    skipped_ids: tuple[str, ...] = ()
    reasons: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "path": self.path,
            "loaded": self.loaded,
            "skipped": self.skipped,
            "skipped_ids": list(self.skipped_ids),
            "reasons": list(self.reasons),
        }


@dataclass
class Corpus:
    name: str
    problems: list[Problem]
    report: LoadReport | None = field(default=None, compare=False)

    def __iter__(self) -> Iterator[Problem]:
        return iter(self.problems)

    def __len__(self) -> int:
        return len(self.problems)

    def __getitem__(self, idx):
        return self.problems[idx]

    def by_id(self) -> dict[str, Problem]:
        return {p.id: p for p in self.problems}


def _strip_wrapper(s: str) -> str | None:
    """Remove one layer of ``$..$``, ``\\(..\\)`` or ``\\cmd{..}`` if it spans the whole string."""
    if len(s) >= 2 and s.startswith("$") and s.endswith("$"):
        return s.strip("$")
    if s.startswith("\\(") and s.endswith("\\)"):
        return s[2:-2]
    for cmd in _WRAPPERS:
        if s.startswith(cmd):
            rest = s[len(cmd):].lstrip()
            if not rest.startswith("{"):
                continue
            close = _matching_brace(rest, 0)
            if close == len(rest) - 1:
                return rest[1:-1]
    return None


def _matching_brace(s: str, open_idx: int) -> int:
    depth = 0
    for i in range(open_idx, len(s)):
        if s[i] == "{":
            depth += 1
        elif s[i] == "}":
            depth -= 1
            if depth == 0:
                return i
    return -1


def canonicalize_answer(raw: str | int | None) -> str | None:
    """Return the base-10 integer form of ``raw``, or None when it is not an integer.

    Surrounding whitespace, ``$`` delimiters and ``\\boxed{}``/``\\text{}`` wrappers
    are peeled off, and comma thousands separators are dropped, so
    ``"$\\boxed{1,024}$"`` gives ``"1024"`` and ``" 070 "`` gives ``"70"``.
    """
    if raw is None:
        return None
    s = str(raw).strip()
    while True:
        inner = _strip_wrapper(s)
        if inner is None:
            break
        s = inner.strip()
    if _THOUSANDS_RE.fullmatch(s):
        s = s.replace(",", "")
    if not _INTEGER_RE.fullmatch(s):
        return None
    return str(int(s))


def _detect_format(path: Path) -> str:
    suffix = path.suffix.lower()
    if suffix in (".jsonl", ".ndjson", ".json"):
        return "jsonl"
    if suffix == ".csv":
        return "csv"
    raise CorpusError(f"cannot infer corpus format from {path.name!r}; pass format explicitly")


def _read_rows(path: Path, fmt: str) -> list[tuple[int, dict | None]]:
    rows: list[tuple[int, dict | None]] = []
    with open(path, encoding="utf-8", newline="") as fh:
        if fmt == "jsonl":
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError:
                    rows.append((lineno, None))
                    continue
                rows.append((lineno, obj if isinstance(obj, dict) else None))
        elif fmt == "csv":
            for lineno, row in enumerate(csv.DictReader(fh), start=2):
                rows.append((lineno, dict(row)))
        else:
            raise CorpusError(f"unknown corpus format {fmt!r}")
    return rows


def load_corpus(path: str | Path, format: str | None = None, name: str | None = None) -> Corpus:
    """Load a JSON Lines or CSV problem file.

    Records need ``problem`` (or ``statement``) and ``answer`` keys; ``id`` and
    ``source`` are optional. Records whose answer is not an integer are skipped
    and counted in ``corpus.report``.
    """
    path = Path(path)
    fmt = format or _detect_format(path)
    try:
        rows = _read_rows(path, fmt)
    except OSError as exc:
        raise CorpusError(f"cannot read corpus {path}: {exc}") from exc

    problems: list[Problem] = []
    seen: set[str] = set()
    skipped_ids: list[str] = []
    reasons: list[str] = []
    for lineno, rec in rows:
        if rec is None:
            skipped_ids.append(f"line{lineno}")
            reasons.append("unparseable record")
            continue
        pid = str(rec.get("id") or f"{path.stem}-{lineno}")
        statement = rec.get("problem", rec.get("statement"))
        answer = canonicalize_answer(rec.get("answer"))
        if not statement or not str(statement).strip():
            skipped_ids.append(pid)
            reasons.append("missing statement")
            continue
        if answer is None:
            skipped_ids.append(pid)
            reasons.append(f"non-integer answer {rec.get('answer')!r}")
            continue
        if pid in seen:
            raise CorpusError(f"duplicate problem id {pid!r} in {path}")
        seen.add(pid)
        problems.append(Problem(id=pid, statement=str(statement), answer=answer, source=str(rec.get("source") or "")))

    report = LoadReport(str(path), len(problems), len(skipped_ids), tuple(skipped_ids), tuple(reasons))
    for pid, why in zip(skipped_ids, reasons):
        logger.info("skipped %s: %s", pid, why)
    if not problems:
        raise CorpusError(f"no valid records in {path} ({report.skipped} skipped)")
    return Corpus(name=name or path.stem, problems=problems, report=report)


def filter_by_difficulty(corpus: Corpus, solve_rates: Mapping[str, float], max_rate: float = 0.5) -> Corpus:
    """Keep problems whose measured solve rate is strictly below ``max_rate``.

    Retained problems carry their rate in ``Problem.difficulty``.
    """
    missing = [p.id for p in corpus if p.id not in solve_rates]
    if missing:
        raise CorpusError(f"no solve rate for {len(missing)} problem(s), e.g. {missing[0]!r}")
    kept = [replace(p, difficulty=float(solve_rates[p.id])) for p in corpus if solve_rates[p.id] < max_rate]
    if not kept:
        warnings.warn(f"difficulty filter (< {max_rate}) removed every problem from {corpus.name!r}", stacklevel=2)
    return Corpus(name=f"{corpus.name}[rate<{max_rate}]", problems=kept, report=corpus.report)
