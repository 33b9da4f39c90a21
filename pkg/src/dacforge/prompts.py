"""Division, conquering and direct (CoT) prompt rendering from checked-in templates."""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

from .corpus import Problem
from .parse import SubproblemGroup, parse_subproblems

PROBLEM_SLOT = "{REPLACE}"
SUBPROBLEM_SLOT = "{SUBPROBLEMS}"
_SLOT_RE = re.compile(r"\{(REPLACE|SUBPROBLEMS)\}")

KINDS = ("division", "conquering", "cot")


class PromptError(ValueError):
    pass


@dataclass(frozen=True)
class PromptTemplate:
    kind: str
    body: str

    def __post_init__(self):
        n_problem = self.body.count(PROBLEM_SLOT)
        n_sub = self.body.count(SUBPROBLEM_SLOT)
        expected_sub = 1 if self.kind == "conquering" else 0
        if n_problem != 1 or n_sub != expected_sub:
            raise PromptError(
                f"{self.kind} template needs exactly one problem slot and {expected_sub} subproblem slot(s), "
                f"found {n_problem} and {n_sub}"
            )

    def render(self, **slots: str) -> str:
        # single pass over the template only, so slot-like text inside values survives
        return _SLOT_RE.sub(lambda m: slots[m.group(1)], self.body)


@lru_cache(maxsize=None)
def load_template(kind: str) -> PromptTemplate:
    if kind not in KINDS:
        raise PromptError(f"unknown template kind {kind!r}")
    body = resources.files("dacforge").joinpath("templates", f"{kind}.txt").read_text(encoding="utf-8")
    return PromptTemplate(kind, body)


def _statement(problem: Problem | str) -> str:
    text = problem.statement if isinstance(problem, Problem) else problem
    if not text or not text.strip():
        raise PromptError("problem statement is empty")
    return text


def format_subproblem_block(subproblems) -> str:
    return "\n\n".join(f"<SUBPROBLEM {i}>\n{text}\n</SUBPROBLEM {i}>" for i, text in enumerate(subproblems, start=1))


def render_division_prompt(problem: Problem | str) -> str:
    return load_template("division").render(REPLACE=_statement(problem))


def render_conquering_prompt(problem: Problem | str, group: SubproblemGroup) -> str:
    if len(group.subproblems) == 0:
        raise PromptError("cannot build a conquering prompt from an empty subproblem group")
    return load_template("conquering").render(
        REPLACE=_statement(problem), SUBPROBLEMS=format_subproblem_block(group.subproblems)
    )


def render_cot_prompt(problem: Problem | str) -> str:
    return load_template("cot").render(REPLACE=_statement(problem))


@dataclass(frozen=True)
class PromptInfo:
    kind: str
    statement: str
    group: SubproblemGroup | None = None


@lru_cache(maxsize=None)
def _template_regex(kind: str) -> re.Pattern:
    body = load_template(kind).body
    parts = _SLOT_RE.split(body)
    # split yields literal, slot-name, literal, ...
    pattern = ""
    for i, part in enumerate(parts):
        if i % 2 == 0:
            pattern += re.escape(part)
        else:
            pattern += f"(?P<{part}>.*)"
    return re.compile(pattern, re.DOTALL)


def identify_prompt(prompt: str) -> PromptInfo | None:
    """Recover the kind, problem statement and subproblems from a rendered prompt.

    Returns None for text that none of the templates could have produced.
    Backends that simulate a policy use this to see what they are being asked.
    """
    for kind in ("conquering", "division", "cot"):
        m = _template_regex(kind).fullmatch(prompt)
        if m is None:
            continue
        group = parse_subproblems(m.group("SUBPROBLEMS")) if kind == "conquering" else None
        return PromptInfo(kind, m.group("REPLACE"), group)
    return None
