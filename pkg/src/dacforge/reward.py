"""Division and conquering reward assignment."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

from .parse import SubproblemGroup


class RewardError(ValueError):
    pass


@dataclass(frozen=True)
class ConquerOutcome:
    correct: bool
    truncated: bool = False
    coverage_ok: bool | None = None

    def __post_init__(self):
        # a clipped response has no trustworthy final answer
        if self.truncated and self.correct:
            object.__setattr__(self, "correct", False)


@dataclass(frozen=True)
class DivisionRewardInput:
    group: SubproblemGroup
    n_s_min: int
    group_outcomes: Sequence[ConquerOutcome] = field(default_factory=tuple)
    sibling_any_correct: bool = False
    expected_conquers: int | None = None

    def __post_init__(self):
        if self.n_s_min < 1:
            raise RewardError("n_s_min must be >= 1")
        if self.expected_conquers is not None and len(self.group_outcomes) != self.expected_conquers:
            raise RewardError(
                f"expected {self.expected_conquers} conquer outcomes, got {len(self.group_outcomes)}"
            )


def conquer_reward(outcome: ConquerOutcome, format_constraint: bool = False) -> int:
    if format_constraint:
        if outcome.coverage_ok is None:
            raise RewardError("format constraint requested but coverage was not checked")
        return int(outcome.correct and outcome.coverage_ok)
    return int(outcome.correct)


def conquer_accuracy(outcomes: Sequence[ConquerOutcome]) -> float:
    if not outcomes:
        raise RewardError("conquer accuracy of an empty outcome list")
    return sum(o.correct for o in outcomes) / len(outcomes)


def _structurally_ok(inp: DivisionRewardInput) -> bool:
    return inp.group.format_valid and len(inp.group.subproblems) >= inp.n_s_min


def division_reward(inp: DivisionRewardInput) -> int:
    """Binary division reward.

    Zero for malformed groups or groups with fewer than ``n_s_min`` subproblems.
    Zero when none of this group's conquers is correct while some sibling group
    of the same problem produced a correct one. One otherwise, including when no
    group at all succeeded.
    """
    if not _structurally_ok(inp):
        return 0
    own_zero = not any(o.correct for o in inp.group_outcomes)
    if own_zero and inp.sibling_any_correct:
        return 0
    return 1


def division_reward_accuracy_variant(inp: DivisionRewardInput) -> float:
    """Conquer accuracy as division reward; kept to reproduce the premature-solving failure."""
    if not _structurally_ok(inp):
        return 0.0
    if not inp.group_outcomes:
        return 0.0
    return conquer_accuracy(inp.group_outcomes)


DIVISION_REWARD_MODES = {
    "binary": division_reward,
    "accuracy": division_reward_accuracy_variant,
}
