"""Pass@k estimation and rollout-budget allocation sweeps."""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .corpus import Problem
from .engine import IterationConfig, judge, sample_conquers, sample_divisions
from .policy import Backend, GenerationRequest, derive_seed, generate
from .prompts import render_cot_prompt

EVAL_DEFAULTS = {"temperature": 1.0, "top_p": 0.7, "max_tokens": 16384}
CSV_COLUMNS = ("benchmark", "plan", "pass_at_1", "pass_at_k", "n", "k")


@dataclass(frozen=True)
class PassKEstimate:
    n: int
    c: int
    k: int
    value: float


def _check(n: int, c: int, k: int) -> None:
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if not 0 <= c <= n:
        raise ValueError(f"need 0 <= c <= n, got c={c}, n={n}")
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= n, got k={k}, n={n}")


def pass_at_k(n: int, c: int, k: int) -> float:
    """Unbiased pass@k, ``1 - C(n-c, k) / C(n, k)``, via the overflow-free product form."""
    _check(n, c, k)
    if n - c < k:
        return 1.0
    miss = math.prod(1.0 - k / i for i in range(n - c + 1, n + 1))
    return min(1.0, max(0.0, 1.0 - miss))


def estimate(n: int, c: int, k: int) -> PassKEstimate:
    return PassKEstimate(n, c, k, pass_at_k(n, c, k))


def pass_at_1_avg(outcome_matrix: Sequence[Sequence[bool]]) -> float:
    """Mean over problems of each problem's fraction of correct samples."""
    if not outcome_matrix:
        raise ValueError("no problems to average over")
    per_problem = []
    for outcomes in outcome_matrix:
        if len(outcomes) == 0:
            raise ValueError("every problem needs at least one outcome")
        per_problem.append(sum(bool(o) for o in outcomes) / len(outcomes))
    return sum(per_problem) / len(per_problem)


def mean_pass_at_k(outcome_matrix: Sequence[Sequence[bool]], k: int) -> float:
    values = [pass_at_k(len(o), sum(bool(x) for x in o), k) for o in outcome_matrix]
    return sum(values) / len(values)


@dataclass(frozen=True)
class AllocationPlan:
    """``n_groups`` divisions with ``m_per_group`` conquers each; ``n_groups=0`` means
    ``m_per_group`` direct answers instead."""

    n_groups: int
    m_per_group: int

    def __post_init__(self):
        if self.n_groups < 0 or self.m_per_group < 1:
            raise ValueError("need n_groups >= 0 and m_per_group >= 1")

    @property
    def k(self) -> int:
        return self.m_per_group if self.n_groups == 0 else self.n_groups * self.m_per_group

    @property
    def label(self) -> str:
        return f"cot@{self.k}" if self.n_groups == 0 else f"{self.n_groups}x{self.m_per_group}"


@dataclass(frozen=True)
class ResultRow:
    benchmark: str
    plan: str
    pass_at_1: float
    pass_at_k: float
    n: int
    k: int

    def as_tuple(self) -> tuple:
        return (self.benchmark, self.plan, self.pass_at_1, self.pass_at_k, self.n, self.k)


def _eval_config(config: IterationConfig | None) -> IterationConfig:
    return config if config is not None else IterationConfig(**EVAL_DEFAULTS)


def _cot_outcomes(problem: Problem, backend: Backend, config: IterationConfig, n: int, tag: str) -> list[bool]:
    prompt = render_cot_prompt(problem)
    request = GenerationRequest(
        prompt=prompt,
        n=n,
        temperature=config.temperature,
        top_p=config.top_p,
        max_tokens=config.max_tokens,
        seed=derive_seed(config.seed, tag, problem.id, "cot", 0),
    )
    return [judge(problem, c).correct for c in generate(backend, request)]


def _dac_outcomes(problem: Problem, backend: Backend, config: IterationConfig, groups: int, m: int, tag: str) -> list[bool]:
    _, _, parsed = sample_divisions(problem, config, backend, iteration=tag, n=groups)
    outcomes: list[bool] = []
    for g, group in enumerate(parsed):
        if not group.format_valid:
            outcomes.extend([False] * m)  # budget spent, nothing to conquer
            continue
        _, completions = sample_conquers(problem, group, g, config, backend, iteration=tag, n=m)
        outcomes.extend(judge(problem, c).correct for c in completions)
    return outcomes


def _outcomes_for_plan(problems, backend, config, plan: AllocationPlan, tag: str, parallel: int) -> list[list[bool]]:
    def one(problem: Problem) -> list[bool]:
        if plan.n_groups == 0:
            return _cot_outcomes(problem, backend, config, plan.k, tag)
        return _dac_outcomes(problem, backend, config, plan.n_groups, plan.m_per_group, tag)

    with ThreadPoolExecutor(max_workers=max(1, parallel)) as pool:
        return list(pool.map(one, problems))


def run_allocation_sweep(
    problems: Sequence[Problem],
    backend: Backend,
    plans: Sequence[AllocationPlan],
    config: IterationConfig | None = None,
    benchmark: str = "benchmark",
    parallel: int = 1,
) -> list[ResultRow]:
    """Solve rate per plan: a problem counts as solved if any of its k answers is correct."""
    if not plans:
        raise ValueError("no allocation plans given")
    budgets = {p.k for p in plans}
    if len(budgets) != 1:
        raise ValueError(f"all plans must share one budget k, got {sorted(budgets)}")
    if not problems:
        raise ValueError("no problems to evaluate")
    config = _eval_config(config)
    rows = []
    for plan in plans:
        matrix = _outcomes_for_plan(problems, backend, config, plan, f"sweep:{plan.label}", parallel)
        solved = sum(any(o) for o in matrix) / len(matrix)
        rows.append(ResultRow(benchmark, plan.label, pass_at_1_avg(matrix), solved, plan.k, plan.k))
    return rows


def evaluate(
    problems: Sequence[Problem],
    backend: Backend,
    mode: str,
    n_samples: int,
    k_list: Sequence[int],
    config: IterationConfig | None = None,
    benchmark: str = "benchmark",
    groups: int | None = None,
    parallel: int = 1,
) -> list[ResultRow]:
    """Average pass@1 and unbiased pass@k per k from ``n_samples`` answers per problem.

    In ``dac`` mode the samples come from ``groups`` divisions with
    ``n_samples // groups`` conquers each (default: one conquer per division).
    """
    if mode not in ("cot", "dac"):
        raise ValueError(f"mode must be 'cot' or 'dac', got {mode!r}")
    bad = [k for k in k_list if not 1 <= k <= n_samples]
    if bad:
        raise ValueError(f"k values {bad} not in 1..n_samples={n_samples}")
    config = _eval_config(config)
    if mode == "cot":
        plan = AllocationPlan(0, n_samples)
    else:
        groups = groups or n_samples
        if n_samples % groups:
            raise ValueError(f"n_samples={n_samples} is not divisible by groups={groups}")
        plan = AllocationPlan(groups, n_samples // groups)
    matrix = _outcomes_for_plan(problems, backend, config, plan, f"eval:{mode}", parallel)
    p1 = pass_at_1_avg(matrix)
    return [ResultRow(benchmark, f"{mode}:{plan.label}", p1, mean_pass_at_k(matrix, k), n_samples, k) for k in k_list]


def format_table(rows: Sequence[ResultRow]) -> str:
    header = CSV_COLUMNS
    cells = [header] + [
        (r.benchmark, r.plan, f"{r.pass_at_1:.4f}", f"{r.pass_at_k:.4f}", str(r.n), str(r.k)) for r in rows
    ]
    widths = [max(len(row[i]) for row in cells) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in cells]
    return "\n".join(lines) + "\n"


def rows_to_csv(rows: Sequence[ResultRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in rows:
        writer.writerow((r.benchmark, r.plan, repr(r.pass_at_1), repr(r.pass_at_k), r.n, r.k))
    return buf.getvalue()


def write_csv(rows: Sequence[ResultRow], path: str | Path) -> Path:
    path = Path(path)
    path.write_text(rows_to_csv(rows), encoding="utf-8")
    return path
