"""Divide-and-conquer rollout loop, group-relative advantages and experience export.

One iteration, per problem: sample ``g_d`` divisions, parse them, sample ``g_c``
conquering responses for every well-formed group, score both kinds, and
normalize rewards within each sampling group. Parameter updates happen
elsewhere; the exported JSON Lines file is the hand-off to a trainer.
"""

from __future__ import annotations

import json
import logging
import math
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .corpus import Problem
from .parse import SubproblemGroup, check_subproblem_coverage, extract_boxed_answer, parse_subproblems
from .policy import Backend, BackendError, Completion, GenerationRequest, derive_seed, generate
from .prompts import render_conquering_prompt, render_cot_prompt, render_division_prompt
from .reward import DIVISION_REWARD_MODES, ConquerOutcome, DivisionRewardInput, conquer_reward

logger = logging.getLogger(__name__)

KIND_ORDER = {"division": 0, "conquering": 1, "cot": 2}
ZERO_STD = 1e-8


class IterationError(RuntimeError):
    def __init__(self, message: str, completed: Sequence[str] = (), failed: str | None = None):
        super().__init__(message)
        self.completed = list(completed)
        self.failed = failed


@dataclass(frozen=True)
class IterationConfig:
    g_d: int = 4
    g_c: int = 8
    n_s: int = 3
    batch_size: int = 256
    max_tokens: int = 8192
    temperature: float = 1.0
    top_p: float = 1.0
    eps_low: float = 0.2
    eps_high: float = 0.28
    beta: float = 0.0
    t_acc: float | None = None
    cot_group_size: int = 8
    format_constraint: bool = False
    division_reward_mode: str = "binary"
    max_subproblems: int = 16
    seed: int = 0

    def __post_init__(self):
        for name in ("g_d", "g_c", "n_s", "batch_size", "max_tokens", "cot_group_size", "max_subproblems"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0 < self.eps_low <= self.eps_high:
            raise ValueError("need eps_high >= eps_low > 0")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.t_acc is not None and not 0.0 <= self.t_acc <= 1.0:
            raise ValueError("t_acc must lie in [0, 1]")
        if self.division_reward_mode not in DIVISION_REWARD_MODES:
            raise ValueError(f"division_reward_mode must be one of {sorted(DIVISION_REWARD_MODES)}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_mapping(cls, values: Mapping) -> "IterationConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        return cls(**values)


@dataclass
class RolloutRecord:
    problem_id: str
    kind: str
    prompt: str
    response: str
    reward: float
    truncated: bool
    group_index: int | None
    sample_index: int
    token_count: int = 0
    token_logprobs: tuple[float, ...] | None = None
    advantage: float | None = None

    @property
    def group_key(self) -> tuple[str, str, int | None]:
        # divisions of one problem form one group; conquers form one group per subproblem group
        return (self.problem_id, self.kind, self.group_index if self.kind == "conquering" else None)

    def sort_key(self) -> tuple:
        return (KIND_ORDER[self.kind], -1 if self.group_index is None else self.group_index, self.sample_index)

    def to_json(self, iteration: int) -> dict:
        out = {
            "iteration": iteration,
            "problem_id": self.problem_id,
            "kind": self.kind,
            "group_index": self.group_index,
            "sample_index": self.sample_index,
            "prompt": self.prompt,
            "response": self.response,
            "reward": self.reward,
            "advantage": self.advantage,
            "truncated": self.truncated,
        }
        if self.token_logprobs is not None:
            out["token_logprobs"] = list(self.token_logprobs)
        return out


@dataclass
class ExperienceBatch:
    records: list[RolloutRecord]
    iteration: int
    config: dict
    metrics: dict = field(default_factory=dict)

    def by_problem(self) -> dict[str, list[RolloutRecord]]:
        out: dict[str, list[RolloutRecord]] = {}
        for r in self.records:
            out.setdefault(r.problem_id, []).append(r)
        return out


# ---------------------------------------------------------------------------
# advantages and surrogate objective


def grpo_advantages(rewards: Sequence[float]) -> list[float]:
    """Group-normalized rewards ``(r - mean) / std`` with population std.

    A group whose std is below 1e-8 carries no signal and gets all zeros.
    """
    if len(rewards) == 0:
        raise ValueError("cannot normalize an empty reward group")
    r = np.asarray(rewards, dtype=np.float64)
    std = r.std()
    if std < ZERO_STD:
        return [0.0] * len(r)
    return [float(a) for a in (r - r.mean()) / std]


def assign_advantages(records: Iterable[RolloutRecord]) -> None:
    groups: dict[tuple, list[RolloutRecord]] = {}
    for rec in records:
        groups.setdefault(rec.group_key, []).append(rec)
    for members in groups.values():
        for rec, adv in zip(members, grpo_advantages([m.reward for m in members])):
            rec.advantage = adv


def _per_token(values, lengths: Sequence[int]) -> np.ndarray:
    pieces = []
    for v, n in zip(values, lengths):
        if np.ndim(v) == 0:
            pieces.append(np.full(n, float(v)))
        else:
            v = np.asarray(v, dtype=np.float64)
            if len(v) != n:
                raise ValueError(f"advantage length {len(v)} does not match sequence length {n}")
            pieces.append(v)
    return np.concatenate(pieces) if pieces else np.zeros(0)


def surrogate_objective(
    old_logprobs: Sequence[Sequence[float]],
    new_logprobs: Sequence[Sequence[float]],
    advantages: Sequence,
    eps_low: float = 0.2,
    eps_high: float = 0.28,
    beta: float = 0.0,
    ref_logprobs: Sequence[Sequence[float]] | None = None,
) -> float:
    """Token-level clipped surrogate averaged over every token of the batch.

    ``advantages`` holds one entry per sequence, either a scalar broadcast over
    its tokens or a per-token list. The ratio is clipped to
    ``[1 - eps_low, 1 + eps_high]``. With ``beta > 0`` the k3 KL estimate against
    ``ref_logprobs`` is subtracted per token.
    """
    if not (len(old_logprobs) == len(new_logprobs) == len(advantages)):
        raise ValueError("old_logprobs, new_logprobs and advantages must have one entry per sequence")
    lengths = []
    for old, new in zip(old_logprobs, new_logprobs):
        if len(old) != len(new):
            raise ValueError(f"sequence length mismatch: {len(old)} old vs {len(new)} new log-probabilities")
        lengths.append(len(old))
    if sum(lengths) == 0:
        raise ValueError("no tokens to average over")
    old = np.concatenate([np.asarray(x, dtype=np.float64) for x in old_logprobs])
    new = np.concatenate([np.asarray(x, dtype=np.float64) for x in new_logprobs])
    adv = _per_token(advantages, lengths)
    ratio = np.exp(new - old)
    per_token = np.minimum(ratio * adv, np.clip(ratio, 1.0 - eps_low, 1.0 + eps_high) * adv)
    if beta:
        if ref_logprobs is None:
            raise ValueError("beta > 0 needs reference log-probabilities")
        ref = np.concatenate([np.asarray(x, dtype=np.float64) for x in ref_logprobs])
        if len(ref) != len(new):
            raise ValueError("reference log-probabilities do not cover every token")
        log_ratio = ref - new
        per_token = per_token - beta * (np.exp(log_ratio) - log_ratio - 1.0)
    return float(per_token.mean())


def monitor_surrogate(
    batch: ExperienceBatch,
    scorer: Callable[[str, str], Sequence[float]],
    eps_low: float | None = None,
    eps_high: float | None = None,
) -> float | None:
    """Surrogate value of ``batch`` under a newer policy snapshot given by ``scorer``.

    Records exported without log-probabilities are left out; None if none have them.
    """
    eps_low = batch.config.get("eps_low", 0.2) if eps_low is None else eps_low
    eps_high = batch.config.get("eps_high", 0.28) if eps_high is None else eps_high
    old, new, adv = [], [], []
    for rec in batch.records:
        if rec.token_logprobs is None or rec.token_count == 0:
            continue
        old.append(rec.token_logprobs)
        new.append(list(scorer(rec.prompt, rec.response)))
        adv.append(rec.advantage or 0.0)
    if not old:
        return None
    return surrogate_objective(old, new, adv, eps_low, eps_high)


# ---------------------------------------------------------------------------
# rollouts


def _request(config: IterationConfig, prompt: str, n: int, seed: int) -> GenerationRequest:
    return GenerationRequest(
        prompt=prompt,
        n=n,
        temperature=config.temperature,
        top_p=config.top_p,
        max_tokens=config.max_tokens,
        seed=seed,
    )


def _record(problem: Problem, kind: str, prompt: str, c: Completion, reward: float, group, sample) -> RolloutRecord:
    return RolloutRecord(
        problem_id=problem.id,
        kind=kind,
        prompt=prompt,
        response=c.text,
        reward=float(reward),
        truncated=c.truncated,
        group_index=group,
        sample_index=sample,
        token_count=c.token_count,
        token_logprobs=c.token_logprobs,
    )


def judge(problem: Problem, completion: Completion, n_g: int | None = None) -> ConquerOutcome:
    """Score one answer-bearing response against the reference answer."""
    value = extract_boxed_answer(completion.text).value
    coverage = check_subproblem_coverage(completion.text, n_g) if n_g else None
    return ConquerOutcome(
        correct=value is not None and value == problem.answer and not completion.truncated,
        truncated=completion.truncated,
        coverage_ok=coverage,
    )


def sample_divisions(
    problem: Problem, config: IterationConfig, backend: Backend, iteration: int = 0, n: int | None = None
) -> tuple[str, list[Completion], list[SubproblemGroup]]:
    prompt = render_division_prompt(problem)
    seed = derive_seed(config.seed, iteration, problem.id, "division", 0)
    completions = generate(backend, _request(config, prompt, n or config.g_d, seed))
    groups = []
    for c in completions:
        group = parse_subproblems(c.text, config.max_subproblems)
        if c.truncated and group.format_valid:
            # a clipped division may have lost trailing subproblems
            group = SubproblemGroup(group.subproblems, False, group.raw)
        groups.append(group)
    return prompt, completions, groups


def sample_conquers(
    problem: Problem,
    group: SubproblemGroup,
    group_index: int,
    config: IterationConfig,
    backend: Backend,
    iteration: int = 0,
    n: int | None = None,
) -> tuple[str, list[Completion]]:
    prompt = render_conquering_prompt(problem, group)
    seed = derive_seed(config.seed, iteration, problem.id, "conquering", group_index)
    return prompt, generate(backend, _request(config, prompt, n or config.g_c, seed))


def dac_problem_records(
    problem: Problem, config: IterationConfig, backend: Backend, iteration: int = 0
) -> list[RolloutRecord]:
    """All division and conquering records for one problem, rewards filled in."""
    d_prompt, d_completions, groups = sample_divisions(problem, config, backend, iteration)
    division_fn = DIVISION_REWARD_MODES[config.division_reward_mode]

    conquer_records: list[RolloutRecord] = []
    outcomes_by_group: dict[int, list[ConquerOutcome]] = {}
    for g, group in enumerate(groups):
        if not group.format_valid:
            continue
        c_prompt, completions = sample_conquers(problem, group, g, config, backend, iteration)
        rewarded = []
        for v, c in enumerate(completions):
            outcome = judge(problem, c, len(group) if config.format_constraint else None)
            r = conquer_reward(outcome, config.format_constraint)
            conquer_records.append(_record(problem, "conquering", c_prompt, c, r, g, v))
            rewarded.append(ConquerOutcome(correct=bool(r), truncated=c.truncated))
        outcomes_by_group[g] = rewarded

    any_correct = any(o.correct for outs in outcomes_by_group.values() for o in outs)
    division_records = []
    for g, (c, group) in enumerate(zip(d_completions, groups)):
        inp = DivisionRewardInput(
            group=group,
            n_s_min=config.n_s,
            group_outcomes=tuple(outcomes_by_group.get(g, ())),
            sibling_any_correct=any_correct,
            expected_conquers=config.g_c if group.format_valid else None,
        )
        division_records.append(_record(problem, "division", d_prompt, c, division_fn(inp), g, g))
    return division_records + conquer_records


def cot_problem_records(
    problem: Problem, config: IterationConfig, backend: Backend, iteration: int = 0
) -> list[RolloutRecord]:
    prompt = render_cot_prompt(problem)
    seed = derive_seed(config.seed, iteration, problem.id, "cot", 0)
    completions = generate(backend, _request(config, prompt, config.cot_group_size, seed))
    return [
        _record(problem, "cot", prompt, c, conquer_reward(judge(problem, c)), None, v)
        for v, c in enumerate(completions)
    ]


def _mix_problem_records(
    problem: Problem, config: IterationConfig, backend: Backend, iteration: int = 0
) -> list[RolloutRecord]:
    cot = cot_problem_records(problem, config, backend, iteration)
    accuracy = sum(r.reward for r in cot) / len(cot)
    if accuracy < config.t_acc:
        logger.debug("problem %s: direct accuracy %.3f < %.3f, switching to divide-and-conquer", problem.id, accuracy, config.t_acc)
        return dac_problem_records(problem, config, backend, iteration)
    return cot


def _run(
    problems: Sequence[Problem],
    per_problem: Callable[[Problem], list[RolloutRecord]],
    parallel: int,
) -> list[list[RolloutRecord]]:
    if not problems:
        raise ValueError("empty problem batch")
    ids = [p.id for p in problems]
    if len(set(ids)) != len(ids):
        raise ValueError("problem ids in a batch must be unique")
    with ThreadPoolExecutor(max_workers=max(1, parallel)) as pool:
        futures = [pool.submit(per_problem, p) for p in problems]
        results = []
        for p, fut in zip(problems, futures):
            try:
                results.append(fut.result())
            except (BackendError, ValueError) as exc:
                for f in futures:
                    f.cancel()
                completed = [q.id for q, f in zip(problems, futures) if f.done() and not f.cancelled() and f.exception() is None]
                raise IterationError(
                    f"iteration aborted on problem {p.id!r}: {exc}; {len(completed)} of {len(problems)} problems had finished",
                    completed=completed,
                    failed=p.id,
                ) from exc
    return results


def batch_metrics(records: Sequence[RolloutRecord]) -> dict:
    n = len(records)
    out = {
        "records": n,
        "mean_response_tokens": sum(r.token_count for r in records) / n if n else 0.0,
        "clip_ratio": sum(r.truncated for r in records) / n if n else 0.0,
        "mean_entropy": None,
    }
    if n and all(r.token_logprobs is not None for r in records):
        total = sum(len(r.token_logprobs) for r in records)
        if total:
            # sampled-token negative log-likelihood, an estimate of per-token entropy at temperature 1
            out["mean_entropy"] = -sum(math.fsum(r.token_logprobs) for r in records) / total
    for kind in KIND_ORDER:
        rewards = [r.reward for r in records if r.kind == kind]
        if rewards:
            out[f"{kind}_records"] = len(rewards)
            out[f"{kind}_mean_reward"] = sum(rewards) / len(rewards)
    return out


def _finish(per_problem: list[list[RolloutRecord]], config: IterationConfig, iteration: int) -> ExperienceBatch:
    records: list[RolloutRecord] = []
    for recs in per_problem:
        records.extend(sorted(recs, key=RolloutRecord.sort_key))
    assign_advantages(records)
    metrics = batch_metrics(records)
    metrics["valid_groups"] = len({(r.problem_id, r.group_index) for r in records if r.kind == "conquering"})
    return ExperienceBatch(records=records, iteration=iteration, config=config.to_dict(), metrics=metrics)


def run_dac_iteration(
    problems: Sequence[Problem],
    config: IterationConfig,
    backend: Backend,
    iteration: int = 0,
    parallel: int = 1,
) -> ExperienceBatch:
    results = _run(problems, lambda p: dac_problem_records(p, config, backend, iteration), parallel)
    return _finish(results, config, iteration)


def run_mix_iteration(
    problems: Sequence[Problem],
    config: IterationConfig,
    backend: Backend,
    iteration: int = 0,
    parallel: int = 1,
) -> ExperienceBatch:
    """Direct rollouts first; problems under ``t_acc`` accuracy are redone divide-and-conquer style."""
    if config.t_acc is None:
        raise ValueError("mixed iteration needs t_acc")
    results = _run(problems, lambda p: _mix_problem_records(p, config, backend, iteration), parallel)
    batch = _finish(results, config, iteration)
    batch.metrics["routed_to_dac"] = [
        recs[0].problem_id for recs in results if recs and recs[0].kind != "cot"
    ]
    return batch


# ---------------------------------------------------------------------------
# export


def _dumps(obj) -> str:
    return json.dumps(obj, ensure_ascii=False, allow_nan=False)


def export_batch(batch: ExperienceBatch, path: str | Path) -> Path:
    """Write one header line plus one JSON object per record, atomically."""
    if not batch.records:
        raise ValueError("refusing to export an empty batch")
    if any(r.advantage is None for r in batch.records):
        raise ValueError("advantages have not been computed for every record")
    path = Path(path)
    header = {
        "type": "header",
        "iteration": batch.iteration,
        "seed": batch.config.get("seed"),
        "record_count": len(batch.records),
        "config": batch.config,
        "metrics": batch.metrics,
        "advantage_scope": "divisions per problem; conquers per subproblem group; direct answers per problem",
        "trainer_notes": "records carry no loss weights; epochs per batch and mini-batching are left to the trainer",
    }
    lines = [_dumps(header)] + [_dumps(r.to_json(batch.iteration)) for r in batch.records]
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_batch(path: str | Path) -> ExperienceBatch:
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        records = []
        for line in fh:
            d = json.loads(line)
            lp = d.get("token_logprobs")
            records.append(
                RolloutRecord(
                    problem_id=d["problem_id"],
                    kind=d["kind"],
                    prompt=d["prompt"],
                    response=d["response"],
                    reward=d["reward"],
                    truncated=d["truncated"],
                    group_index=d["group_index"],
                    sample_index=d["sample_index"],
                    token_count=len(lp) if lp is not None else 0,
                    token_logprobs=tuple(lp) if lp is not None else None,
                    advantage=d["advantage"],
                )
            )
    return ExperienceBatch(records=records, iteration=header["iteration"], config=header["config"], metrics=header["metrics"])
