"""Divide-and-conquer reinforcement learning for math reasoning: prompts, parsing,
rewards, rollout orchestration, evaluation and a covariance simulator."""

from .corpus import Corpus, CorpusError, LoadReport, Problem, canonicalize_answer, filter_by_difficulty, load_corpus
from .engine import (
    ExperienceBatch,
    IterationConfig,
    IterationError,
    RolloutRecord,
    export_batch,
    grpo_advantages,
    load_batch,
    run_dac_iteration,
    run_mix_iteration,
    surrogate_objective,
)
from .eval import AllocationPlan, evaluate, pass_at_k, run_allocation_sweep
from .parse import SubproblemGroup, check_subproblem_coverage, extract_boxed_answer, parse_subproblems
from .prompts import identify_prompt, render_conquering_prompt, render_cot_prompt, render_division_prompt
from .reward import ConquerOutcome, DivisionRewardInput, conquer_reward, division_reward

__version__ = "0.1.0"
