"""One test per acceptance criterion; the conftest prints a PASS/FAIL line for each."""

import itertools
import json
import math
import time
from fractions import Fraction

import numpy as np
import pytest

from dacforge import cli
from dacforge.corpus import Problem
from dacforge.engine import (
    IterationConfig,
    dac_problem_records,
    export_batch,
    grpo_advantages,
    judge,
    run_mix_iteration,
    surrogate_objective,
)
from dacforge.eval import pass_at_k
from dacforge.oracle import closed_form_covariance, estimate_covariance
from dacforge.parse import SubproblemGroup, extract_boxed_answer, parse_subproblems
from dacforge.policy import Completion, MockBackend, SyntheticPolicyParams
from dacforge.prompts import format_subproblem_block, render_conquering_prompt, render_division_prompt
from dacforge.reward import ConquerOutcome, DivisionRewardInput, conquer_reward, division_reward


class Timer:
    def __init__(self, limit: float):
        self.limit = limit

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.start
        if exc[0] is None:
            assert self.elapsed < self.limit, f"took {self.elapsed:.2f}s, limit {self.limit}s"


# ---------------------------------------------------------------------------
# 1


# (format_valid, enough_subproblems, own_accuracy_zero, sibling_any_correct) -> reward, evaluated by hand
DIVISION_TRUTH_TABLE = {
    (False, False, False, False): 0,
    (False, False, False, True): 0,
    (False, False, True, False): 0,
    (False, False, True, True): 0,
    (False, True, False, False): 0,
    (False, True, False, True): 0,
    (False, True, True, False): 0,
    (False, True, True, True): 0,
    (True, False, False, False): 0,
    (True, False, False, True): 0,
    (True, False, True, False): 0,
    (True, False, True, True): 0,
    (True, True, False, False): 1,
    (True, True, False, True): 1,
    (True, True, True, False): 1,
    (True, True, True, True): 0,
}


@pytest.mark.acceptance(1, "division reward truth table, 16 cases, exact")
def test_ac1_division_reward_truth_table():
    n_s = 3
    with Timer(1.0):
        assert len(DIVISION_TRUTH_TABLE) == 16
        for (valid, enough, acc_zero, sibling), expected in DIVISION_TRUTH_TABLE.items():
            texts = ["first", "second", "third"] if enough else ["first", "second"]
            group = SubproblemGroup(tuple(texts), valid, "")
            outcomes = [ConquerOutcome(correct=False) for _ in range(8)]
            if not acc_zero:
                outcomes[3] = ConquerOutcome(correct=True)
            inp = DivisionRewardInput(group, n_s, tuple(outcomes), sibling_any_correct=sibling)
            got = division_reward(inp)
            assert got == expected, (valid, enough, acc_zero, sibling)


# ---------------------------------------------------------------------------
# 2


def _enumerated_pass_at_k(n: int, c: int, k: int) -> Fraction:
    # items 0..c-1 are the correct samples
    subsets = list(itertools.combinations(range(n), k))
    hits = sum(1 for s in subsets if any(i < c for i in s))
    return Fraction(hits, len(subsets))


@pytest.mark.acceptance(2, "pass@k equals subset enumeration for n<=10; pass@32 at k=32 is 1{c>0}")
def test_ac2_pass_at_k_exact():
    with Timer(1.0):
        cases = 0
        for n in range(1, 11):
            for c in range(0, n + 1):
                for k in range(1, n + 1):
                    exact = _enumerated_pass_at_k(n, c, k)
                    assert abs(pass_at_k(n, c, k) - float(exact)) < 1e-12, (n, c, k)
                    cases += 1
        assert cases >= 220
        for c in range(0, 33):
            assert pass_at_k(32, c, 32) == (1.0 if c > 0 else 0.0)


# ---------------------------------------------------------------------------
# 3


@pytest.mark.acceptance(3, "group advantages: zero sum, unit std, all-zero for constant groups")
def test_ac3_grpo_advantage_law():
    rng = np.random.default_rng(20240601)
    with Timer(1.0):
        constant_groups = 0
        abs_sums = []
        for trial in range(1000):
            size = int(rng.integers(1, 65))
            kind = trial % 4
            if kind == 0:
                rewards = rng.integers(0, 2, size).astype(float)
            elif kind == 1:
                rewards = rng.random(size)
            elif kind == 2:
                rewards = np.full(size, float(rng.integers(0, 2)))
            else:
                rewards = rng.normal(3.0, 10.0, size)
            adv = np.asarray(grpo_advantages(rewards.tolist()))
            assert adv.shape == (size,)
            if rewards.std() < 1e-8:
                constant_groups += 1
                assert np.all(adv == 0.0)
            else:
                assert abs(adv.std() - 1.0) < 1e-6
            abs_sums.append(abs(adv.sum()))
            assert abs(adv.sum()) < 1e-9
        assert np.mean(abs_sums) < 1e-9
        assert constant_groups >= 250


# ---------------------------------------------------------------------------
# 4


def _naive_surrogate(old, new, adv, eps_low=0.2, eps_high=0.28):
    total = []
    for seq_old, seq_new, a in zip(old, new, adv):
        for t in range(len(seq_old)):
            a_t = a[t] if isinstance(a, list) else a
            ratio = math.exp(seq_new[t] - seq_old[t])
            if ratio < 1 - eps_low:
                clipped = 1 - eps_low
            elif ratio > 1 + eps_high:
                clipped = 1 + eps_high
            else:
                clipped = ratio
            total.append(min(ratio * a_t, clipped * a_t))
    return math.fsum(total) / len(total)


def _random_case(rng, max_seqs, min_len, max_len, per_token):
    n = int(rng.integers(1, max_seqs + 1))
    old, new, adv = [], [], []
    for _ in range(n):
        length = int(rng.integers(min_len, max_len + 1))
        o = (-rng.exponential(1.0, length)).tolist()
        d = rng.normal(0.0, 0.4, length).tolist()
        old.append(o)
        new.append([x + y for x, y in zip(o, d)])
        if per_token and rng.random() < 0.5:
            adv.append(rng.normal(0.0, 1.5, length).tolist())
        else:
            adv.append(float(rng.normal(0.0, 1.5)))
    return old, new, adv


@pytest.mark.acceptance(4, "clipped surrogate matches a naive per-token evaluator, asymmetric clip")
def test_ac4_surrogate_vs_naive():
    rng = np.random.default_rng(7)
    ratios = []
    with Timer(1.0):
        for _ in range(50):
            old, new, adv = _random_case(rng, 8, 1, 1, per_token=False)
            got = surrogate_objective(old, new, adv, eps_low=0.2, eps_high=0.28)
            assert abs(got - _naive_surrogate(old, new, adv)) < 1e-12
            ratios += [math.exp(n[0] - o[0]) for o, n in zip(old, new)]
        for _ in range(20):
            old, new, adv = _random_case(rng, 6, 2, 30, per_token=True)
            got = surrogate_objective(old, new, adv, eps_low=0.2, eps_high=0.28)
            assert abs(got - _naive_surrogate(old, new, adv)) < 1e-12
        # both clip edges were exercised
        assert min(ratios) < 0.8 and max(ratios) > 1.28
        # a ratio of 1.25 with positive advantage is inside the upper bound only because it is 0.28, not 0.2
        lp = math.log(1.25)
        assert surrogate_objective([[0.0]], [[lp]], [1.0]) == pytest.approx(1.25, abs=1e-12)
        assert surrogate_objective([[0.0]], [[lp]], [1.0], eps_low=0.2, eps_high=0.2) == pytest.approx(1.2, abs=1e-12)


# ---------------------------------------------------------------------------
# 5


def _enumerated_covariance(m, p, success):
    out = []
    configs = list(itertools.product((0, 1), repeat=m))
    weight = [math.prod(p if b else 1 - p for b in s) for s in configs]
    e_c = math.fsum(w * success(s) for w, s in zip(weight, configs))
    for i in range(m):
        e_sc = math.fsum(w * success(s) for w, s in zip(weight, configs) if s[i])
        out.append(e_sc - p * e_c)
    return out


def _random_monotone_params(rng, m):
    p = float(rng.uniform(0.05, 0.95))
    if rng.random() < 0.7:
        return SyntheticPolicyParams(m, p, tuple(np.sort(rng.random(m + 1))))
    # per-configuration table, nondecreasing in every coordinate: a CDF of a nonnegative weighted sum
    w = rng.exponential(1.0, m)
    idx = np.arange(2**m)
    scores = ((idx[:, None] >> np.arange(m)) & 1) @ w
    table = 1.0 / (1.0 + np.exp(-(scores - w.sum() / 2)))
    return SyntheticPolicyParams(m, p, tuple(np.sort(rng.random(m + 1))), g_vector=tuple(table))


@pytest.mark.acceptance(5, "subproblem/final covariance is nonnegative; Monte Carlo agrees within 4 SE")
def test_ac5_covariance_lemma():
    rng = np.random.default_rng(11)
    with Timer(30.0):
        for trial in range(100):
            m = int(rng.integers(1, 9))
            params = _random_monotone_params(rng, m)
            exact = closed_form_covariance(params)
            assert all(c >= -1e-12 for c in exact), (params, exact)
            if m <= 6:
                oracle = _enumerated_covariance(m, params.p_sub, lambda s: params.success_prob(s))
                assert np.allclose(exact, oracle, atol=1e-12)
            report = estimate_covariance(params, samples=100_000, seed=trial)
            for est, se, truth in zip(report.cov_estimates, report.std_errors, exact):
                if se == 0:
                    assert abs(est - truth) < 1e-12
                else:
                    assert abs(est - truth) <= 4 * se, (trial, est, truth, se)

        single = SyntheticPolicyParams(1, 0.5, (0.1, 0.9))
        assert closed_form_covariance(single)[0] == pytest.approx(0.2, abs=1e-12)
        report = estimate_covariance(single, samples=100_000, seed=3)
        assert abs(report.cov_estimates[0] - 0.2) < 0.01


# ---------------------------------------------------------------------------
# 6


@pytest.mark.acceptance(6, "division and conquering prompts byte-identical to golden fixtures; round trip")
def test_ac6_prompt_fidelity(fixtures, reciprocal_system):
    statement, subproblems = reciprocal_system
    with Timer(1.0):
        golden_div = (fixtures / "golden_division_prompt.txt").read_bytes()
        golden_con = (fixtures / "golden_conquering_prompt.txt").read_bytes()
        assert render_division_prompt(statement).encode("utf-8") == golden_div
        group = SubproblemGroup.of(subproblems)
        assert render_conquering_prompt(statement, group).encode("utf-8") == golden_con

        back = parse_subproblems(format_subproblem_block(subproblems))
        assert back.format_valid and list(back.subproblems) == subproblems
        response = (fixtures / "reciprocal_system_division.txt").read_text(encoding="utf-8")
        parsed = parse_subproblems(response)
        assert parsed.format_valid and list(parsed.subproblems) == subproblems


# ---------------------------------------------------------------------------
# 7


SYNTHETIC_TOML = """
[synthetic]
m = 4
p_sub = 0.6
g = [0.02, 0.1, 0.3, 0.6, 0.9]
division_quality = [0.3, 0.6, 0.9]
malformed_rate = 0.15
short_division_rate = 0.15
"""


def _iterate(tmp_path, fixtures, tag, parallel):
    cfg = tmp_path / "run.toml"
    cfg.write_text(SYNTHETIC_TOML, encoding="utf-8")
    out = tmp_path / tag
    code = cli.main([
        "iterate", "--config", str(cfg), "--corpus", str(fixtures / "tiny_corpus.jsonl"),
        "--backend", "synthetic", "--gd", "4", "--gc", "8", "--ns", "3", "--seed", "2024",
        "--parallel", str(parallel), "--out", str(out),
    ])
    assert code == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "complete"
    return (out / "step_0001.jsonl").read_bytes()


@pytest.mark.acceptance(7, "end-to-end iteration export is byte-identical across reruns and parallelism")
def test_ac7_end_to_end_determinism(tmp_path, fixtures):
    with Timer(60.0):
        runs = [_iterate(tmp_path, fixtures, f"p1-{i}", 1) for i in range(3)]
        runs += [_iterate(tmp_path, fixtures, f"p8-{i}", 8) for i in range(2)]
        assert all(r == runs[0] for r in runs)

        lines = [json.loads(x) for x in runs[0].decode("utf-8").splitlines()]
        header, records = lines[0], lines[1:]
        assert header["record_count"] == len(records)
        problem_ids = {r["problem_id"] for r in records}
        assert len(problem_ids) == 4
        saw_invalid = False
        for pid in problem_ids:
            mine = [r for r in records if r["problem_id"] == pid]
            divisions = [r for r in mine if r["kind"] == "division"]
            conquers = [r for r in mine if r["kind"] == "conquering"]
            valid = sum(parse_subproblems(d["response"]).format_valid for d in divisions)
            saw_invalid |= valid < 4
            assert len(divisions) == 4
            assert len(conquers) == 8 * valid
            assert len(mine) == 4 + 8 * valid
        assert saw_invalid, "fixture settings should produce at least one malformed division"


# ---------------------------------------------------------------------------
# 8


def _cot(answer, correct, i):
    value = answer if i < correct else str(int(answer) + 1)
    return f"Working it through, attempt {i}.\n\nThe answer is $\\boxed{{{value}}}$."


@pytest.mark.acceptance(8, "mixed routing sends exactly the 0/8 problem to divide-and-conquer at t_acc=0.25")
def test_ac8_mix_routing(tmp_path):
    problems = [
        Problem("zero", "Compute $3 \\cdot 7$.", "21"),
        Problem("two", "Compute $6 \\cdot 7$.", "42"),
        Problem("eight", "Compute $9 \\cdot 7$.", "63"),
    ]
    correct = {"zero": 0, "two": 2, "eight": 8}
    script = {}
    for p in problems:
        script[("cot", p.statement)] = [_cot(p.answer, correct[p.id], i) for i in range(8)]
    division = "\n\n".join(f"<SUBPROBLEM {i}>\nStep {i} of the product.\n</SUBPROBLEM {i}>" for i in (1, 2, 3))
    script[("division", problems[0].statement)] = [division] * 4
    script[("conquering", problems[0].statement)] = [
        f"Subproblem 1, 2 and 3 done. $\\boxed{{{21 if v % 2 else 20}}}$" for v in range(32)
    ]
    backend = MockBackend(script)
    config = IterationConfig(g_d=4, g_c=8, n_s=3, t_acc=0.25, cot_group_size=8)
    with Timer(5.0):
        batch = run_mix_iteration(problems, config, backend, iteration=1)
        path = export_batch(batch, tmp_path / "mix.jsonl")
        records = [json.loads(x) for x in path.read_text().splitlines()[1:]]
        kinds = {p.id: {r["kind"] for r in records if r["problem_id"] == p.id} for p in problems}
        assert kinds["zero"] == {"division", "conquering"}
        assert kinds["two"] == {"cot"}
        assert kinds["eight"] == {"cot"}
        assert batch.metrics["routed_to_dac"] == ["zero"]
        assert backend.remaining() == 0


# ---------------------------------------------------------------------------
# 9


def _hand_solution() -> int:
    # x = ab, y = bc, z = ca:  x + z = 5, x + y = 10, y + z = 13
    total = Fraction(5 + 10 + 13, 2)
    x, y, z = total - 13, total - 5, total - 10
    abc = Fraction(math.isqrt(int(x * y * z)))
    assert abc * abc == x * y * z
    a, b, c = abc / y, abc / z, abc / x
    assert (5 / a, 10 / b, 13 / c) == (b + c, c + a, a + b)
    s = a + b + c
    return s.numerator + s.denominator


@pytest.mark.acceptance(9, "worked solution fixture boxes 55, matching the hand derivation; reward 1")
def test_ac9_worked_solution(fixtures, reciprocal_system):
    statement, subproblems = reciprocal_system
    with Timer(1.0):
        expected = _hand_solution()
        assert expected == 55
        text = (fixtures / "reciprocal_system_solution.md").read_text(encoding="utf-8")
        assert extract_boxed_answer(text).value == "55"
        problem = Problem("sys-abc", statement, str(expected))
        assert conquer_reward(judge(problem, Completion(text))) == 1
        assert conquer_reward(judge(problem, Completion(text), len(subproblems)), format_constraint=True) == 1


# ---------------------------------------------------------------------------
# 10


@pytest.mark.acceptance(10, "format-constraint reward flips exactly on missing subproblem mentions")
def test_ac10_format_constraint(fixtures, reciprocal_system):
    statement, subproblems = reciprocal_system
    problem = Problem("sys-abc", statement, "55")
    with_mentions = (fixtures / "reciprocal_system_solution.md").read_text(encoding="utf-8")
    without = (fixtures / "reciprocal_system_solution_no_mentions.md").read_text(encoding="utf-8")
    wrong = with_mentions.replace("\\boxed{55}", "\\boxed{56}")
    n_g = len(subproblems)
    with Timer(1.0):
        table = {
            # text: (reward without constraint, reward with constraint)
            "with": (with_mentions, 1, 1),
            "without": (without, 1, 0),
            "wrong": (wrong, 0, 0),
        }
        for name, (text, plain, constrained) in table.items():
            outcome = judge(problem, Completion(text), n_g)
            assert conquer_reward(outcome) == plain, name
            assert conquer_reward(outcome, format_constraint=True) == constrained, name

        # the same switch applied inside an iteration
        division = (fixtures / "reciprocal_system_division.txt").read_text(encoding="utf-8")
        for constraint, expected in ((False, [1.0] * 8), (True, [1.0, 0.0] * 4)):
            backend = MockBackend({"division": [division] * 4, "conquering": [with_mentions, without] * 16})
            config = IterationConfig(g_d=4, g_c=8, n_s=3, format_constraint=constraint)
            records = dac_problem_records(problem, config, backend)
            for g in range(4):
                rewards = [r.reward for r in records if r.kind == "conquering" and r.group_index == g]
                assert rewards == expected
