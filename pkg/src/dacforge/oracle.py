"""Exact and Monte Carlo covariance between subproblem success and final-answer success.

Under the synthetic causal model (independent ``s_i ~ Bernoulli(p_sub)``, then
``C ~ Bernoulli(g(s))`` with g nondecreasing) every Cov(1{s_i}, 1{C}) should
be nonnegative. These routines measure it both ways so the claim can be checked
against sampling error.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .policy.synthetic import SyntheticPolicyParams

MAX_EXACT_M = 20
MIN_SAMPLES = 1000
BLOCK = 20_000


@dataclass(frozen=True)
class CovarianceReport:
    params: SyntheticPolicyParams
    samples: int
    cov_estimates: tuple[float, ...]
    std_errors: tuple[float, ...]
    conditional_lift: tuple[float, ...]
    p_success: float
    closed_form: tuple[float, ...] | None = None

    def rows(self) -> list[dict]:
        out = []
        for i in range(self.params.m):
            row = {
                "subproblem": i + 1,
                "cov_estimate": self.cov_estimates[i],
                "std_error": self.std_errors[i],
                "conditional_lift": self.conditional_lift[i],
            }
            if self.closed_form is not None:
                row["cov_exact"] = self.closed_form[i]
                row["z"] = (self.cov_estimates[i] - self.closed_form[i]) / self.std_errors[i] if self.std_errors[i] else 0.0
            out.append(row)
        return out

    def to_csv(self) -> str:
        rows = self.rows()
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [
            f"m={self.params.m} p_sub={self.params.p_sub} g={list(self.params.g)}",
            f"samples={self.samples} P(C=1)={self.p_success:.6f}",
        ]
        for row in self.rows():
            line = (
                f"  s_{row['subproblem']}: cov={row['cov_estimate']:+.6f} +/- {row['std_error']:.6f}"
                f"  lift={row['conditional_lift']:+.6f}"
            )
            if "cov_exact" in row:
                line += f"  exact={row['cov_exact']:+.6f}  z={row['z']:+.2f}"
            lines.append(line)
        return "\n".join(lines) + "\n"


def _configurations(m: int) -> np.ndarray:
    idx = np.arange(2**m, dtype=np.int64)
    return ((idx[:, None] >> np.arange(m)) & 1).astype(bool)


def closed_form_covariance(params: SyntheticPolicyParams) -> list[float]:
    """Exact Cov(1{s_i}, 1{C}) for every i, summing over all 2**m outcomes of s."""
    if params.m > MAX_EXACT_M:
        raise ValueError(f"exact enumeration limited to m <= {MAX_EXACT_M}, got {params.m}")
    s = _configurations(params.m)
    p = params.p_sub
    k = s.sum(axis=1)
    weight = p**k * (1.0 - p) ** (params.m - k)
    g = params.success_probs(s)
    e_c = float(weight @ g)
    e_sc = (weight * g) @ s
    return [float(e_sc[i] - p * e_c) for i in range(params.m)]


def closed_form_success(params: SyntheticPolicyParams) -> float:
    s = _configurations(params.m)
    k = s.sum(axis=1)
    weight = params.p_sub**k * (1.0 - params.p_sub) ** (params.m - k)
    return float(weight @ params.success_probs(s))


def _block_counts(params: SyntheticPolicyParams, size: int, seed_seq: np.random.SeedSequence) -> np.ndarray:
    """Joint counts [n11, n10, n01, n00] of (s_i, C) per coordinate for one block."""
    rng = np.random.default_rng(seed_seq)
    s = rng.random((size, params.m)) < params.p_sub
    c = rng.random(size) < params.success_probs(s)
    n_c = int(c.sum())
    n11 = (s & c[:, None]).sum(axis=0)
    n1_ = s.sum(axis=0)
    return np.stack([n11, n1_ - n11, n_c - n11, size - n1_ - n_c + n11], axis=1).astype(np.int64)


def _cov_and_se(counts: np.ndarray, n: int) -> tuple[float, float]:
    n11, n10, n01, n00 = (int(x) for x in counts)
    px = (n11 + n10) / n
    py = (n11 + n01) / n
    # centered products take one of four values on binary data
    d = {
        (1, 1): (1 - px) * (1 - py),
        (1, 0): (1 - px) * (0 - py),
        (0, 1): (0 - px) * (1 - py),
        (0, 0): (0 - px) * (0 - py),
    }
    weights = {(1, 1): n11, (1, 0): n10, (0, 1): n01, (0, 0): n00}
    mean_prod = sum(weights[key] * d[key] for key in d) / n
    second = sum(weights[key] * d[key] ** 2 for key in d) / n
    cov = mean_prod * n / (n - 1) if n > 1 else 0.0
    var = max(second - mean_prod**2, 0.0)
    return cov, math.sqrt(var / n)


def estimate_covariance(
    params: SyntheticPolicyParams,
    samples: int = 100_000,
    seed: int = 0,
    workers: int = 1,
    with_closed_form: bool = True,
) -> CovarianceReport:
    """Monte Carlo estimate of each Cov(1{s_i}, 1{C}) with delta-method standard errors.

    Sampling runs in fixed blocks seeded from ``seed``, so the result does not
    depend on ``workers``.
    """
    params.check_monotone()
    if samples < MIN_SAMPLES:
        raise ValueError(f"need at least {MIN_SAMPLES} samples, got {samples}")
    n_blocks = math.ceil(samples / BLOCK)
    sizes = [BLOCK] * (n_blocks - 1) + [samples - BLOCK * (n_blocks - 1)]
    seqs = np.random.SeedSequence(seed).spawn(n_blocks)
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        blocks = list(pool.map(lambda a: _block_counts(params, *a), zip(sizes, seqs)))
    counts = np.sum(blocks, axis=0)

    covs, ses, lifts = [], [], []
    n_c = int(counts[0, 0] + counts[0, 2])
    for i in range(params.m):
        cov, se = _cov_and_se(counts[i], samples)
        n11, n10 = int(counts[i, 0]), int(counts[i, 1])
        p_s = (n11 + n10) / samples
        lift = n11 / n_c - p_s if n_c else 0.0
        covs.append(cov)
        ses.append(se)
        lifts.append(lift)
    closed = None
    if with_closed_form and params.m <= MAX_EXACT_M:
        closed = tuple(closed_form_covariance(params))
    return CovarianceReport(params, samples, tuple(covs), tuple(ses), tuple(lifts), n_c / samples, closed)
