"""Command-line entry point: ``dacforge {divide,iterate,eval,sweep,simulate-lemma}``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import engine, eval as evaluation, oracle
from .corpus import Corpus, CorpusError, load_corpus
from .policy import BackendError, MockBackend, RemoteBackend, SyntheticBackend, SyntheticPolicyParams, derive_seed
from .policy.synthetic import NonMonotoneError

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

logger = logging.getLogger("dacforge")

# flag dest -> IterationConfig field
FLAG_FIELDS = {
    "gd": "g_d",
    "gc": "g_c",
    "ns": "n_s",
    "t_acc": "t_acc",
    "format_constraint": "format_constraint",
    "max_tokens": "max_tokens",
    "temperature": "temperature",
    "top_p": "top_p",
    "batch_size": "batch_size",
    "eps_low": "eps_low",
    "eps_high": "eps_high",
    "cot_group_size": "cot_group_size",
    "division_reward": "division_reward_mode",
    "seed": "seed",
}
DEFAULT_SYNTHETIC = {
    "m": 4,
    "p_sub": 0.6,
    "g": [0.02, 0.1, 0.3, 0.6, 0.9],
    "cot_accuracy": 0.3,
}
DEFAULT_LEMMA = {"m": 3, "p_sub": 0.5, "g": [0.05, 0.2, 0.5, 0.9]}


class UsageError(Exception):
    """Bad flags or configuration; nothing has been written."""


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    corpus: str | None
    backend: dict
    outputs: list[str] = field(default_factory=list)
    started: str = ""
    finished: str = ""
    status: str = "running"
    summary: dict = field(default_factory=dict)

    def write(self, out_dir: Path) -> Path:
        missing = [p for p in self.outputs if not Path(p).exists()]
        if missing:
            raise RuntimeError(f"manifest names missing outputs: {missing}")
        path = out_dir / "manifest.json"
        fd, tmp = tempfile.mkstemp(dir=out_dir, prefix=".manifest.", suffix=".tmp")
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)
        return path


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc


def _iteration_config(args, file_cfg: dict, base: dict | None = None) -> engine.IterationConfig:
    values = dict(base or {})
    section = {k: v for k, v in file_cfg.items() if not isinstance(v, dict)}
    values.update(section)
    for flag, name in FLAG_FIELDS.items():
        value = getattr(args, flag, None)
        if value is not None:
            values[name] = value
    try:
        return engine.IterationConfig.from_mapping(values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc


def _load(args) -> Corpus:
    if not args.corpus:
        raise UsageError("--corpus is required")
    try:
        corpus = load_corpus(args.corpus)
    except CorpusError as exc:
        raise UsageError(str(exc)) from exc
    print(json.dumps({"load_report": corpus.report.to_dict()}), file=sys.stderr)
    if args.limit:
        corpus = Corpus(corpus.name, corpus.problems[: args.limit], corpus.report)
    return corpus


def _synthetic_params(section: dict) -> SyntheticPolicyParams:
    return SyntheticPolicyParams(
        m=int(section["m"]),
        p_sub=float(section["p_sub"]),
        g=tuple(section["g"]),
        g_vector=tuple(section["g_vector"]) if section.get("g_vector") else None,
    )


def _mock_backend(path: str, corpus: Corpus) -> MockBackend:
    try:
        with open(path, encoding="utf-8") as fh:
            script = json.load(fh)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read mock script {path}: {exc}") from exc
    if isinstance(script, list):
        return MockBackend(script)
    statements = {p.id: p.statement for p in corpus}
    routes = {}
    for route in script.get("routes", []):
        kind = route["kind"]
        if "problem_id" in route:
            key = (kind, statements[route["problem_id"]])
        elif "statement" in route:
            key = (kind, route["statement"])
        else:
            key = kind
        routes.setdefault(key, []).extend(route["responses"])
    return MockBackend(routes)


def _backend(args, file_cfg: dict, corpus: Corpus | None, seed: int):
    kind = args.backend or file_cfg.get("backend", {}).get("kind", "synthetic")
    if kind == "mock":
        if not args.mock_script:
            raise UsageError("--backend mock needs --mock-script")
        return _mock_backend(args.mock_script, corpus)
    if kind == "synthetic":
        section = {**DEFAULT_SYNTHETIC, **file_cfg.get("synthetic", {})}
        try:
            params = _synthetic_params(section)
            extra = {
                k: section[k]
                for k in ("division_quality", "cot_accuracy", "malformed_rate", "short_division_rate", "uncovered_rate")
                if k in section
            }
            if "filler_tokens" in section:
                extra["filler_tokens"] = tuple(section["filler_tokens"])
            answers = {p.statement: p.answer for p in corpus} if corpus else {}
            return SyntheticBackend(answers, params, seed=seed, **extra)
        except (KeyError, TypeError, ValueError) as exc:
            raise UsageError(f"invalid synthetic backend settings: {exc}") from exc
    if kind == "remote":
        section = file_cfg.get("remote", {})
        try:
            return RemoteBackend.from_env(
                max_retries=int(section.get("max_retries", 4)),
                system_prompt=section.get("system_prompt"),
            )
        except BackendError as exc:
            raise UsageError(str(exc)) from exc
    raise UsageError(f"unknown backend {kind!r}")


def _describe(backend) -> dict:
    return backend.describe() if hasattr(backend, "describe") else {"backend": type(backend).__name__}


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _parallel(args) -> int:
    return args.parallel if args.parallel else (os.cpu_count() or 1)


# ---------------------------------------------------------------------------
# commands


def cmd_divide(args) -> int:
    file_cfg = _load_config_file(args.config)
    config = _iteration_config(args, file_cfg)
    corpus = _load(args)
    backend = _backend(args, file_cfg, corpus, config.seed)
    out = _out_dir(args)
    manifest = RunManifest("divide", config.to_dict(), config.seed, args.corpus, _describe(backend), started=_now())

    def one(problem):
        _, completions, groups = engine.sample_divisions(problem, config, backend)
        return [
            {
                "problem_id": problem.id,
                "group_index": g,
                "format_valid": group.format_valid,
                "n_subproblems": len(group),
                "subproblems": list(group.subproblems),
                "truncated": c.truncated,
                "response": c.text,
            }
            for g, (c, group) in enumerate(zip(completions, groups))
        ]

    try:
        with ThreadPoolExecutor(max_workers=_parallel(args)) as pool:
            rows = [row for chunk in pool.map(one, corpus.problems) for row in chunk]
    except BackendError as exc:
        return _abort(manifest, out, exc)
    path = out / "divisions.jsonl"
    path.write_text("".join(json.dumps(r, ensure_ascii=False) + "\n" for r in rows), encoding="utf-8")
    manifest.outputs.append(str(path))
    manifest.summary = {
        "problems": len(corpus),
        "groups": len(rows),
        "format_valid": sum(r["format_valid"] for r in rows),
    }
    return _complete(manifest, out)


def _step_batch(corpus: Corpus, config: engine.IterationConfig, step: int):
    size = min(config.batch_size, len(corpus))
    if size == len(corpus):
        return list(corpus.problems)
    rng = np.random.default_rng(derive_seed(config.seed, "minibatch", step))
    picks = np.sort(rng.choice(len(corpus), size=size, replace=False))
    return [corpus.problems[i] for i in picks]


def cmd_iterate(args) -> int:
    file_cfg = _load_config_file(args.config)
    config = _iteration_config(args, file_cfg)
    corpus = _load(args)
    backend = _backend(args, file_cfg, corpus, config.seed)
    out = _out_dir(args)
    manifest = RunManifest("iterate", config.to_dict(), config.seed, args.corpus, _describe(backend), started=_now())
    run = engine.run_mix_iteration if config.t_acc is not None else engine.run_dac_iteration
    metrics_path = out / "metrics.jsonl"
    metric_lines = []
    for step in range(1, args.steps + 1):
        try:
            batch = run(_step_batch(corpus, config, step), config, backend, iteration=step, parallel=_parallel(args))
        except engine.IterationError as exc:
            manifest.summary["last_completed_step"] = step - 1
            manifest.summary["failed_step_progress"] = {"completed": exc.completed, "failed": exc.failed}
            _write_metrics(metrics_path, metric_lines, manifest)
            return _abort(manifest, out, exc)
        path = engine.export_batch(batch, out / f"step_{step:04d}.jsonl")
        manifest.outputs.append(str(path))
        line = {"step": step, **batch.metrics}
        metric_lines.append(line)
        logger.info(
            "step %d: %d records, mean length %.1f, clip ratio %.4f",
            step,
            len(batch.records),
            batch.metrics["mean_response_tokens"],
            batch.metrics["clip_ratio"],
        )
    _write_metrics(metrics_path, metric_lines, manifest)
    manifest.summary["last_completed_step"] = args.steps
    manifest.summary["mode"] = "mix" if config.t_acc is not None else "dac"
    return _complete(manifest, out)


def _write_metrics(path: Path, lines: list[dict], manifest: RunManifest) -> None:
    path.write_text("".join(json.dumps(m) + "\n" for m in lines), encoding="utf-8")
    manifest.outputs.append(str(path))


def _eval_base(file_cfg: dict) -> dict:
    return {**evaluation.EVAL_DEFAULTS, **file_cfg.get("eval", {})}


def cmd_eval(args) -> int:
    file_cfg = _load_config_file(args.config)
    config = _iteration_config(args, file_cfg, base=_eval_base(file_cfg))
    k_list = args.k or [1, args.n_samples]
    bad = [k for k in k_list if not 1 <= k <= args.n_samples]
    if bad:
        raise UsageError(f"k values {bad} exceed --n-samples {args.n_samples}")
    corpus = _load(args)
    backend = _backend(args, file_cfg, corpus, config.seed)
    out = _out_dir(args)
    manifest = RunManifest("eval", config.to_dict(), config.seed, args.corpus, _describe(backend), started=_now())
    try:
        rows = evaluation.evaluate(
            corpus.problems, backend, args.mode, args.n_samples, k_list, config,
            benchmark=corpus.name, groups=args.groups, parallel=_parallel(args),
        )
    except BackendError as exc:
        return _abort(manifest, out, exc)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return _write_rows(rows, out, "eval", manifest)


def _parse_plan(text: str, k: int | None) -> evaluation.AllocationPlan:
    text = text.strip()
    if text == "cot":
        if k is None:
            raise UsageError("plan 'cot' needs a budget; list it after an n x m plan or pass --k")
        return evaluation.AllocationPlan(0, k)
    try:
        n, m = (int(x) for x in text.lower().split("x"))
        return evaluation.AllocationPlan(n, m)
    except ValueError as exc:
        raise UsageError(f"bad plan {text!r}; expected NxM or cot") from exc


def cmd_sweep(args) -> int:
    file_cfg = _load_config_file(args.config)
    config = _iteration_config(args, file_cfg, base=_eval_base(file_cfg))
    plans = []
    budget = args.k[0] if args.k else None
    for text in args.plans.split(","):
        plan = _parse_plan(text, budget)
        budget = budget or plan.k
        plans.append(plan)
    if len({p.k for p in plans}) != 1:
        raise UsageError("all plans must share the same budget n*m")
    corpus = _load(args)
    backend = _backend(args, file_cfg, corpus, config.seed)
    out = _out_dir(args)
    manifest = RunManifest("sweep", config.to_dict(), config.seed, args.corpus, _describe(backend), started=_now())
    try:
        rows = evaluation.run_allocation_sweep(
            corpus.problems, backend, plans, config, benchmark=corpus.name, parallel=_parallel(args)
        )
    except BackendError as exc:
        return _abort(manifest, out, exc)
    return _write_rows(rows, out, "sweep", manifest)


def _write_rows(rows, out: Path, stem: str, manifest: RunManifest) -> int:
    table = evaluation.format_table(rows)
    sys.stdout.write(table)
    txt = out / f"{stem}.txt"
    txt.write_text(table, encoding="utf-8")
    csv_path = evaluation.write_csv(rows, out / f"{stem}.csv")
    manifest.outputs += [str(txt), str(csv_path)]
    manifest.summary = {"rows": [asdict(r) for r in rows]}
    return _complete(manifest, out)


def cmd_simulate_lemma(args) -> int:
    file_cfg = _load_config_file(args.config)
    section = {**DEFAULT_LEMMA, **file_cfg.get("lemma", {})}
    if args.m is not None:
        section["m"] = args.m
    if args.p_sub is not None:
        section["p_sub"] = args.p_sub
    if args.g is not None:
        section["g"] = [float(x) for x in args.g.split(",")]
    seed = args.seed if args.seed is not None else int(file_cfg.get("seed", 0))
    try:
        params = _synthetic_params(section)
        params.check_monotone()
    except (KeyError, ValueError) as exc:
        raise UsageError(f"invalid lemma parameters: {exc}") from exc
    out = _out_dir(args)
    manifest = RunManifest("simulate-lemma", {"lemma": params.to_dict(), "samples": args.samples}, seed, None,
                           {"backend": "causal-model"}, started=_now())
    try:
        report = oracle.estimate_covariance(params, args.samples, seed, workers=_parallel(args))
    except (ValueError, NonMonotoneError) as exc:
        raise UsageError(str(exc)) from exc
    text = report.to_text()
    sys.stdout.write(text)
    txt = out / "lemma_report.txt"
    txt.write_text(text, encoding="utf-8")
    csv_path = out / "lemma_report.csv"
    csv_path.write_text(report.to_csv(), encoding="utf-8")
    manifest.outputs += [str(txt), str(csv_path)]
    manifest.summary = {
        "cov_estimates": list(report.cov_estimates),
        "cov_exact": list(report.closed_form) if report.closed_form else None,
        "all_exact_nonnegative": all(c >= -1e-12 for c in report.closed_form or ()),
    }
    return _complete(manifest, out)


def _complete(manifest: RunManifest, out: Path) -> int:
    manifest.status = "complete"
    manifest.finished = _now()
    manifest.write(out)
    return 0


def _abort(manifest: RunManifest, out: Path, exc: Exception) -> int:
    logger.error("%s aborted: %s", manifest.command, exc)
    manifest.status = "aborted"
    manifest.finished = _now()
    manifest.summary["error"] = str(exc)
    manifest.write(out)
    return 1


# ---------------------------------------------------------------------------
# argument parsing


def _common(p: argparse.ArgumentParser, corpus: bool = True) -> None:
    p.add_argument("--config", help="TOML config file; flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--parallel", type=int, help="concurrent backend calls (default: CPU count)")
    p.add_argument("--out", default="runs", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    if corpus:
        p.add_argument("--corpus", help="problems as .jsonl or .csv")
        p.add_argument("--limit", type=int, help="use only the first N problems")
        p.add_argument("--backend", choices=("mock", "synthetic", "remote"))
        p.add_argument("--mock-script", help="JSON file of canned responses for --backend mock")


def _sampling(p: argparse.ArgumentParser) -> None:
    p.add_argument("--gd", type=int, help="division samples per problem")
    p.add_argument("--gc", type=int, help="conquering samples per subproblem group")
    p.add_argument("--ns", type=int, help="minimum subproblems for a positive division reward")
    p.add_argument("--max-tokens", type=int)
    p.add_argument("--temperature", type=float)
    p.add_argument("--top-p", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dacforge", description="Divide-and-conquer RL rollouts, rewards and evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("divide", help="sample and parse division responses")
    _common(p)
    _sampling(p)
    p.set_defaults(func=cmd_divide)

    p = sub.add_parser("iterate", help="run training-loop iterations and export experience batches")
    _common(p)
    _sampling(p)
    p.add_argument("--steps", type=int, default=1)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--t-acc", type=float, help="enable mixed routing: direct accuracy below this goes divide-and-conquer")
    p.add_argument("--cot-group-size", type=int)
    p.add_argument("--format-constraint", action="store_true", default=None)
    p.add_argument("--division-reward", choices=("binary", "accuracy"))
    p.add_argument("--eps-low", type=float)
    p.add_argument("--eps-high", type=float)
    p.set_defaults(func=cmd_iterate)

    p = sub.add_parser("eval", help="pass@1 and pass@k")
    _common(p)
    _sampling(p)
    p.add_argument("--mode", choices=("cot", "dac"), default="dac")
    p.add_argument("--n-samples", type=int, default=32)
    p.add_argument("--k", type=int, action="append", help="repeatable; default 1 and n-samples")
    p.add_argument("--groups", type=int, help="dac mode: divisions per problem (default n-samples)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="solve rate across n x m allocations of a fixed budget")
    _common(p)
    _sampling(p)
    p.add_argument("--plans", required=True, help="comma list like 1x4,2x2,4x1,cot")
    p.add_argument("--k", type=int, action="append", help="budget for a cot-only sweep")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("simulate-lemma", help="covariance of subproblem and final-answer success")
    _common(p, corpus=False)
    p.add_argument("--m", type=int)
    p.add_argument("--p-sub", type=float)
    p.add_argument("--g", help="comma list of P(C=1) for 0..m correct subproblems")
    p.add_argument("--samples", type=int, default=100_000)
    p.set_defaults(func=cmd_simulate_lemma)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"dacforge {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
