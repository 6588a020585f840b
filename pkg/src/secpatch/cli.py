"""Command-line entry point.

Subcommands:

* ``generate`` - initial generation plus compile-error repair only.
* ``refine``   - the full generate -> scan -> refine pipeline over a dataset.
* ``evaluate`` - re-score stored run records with a chosen analyzer.
* ``report``   - tables and CWE histograms from stored run records.
* ``dataset``  - ``validate`` or ``stats`` over a prompt file.

Flag values override config-file values, which override built-in defaults.
Exit codes: 0 ok, 1 partial failures, 2 configuration error, 3 missing tool.
"""

from __future__ import annotations

import argparse
import configparser
import json
import sys
from enum import IntEnum
from pathlib import Path
from typing import Any, Sequence

from . import harness
from .analysis import ToolNotFound
from .core import (
    AnalyzerId,
    ConfigError,
    SecpatchError,
    StrategyId,
    load_records,
    record_to_json_line,
)
from .harness import (
    DatasetError,
    DatasetSpec,
    RunConfig,
    dataset_stats,
    evaluate_records,
    load_dataset,
    run_benchmark,
)
from .llm import BackendKind, ProviderConfig
from .metrics import (
    HistogramPhase,
    RenderFormat,
    build_main_table,
    cwe_histogram,
    render_to_file,
)
from .strategies import BranchSeedMode, StrategyConfig


class ExitStatus(IntEnum):
    OK = 0
    PARTIAL_FAILURES = 1
    CONFIG_ERROR = 2
    TOOL_MISSING = 3


_STRATEGY_CHOICES = [s.value for s in StrategyId]
_ANALYZER_CHOICES = [a.value for a in AnalyzerId]
_BACKEND_CHOICES = [b.value for b in BackendKind]
_FORMAT_CHOICES = [f.value for f in RenderFormat]


def _add_common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", metavar="PATH", help="config file (key = value sections)")
    parser.add_argument("--dataset", metavar="PATH", help="prompt dataset (JSONL or CSV)")
    parser.add_argument("--model", metavar="ID", help="model identifier sent to the backend")
    parser.add_argument("--strategy", choices=_STRATEGY_CHOICES, help="refinement strategy")
    parser.add_argument("--analyzer", choices=_ANALYZER_CHOICES,
                        help="analyzer used inside the refinement loop")
    parser.add_argument("--eval", action="append", choices=_ANALYZER_CHOICES,
                        metavar="TOOL", help="extra analyzer to score outcomes with (repeatable)")
    parser.add_argument("--solutions", type=int, metavar="J",
                        help="number of candidate fix strategies")
    parser.add_argument("--iters", type=int, metavar="K",
                        help="repair rounds per candidate strategy")
    parser.add_argument("--compile-fix-rounds", type=int, metavar="N",
                        help="max compile-error repair rounds at generation")
    parser.add_argument("--seed-mode", choices=[m.value for m in BranchSeedMode],
                        help="how refinement branches are seeded")
    parser.add_argument("--workers", type=int, metavar="N", help="concurrent tasks")
    parser.add_argument("--out", metavar="DIR", help="output directory")
    parser.add_argument("--backend", choices=_BACKEND_CHOICES, help="model backend")
    parser.add_argument("--cassette", metavar="PATH",
                        help="cassette file for record/replay backends")
    parser.add_argument("--script", metavar="PATH", help="script file for the scripted backend")
    parser.add_argument("--endpoint", metavar="URL", help="chat-completions endpoint base URL")
    parser.add_argument("--api-key-env", metavar="NAME",
                        help="env var holding the API key")
    parser.add_argument("--temperature", type=float, help="sampling temperature")
    parser.add_argument("--max-tokens", type=int, help="completion token limit")
    parser.add_argument("--timeout", type=int, metavar="SEC", help="HTTP timeout")
    parser.add_argument("--retries", type=int, metavar="N", help="max HTTP retries")
    parser.add_argument("--rpm", type=int, metavar="N", help="requests per minute")
    parser.add_argument("--no-resume", action="store_true",
                        help="rerun tasks already present in the output")
    parser.add_argument("--format", choices=_FORMAT_CHOICES, help="report output format")
    parser.add_argument("--json", action="store_true",
                        help="machine-readable summary on stdout")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="secpatch",
        description="Generate code with an LLM, detect security issues with "
        "static analysis, and iteratively refine until clean.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_text in (
        ("generate", "initial generation with compile-error repair only"),
        ("refine", "full strategy run over a dataset"),
    ):
        cmd = sub.add_parser(name, help=help_text)
        _add_common_flags(cmd)

    evaluate = sub.add_parser("evaluate", help="re-score stored records with a chosen tool")
    evaluate.add_argument("records", metavar="RECORDS", help="run-record JSONL file")
    _add_common_flags(evaluate)

    report = sub.add_parser("report", help="tables and histograms from stored records")
    report.add_argument("records", metavar="RECORDS", nargs="+",
                        help="run-record JSONL files")
    report.add_argument("--top", type=int, default=10, help="histogram size (default 10)")
    _add_common_flags(report)

    dataset = sub.add_parser("dataset", help="dataset utilities")
    dataset_sub = dataset.add_subparsers(dest="dataset_command", required=True)
    validate = dataset_sub.add_parser("validate", help="check a prompt file")
    validate.add_argument("path", metavar="PATH")
    _add_common_flags(validate)
    stats = dataset_sub.add_parser("stats", help="per-domain counts for a prompt file")
    stats.add_argument("path", metavar="PATH")
    _add_common_flags(stats)

    return parser


# ---------------------------------------------------------------------------
# Config file merging (flags > file > defaults)
# ---------------------------------------------------------------------------


def _load_config_file(path: str) -> dict[str, dict[str, str]]:
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"config file not found: {path}")
    return {section: dict(parser.items(section)) for section in parser.sections()}


class Settings:
    """Flag/file/default precedence for one invocation."""

    def __init__(self, args: argparse.Namespace) -> None:
        self.args = args
        self.file: dict[str, dict[str, str]] = {}
        if getattr(args, "config", None):
            self.file = _load_config_file(args.config)

    def get(self, flag: str, section: str, key: str, default: Any = None) -> Any:
        value = getattr(self.args, flag, None)
        if value is not None and value is not False:
            return value
        if section in self.file and key in self.file[section]:
            return self.file[section][key]
        return default

    def get_int(self, flag: str, section: str, key: str, default: int) -> int:
        value = self.get(flag, section, key, default)
        try:
            return int(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{key} must be an integer, got {value!r}") from exc

    def get_float(self, flag: str, section: str, key: str, default: float) -> float:
        value = self.get(flag, section, key, default)
        try:
            return float(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{key} must be a number, got {value!r}") from exc


def _provider_config(settings: Settings) -> ProviderConfig:
    backend_name = settings.get("backend", "provider", "backend", BackendKind.LIVE.value)
    try:
        backend = BackendKind(backend_name)
    except ValueError as exc:
        raise ConfigError(f"unknown backend {backend_name!r}") from exc
    return ProviderConfig(
        endpoint_url=settings.get("endpoint", "provider", "endpoint_url", "") or "",
        api_key_env=settings.get("api_key_env", "provider", "api_key_env", "") or "",
        timeout_seconds=settings.get_int("timeout", "provider", "timeout_seconds", 120),
        max_retries=settings.get_int("retries", "provider", "max_retries", 3),
        backend=backend,
        cassette_path=settings.get("cassette", "provider", "cassette"),
        script_path=settings.get("script", "provider", "script"),
        requests_per_minute=settings.get_int("rpm", "provider", "requests_per_minute", 60),
    )


def _strategy_config(settings: Settings) -> StrategyConfig:
    seed_mode = settings.get(
        "seed_mode", "strategy", "seed_mode", BranchSeedMode.FROM_ORIGINAL.value
    )
    try:
        mode = BranchSeedMode(seed_mode)
    except ValueError as exc:
        raise ConfigError(f"unknown seed mode {seed_mode!r}") from exc
    return StrategyConfig(
        solutions_j=settings.get_int("solutions", "strategy", "solutions", 3),
        iterations_k=settings.get_int("iters", "strategy", "iters", 2),
        max_compile_fix_rounds=settings.get_int(
            "compile_fix_rounds", "strategy", "compile_fix_rounds", 2
        ),
        branch_seed_mode=mode,
    )


def _run_config(settings: Settings) -> RunConfig:
    dataset_path = settings.get("dataset", "run", "dataset")
    if not dataset_path:
        raise ConfigError("a dataset is required (--dataset or config [run] dataset)")
    model = settings.get("model", "run", "model")
    if not model:
        raise ConfigError("a model id is required (--model or config [run] model)")
    strategy_name = settings.get("strategy", "run", "strategy", StrategyId.FDSP.value)
    try:
        strategy = StrategyId(strategy_name)
    except ValueError as exc:
        raise ConfigError(f"unknown strategy {strategy_name!r}") from exc
    analyzer_name = settings.get("analyzer", "run", "analyzer", AnalyzerId.BANDIT.value)
    try:
        analyzer = AnalyzerId(analyzer_name)
    except ValueError as exc:
        raise ConfigError(f"unknown analyzer {analyzer_name!r}") from exc
    eval_value = settings.get("eval", "run", "eval", [])
    if isinstance(eval_value, str):
        eval_value = [item.strip() for item in eval_value.split(",") if item.strip()]
    try:
        eval_analyzers = tuple(AnalyzerId(item) for item in eval_value)
    except ValueError as exc:
        raise ConfigError(f"unknown eval analyzer in {eval_value!r}") from exc
    if getattr(settings.args, "no_resume", False):
        resume = False
    else:
        file_value = settings.file.get("run", {}).get("resume", "true")
        resume = str(file_value).lower() not in ("false", "0", "no")
    return RunConfig(
        dataset=DatasetSpec.infer(dataset_path),
        model_id=str(model),
        provider=_provider_config(settings),
        strategy=strategy,
        strategy_cfg=_strategy_config(settings),
        analyzer=analyzer,
        eval_analyzers=eval_analyzers,
        workers=settings.get_int("workers", "run", "workers", 4),
        output_dir=str(settings.get("out", "run", "out", "runs")),
        resume=bool(resume),
        temperature=settings.get_float("temperature", "run", "temperature", 0.0),
        max_tokens=settings.get_int("max_tokens", "run", "max_tokens", 1024),
    )


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _emit(args: argparse.Namespace, payload: dict[str, Any], human: str) -> None:
    if getattr(args, "json", False):
        print(json.dumps(payload, ensure_ascii=False))
    else:
        print(human)


def cmd_refine(args: argparse.Namespace) -> int:
    settings = Settings(args)
    cfg = _run_config(settings)
    cfg.provider.validate()
    summary = run_benchmark(cfg)
    out = str(harness.records_path(cfg))
    _emit(
        args,
        {"command": "refine", "output": out, "summary": summary.to_dict()},
        f"refine: {summary.completed} completed, {summary.skipped} skipped, "
        f"{summary.failed} failed -> {out}",
    )
    return ExitStatus.PARTIAL_FAILURES if summary.failed else ExitStatus.OK


def cmd_generate(args: argparse.Namespace) -> int:
    """Generation phase only: produce and syntax-repair programs, then scan."""
    from .analysis import make_analyzer
    from .core import report_to_dict
    from .llm import LlmClient, build_backend
    from .strategies import default_templates, generate_initial

    settings = Settings(args)
    cfg = _run_config(settings)
    cfg.provider.validate()
    harness._check_tools(cfg)
    tasks = load_dataset(cfg.dataset)
    backend = build_backend(cfg.provider)
    analyzer = make_analyzer(cfg.analyzer)
    templates = default_templates()
    digest = harness.config_digest(cfg, templates)
    clock = harness.resolve_clock()
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    out_path = out_dir / f"{cfg.model_id}__generated.jsonl"
    completed = failed = 0
    with out_path.open("a", encoding="utf-8") as handle:
        for task in tasks:
            llm = LlmClient(
                backend=backend,
                model_id=cfg.model_id,
                temperature=cfg.temperature,
                max_tokens=cfg.max_tokens,
            )
            started = clock()
            try:
                generated = generate_initial(task, llm, templates=templates,
                                             cfg=cfg.strategy_cfg)
                report = analyzer.scan(generated.candidate)
            except SecpatchError as exc:
                print(f"generate: task {task.id} failed: {exc}", file=sys.stderr)
                failed += 1
                continue
            row = {
                "task_id": task.id,
                "model_id": cfg.model_id,
                "code": generated.candidate.code,
                "origin": generated.candidate.origin.value,
                "llm_calls": generated.llm_calls,
                "compile_error": (
                    None
                    if generated.compile_error is None
                    else {
                        "message": generated.compile_error.message,
                        "line": generated.compile_error.line,
                    }
                ),
                "report": report_to_dict(report),
                "started_at": started.isoformat(),
                "finished_at": clock().isoformat(),
                "config_digest": digest,
            }
            handle.write(json.dumps(row, ensure_ascii=False, separators=(",", ":")) + "\n")
            completed += 1
    _emit(
        args,
        {"command": "generate", "output": str(out_path),
         "summary": {"completed": completed, "failed": failed}},
        f"generate: {completed} completed, {failed} failed -> {out_path}",
    )
    return ExitStatus.PARTIAL_FAILURES if failed else ExitStatus.OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    settings = Settings(args)
    analyzer_name = settings.get("analyzer", "run", "analyzer")
    if not analyzer_name:
        raise ConfigError("evaluate requires --analyzer")
    analyzer = AnalyzerId(analyzer_name)
    records = load_records(args.records)
    updated = evaluate_records(records, analyzer)
    out_dir = Path(settings.get("out", "run", "out", "runs"))
    out_dir.mkdir(parents=True, exist_ok=True)
    out_path = out_dir / Path(args.records).name
    tmp = out_path.with_suffix(out_path.suffix + ".tmp")
    with tmp.open("w", encoding="utf-8") as handle:
        for record in updated:
            handle.write(record_to_json_line(record) + "\n")
    tmp.replace(out_path)
    _emit(
        args,
        {"command": "evaluate", "output": str(out_path),
         "summary": {"records": len(updated), "tool": analyzer.value}},
        f"evaluate: re-scored {len(updated)} records with {analyzer.value} -> {out_path}",
    )
    return ExitStatus.OK


def _tools_present(records) -> list[AnalyzerId]:
    from .metrics import TOOL_ORDER, initial_report_for

    present = []
    for tool in TOOL_ORDER:
        if any(initial_report_for(record, tool) is not None for record in records):
            present.append(tool)
    return present


def cmd_report(args: argparse.Namespace) -> int:
    settings = Settings(args)
    records = []
    for path in args.records:
        records.extend(load_records(path))
    if not records:
        raise ConfigError("no records found in the given files")
    fmt = RenderFormat(settings.get("format", "run", "format", RenderFormat.MARKDOWN.value))
    out_dir = Path(settings.get("out", "run", "out", "report"))
    out_dir.mkdir(parents=True, exist_ok=True)
    suffix = {"md": "md", "csv": "csv", "plotdata": "csv"}[fmt.value]
    tools = _tools_present(records)
    written: list[str] = []
    tables = [build_main_table(records, tool) for tool in tools]
    if tables:
        path = render_to_file(tables, fmt, out_dir / f"main_table.{suffix}")
        written.append(str(path))
    for tool in tools:
        for phase in (HistogramPhase.GENERATED, HistogramPhase.UNRESOLVED):
            histogram = cwe_histogram(records, phase, tool, top_n=args.top)
            path = render_to_file(
                histogram, fmt, out_dir / f"cwe_{phase.value}_{tool.value}.{suffix}"
            )
            written.append(str(path))
    _emit(
        args,
        {"command": "report", "output": written},
        "report: wrote\n  " + "\n  ".join(written),
    )
    return ExitStatus.OK


def cmd_dataset(args: argparse.Namespace) -> int:
    spec = DatasetSpec.infer(args.path)
    tasks = load_dataset(spec)
    if args.dataset_command == "validate":
        _emit(
            args,
            {"command": "dataset validate", "prompts": len(tasks)},
            f"{len(tasks)} prompts OK",
        )
        return ExitStatus.OK
    stats = dataset_stats(tasks)
    payload = {
        "command": "dataset stats",
        "total": stats.total,
        "domains": {
            domain.value: {"count": entry.count, "percent": entry.percent}
            for domain, entry in stats.per_domain.items()
        },
    }
    lines = [f"total prompts: {stats.total}"]
    for domain, entry in stats.per_domain.items():
        lines.append(f"  {domain.value}: {entry.count} ({entry.percent}%)")
    _emit(args, payload, "\n".join(lines))
    return ExitStatus.OK


_COMMANDS = {
    "generate": cmd_generate,
    "refine": cmd_refine,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
    "dataset": cmd_dataset,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return int(_COMMANDS[args.command](args))
    except ToolNotFound as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ExitStatus.TOOL_MISSING
    except (ConfigError, DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ExitStatus.CONFIG_ERROR
    except SecpatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ExitStatus.CONFIG_ERROR


if __name__ == "__main__":
    sys.exit(main())
