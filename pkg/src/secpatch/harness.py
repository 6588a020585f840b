"""Dataset ingestion, domain classification and batch orchestration.

``run_benchmark`` drives the full pipeline for every task in a dataset:
generate an initial program (with compile-error repair), scan it, hand
flagged programs to the configured refinement strategy, optionally re-score
outcomes with evaluation analyzers, and append one record per task to a
JSONL file named ``{model}__{strategy}.jsonl``. Runs are resumable: tasks
whose (task, model, strategy, config digest) tuple is already persisted are
skipped without touching the model.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import re
import shutil
import tempfile
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping

from .analysis import (
    BanditAnalyzer,
    CodeQlAnalyzer,
    RuleScanAnalyzer,
    ToolNotFound,
    make_analyzer,
)
from .core import (
    AnalyzerId,
    ConfigError,
    Domain,
    RefinementTrace,
    RunRecord,
    SecpatchError,
    SourceDataset,
    StrategyId,
    TaskPrompt,
    Terminal,
    is_secure,
    load_records,
    parse_timestamp,
    record_to_json_line,
    report_to_dict,
    with_trace_meta,
)
from .llm import LlmBackend, LlmClient, ProviderConfig, build_backend
from .strategies import (
    PromptTemplates,
    StrategyConfig,
    default_templates,
    generate_initial,
    run_strategy,
)

logger = logging.getLogger(__name__)

FIXED_CLOCK_ENV = "SECPATCH_FIXED_CLOCK"


class DatasetError(SecpatchError):
    """A dataset file failed validation."""


class DuplicateId(DatasetError):
    pass


class MissingField(DatasetError):
    pass


class FatalConfigError(ConfigError):
    """The run cannot start: bad paths or missing tools."""


class DatasetFormat(str, Enum):
    JSONL = "jsonl"
    CSV = "csv"


@dataclass(frozen=True)
class DatasetSpec:
    path: str
    format: DatasetFormat
    name: str

    @classmethod
    def infer(cls, path: str | Path, name: str | None = None) -> "DatasetSpec":
        path = Path(path)
        fmt = DatasetFormat.CSV if path.suffix.lower() == ".csv" else DatasetFormat.JSONL
        return cls(path=str(path), format=fmt, name=name or path.stem)


def _source_dataset(name: str) -> SourceDataset:
    for known in SourceDataset:
        if known.value.lower() == name.lower():
            return known
    return SourceDataset.CUSTOM


def _parse_domains(raw: Any, where: str) -> frozenset[Domain]:
    if raw is None:
        return frozenset()
    if not isinstance(raw, (list, tuple)):
        raise DatasetError(f"{where}: domains must be a list of names")
    out = set()
    for item in raw:
        try:
            out.add(Domain(item))
        except ValueError as exc:
            raise DatasetError(f"{where}: unknown domain {item!r}") from exc
    return frozenset(out)


def load_dataset(spec: DatasetSpec) -> list[TaskPrompt]:
    """Load prompts, preserving file order; ids must be unique."""
    path = Path(spec.path)
    if not path.exists():
        raise DatasetError(f"dataset file not found: {path}")
    source = _source_dataset(spec.name)
    tasks: list[TaskPrompt] = []
    seen: dict[str, int] = {}

    def add(task_id: Any, prompt: Any, domains: frozenset[Domain], lineno: int) -> None:
        if not isinstance(task_id, str) or not task_id:
            raise MissingField(f"{path}:{lineno}: id must be a non-empty string")
        if not isinstance(prompt, str) or not prompt:
            raise MissingField(f"{path}:{lineno}: prompt must be a non-empty string")
        if task_id in seen:
            raise DuplicateId(
                f"{path}: duplicate id {task_id!r} on lines {seen[task_id]} and {lineno}"
            )
        seen[task_id] = lineno
        tasks.append(
            TaskPrompt(id=task_id, text=prompt, source_dataset=source, domains=domains)
        )

    if spec.format is DatasetFormat.JSONL:
        with path.open("r", encoding="utf-8") as handle:
            for lineno, line in enumerate(handle, start=1):
                if not line.strip():
                    continue
                try:
                    row = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise DatasetError(f"{path}:{lineno}: malformed JSON: {exc}") from exc
                if not isinstance(row, dict):
                    raise DatasetError(f"{path}:{lineno}: expected a JSON object")
                if "id" not in row or "prompt" not in row:
                    raise MissingField(f"{path}:{lineno}: missing required field id/prompt")
                add(row["id"], row["prompt"],
                    _parse_domains(row.get("domains"), f"{path}:{lineno}"), lineno)
    else:
        with path.open("r", encoding="utf-8", newline="") as handle:
            reader = csv.DictReader(handle)
            header = reader.fieldnames or []
            if "id" not in header or "prompt" not in header:
                raise MissingField(f"{path}: CSV header must contain id,prompt")
            for row in reader:
                add(row.get("id"), row.get("prompt"), frozenset(), reader.line_num)

    if not tasks:
        logger.warning("dataset %s is empty", path)
    return tasks


# ---------------------------------------------------------------------------
# Domain classification (library-name registry)
# ---------------------------------------------------------------------------

DOMAIN_LIBRARIES: dict[Domain, tuple[str, ...]] = {
    Domain.COMPUTATION: (
        "os", "pandas", "numpy", "sklearn", "scipy", "math", "nltk", "statistics",
        "cv2", "statsmodels", "tensorflow", "sympy", "textblob", "skimage",
    ),
    Domain.SYSTEM: (
        "os", "json", "csv", "shutil", "glob", "subprocess", "pathlib", "io",
        "zipfile", "sys", "logging", "pickle", "struct", "psutil",
    ),
    Domain.NETWORK: (
        "requests", "urllib", "bs4", "socket", "django", "flask", "ipaddress",
        "smtplib", "http", "flask_mail", "cgi", "ssl", "email", "mechanize", "url",
    ),
    Domain.CRYPTOGRAPHY: (
        "hashlib", "base64", "binascii", "codecs", "rsa", "cryptography", "hmac",
        "blake3", "secrets", "Crypto",
    ),
    Domain.GENERAL: (
        "random", "re", "collections", "itertools", "string", "operator", "heapq",
        "ast", "functools", "regex", "bisect", "inspect", "unicodedata",
    ),
    Domain.DATABASE: ("sqlite3", "mysql", "psycopg2", "sqlalchemy", "pymongo", "sql"),
    Domain.WEB_FRAMEWORKS: ("Django", "Flask", "FastAPI", "Tornado", "Pyramid", "Bottle"),
}

_LIBRARY_PATTERNS: list[tuple[re.Pattern, Domain]] = [
    (re.compile(rf"\b{re.escape(library)}\b"), domain)
    for domain, libraries in DOMAIN_LIBRARIES.items()
    for library in libraries
]


def classify_domains(code_or_prompt: str) -> set[Domain]:
    """Domains referenced by a text, by case-sensitive library-name matching."""
    found = set()
    for pattern, domain in _LIBRARY_PATTERNS:
        if domain not in found and pattern.search(code_or_prompt):
            found.add(domain)
    return found


@dataclass(frozen=True)
class DomainCount:
    count: int
    percent: float


@dataclass(frozen=True)
class DatasetStats:
    total: int
    per_domain: dict[Domain, DomainCount]


def _one_decimal_percent(count: int, total: int) -> float:
    if total == 0:
        return 0.0
    from decimal import ROUND_HALF_UP, Decimal

    return float(
        (Decimal(count) * 100 / Decimal(total)).quantize(Decimal("0.1"), rounding=ROUND_HALF_UP)
    )


def dataset_stats(
    tasks: Iterable[TaskPrompt],
    codes: Mapping[str, str] | None = None,
) -> DatasetStats:
    """Per-domain counts and percentages over the dataset.

    Classification prefers a task's generated code when provided, falling
    back to the prompt text; dataset-declared domains always participate.
    """
    tasks = list(tasks)
    counts = {domain: 0 for domain in Domain}
    for task in tasks:
        subject = codes[task.id] if codes and task.id in codes else task.text
        domains = classify_domains(subject) | set(task.domains)
        for domain in domains:
            counts[domain] += 1
    total = len(tasks)
    return DatasetStats(
        total=total,
        per_domain={
            domain: DomainCount(count=n, percent=_one_decimal_percent(n, total))
            for domain, n in counts.items()
        },
    )


# ---------------------------------------------------------------------------
# Run configuration and orchestration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetSpec
    model_id: str
    provider: ProviderConfig
    strategy: StrategyId
    strategy_cfg: StrategyConfig = StrategyConfig()
    analyzer: AnalyzerId = AnalyzerId.RULESCAN
    eval_analyzers: tuple[AnalyzerId, ...] = ()
    workers: int = 4
    output_dir: str = "runs"
    resume: bool = True
    temperature: float = 0.0
    max_tokens: int = 1024

    def validate(self) -> None:
        if self.analyzer not in (AnalyzerId.BANDIT, AnalyzerId.RULESCAN):
            raise ConfigError("refinement analyzer must be bandit or rulescan")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if not self.model_id:
            raise ConfigError("model_id must be set")


def config_digest(cfg: RunConfig, templates: PromptTemplates | None = None) -> str:
    """Canonical hash of the run-shaping parts of the config.

    Runtime knobs (worker count, output dir, resume, provider transport)
    deliberately do not participate: they must not change what gets computed.
    """
    templates = templates or default_templates()
    canonical = {
        "dataset_name": cfg.dataset.name,
        "dataset_format": cfg.dataset.format.value,
        "model_id": cfg.model_id,
        "strategy": cfg.strategy.value,
        "solutions_j": cfg.strategy_cfg.solutions_j,
        "iterations_k": cfg.strategy_cfg.iterations_k,
        "max_compile_fix_rounds": cfg.strategy_cfg.max_compile_fix_rounds,
        "branch_seed_mode": cfg.strategy_cfg.branch_seed_mode.value,
        "analyzer": cfg.analyzer.value,
        "eval_analyzers": sorted(a.value for a in cfg.eval_analyzers),
        "temperature": f"{cfg.temperature:.4f}",
        "max_tokens": cfg.max_tokens,
        "templates": templates.digest(),
    }
    blob = json.dumps(canonical, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _sanitize_for_filename(value: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.+-]", "-", value) or "unnamed"


def records_path(cfg: RunConfig) -> Path:
    name = f"{_sanitize_for_filename(cfg.model_id)}__{cfg.strategy.value}.jsonl"
    return Path(cfg.output_dir) / name


def utc_clock() -> datetime:
    return datetime.now(timezone.utc)


def resolve_clock(clock: Callable[[], datetime] | None = None) -> Callable[[], datetime]:
    """The run clock; a fixed timestamp in the environment pins it for
    byte-identical reruns."""
    if clock is not None:
        return clock
    fixed = os.environ.get(FIXED_CLOCK_ENV)
    if fixed:
        instant = parse_timestamp(fixed)
        return lambda: instant
    return utc_clock


@dataclass(frozen=True)
class RunSummary:
    completed: int
    skipped: int
    failed: int
    failed_tasks: tuple[tuple[str, str], ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {
            "completed": self.completed,
            "skipped": self.skipped,
            "failed": self.failed,
            "failed_tasks": [list(pair) for pair in self.failed_tasks],
        }


def _check_tools(cfg: RunConfig, analyzer_injected: bool = False) -> None:
    """Fail fast at startup when a required external tool is missing."""
    needed: set[str] = set()
    if not analyzer_injected and cfg.analyzer is AnalyzerId.BANDIT:
        needed.add("bandit")
    for analyzer_id in cfg.eval_analyzers:
        if analyzer_id is AnalyzerId.BANDIT:
            needed.add("bandit")
        elif analyzer_id is AnalyzerId.CODEQL:
            needed.add("codeql")
    for executable in sorted(needed):
        if shutil.which(executable) is None:
            raise ToolNotFound(f"{executable} executable not found on PATH")


def _existing_task_ids(path: Path, model_id: str, strategy: StrategyId, digest: str) -> set[str]:
    done: set[str] = set()
    if not path.exists():
        return done
    with path.open("r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SecpatchError(f"{path}:{lineno}: corrupt run record: {exc}") from exc
            if (
                row.get("model_id") == model_id
                and row.get("strategy") == strategy.value
                and row.get("config_digest") == digest
            ):
                done.add(row.get("task_id"))
    return done


def _eval_report_pair(
    analyzer: BanditAnalyzer | RuleScanAnalyzer,
    trace: RefinementTrace,
) -> dict[str, Any]:
    initial = analyzer.scan(trace.initial[0])
    final_candidate = trace.final_candidate
    if final_candidate.code == trace.initial[0].code:
        final = initial
    else:
        final = analyzer.scan(final_candidate)
    return {"initial": report_to_dict(initial), "final": report_to_dict(final)}


def evaluate_records(
    records: list[RunRecord],
    analyzer_id: AnalyzerId,
    workdir: str | Path | None = None,
) -> list[RunRecord]:
    """Re-score stored records with an evaluation analyzer.

    Both the initial and the final candidate are scanned (the main results
    table needs both phases); reports are stored under
    ``trace.meta["eval_reports"][tool]``. Records already carrying that tool
    are left untouched.
    """
    if analyzer_id is AnalyzerId.CODEQL:
        return _evaluate_records_codeql(records, workdir)
    analyzer = make_analyzer(analyzer_id, workdir)
    out = []
    for record in records:
        existing = record.trace.meta.get("eval_reports", {})
        if analyzer_id.value in existing:
            out.append(record)
            continue
        pair = _eval_report_pair(analyzer, record.trace)
        merged = {**existing, analyzer_id.value: pair}
        trace = replace(record.trace, meta={**record.trace.meta, "eval_reports": merged})
        out.append(replace(record, trace=trace))
    return out


def _evaluate_records_codeql(
    records: list[RunRecord], workdir: str | Path | None
) -> list[RunRecord]:
    codeql = CodeQlAnalyzer(workdir=workdir)
    todo = [
        r for r in records
        if AnalyzerId.CODEQL.value not in r.trace.meta.get("eval_reports", {})
    ]
    if not todo:
        return records
    initial_batch = {r.task_id: r.trace.initial[0] for r in todo}
    final_batch = {
        r.task_id: r.trace.final_candidate
        for r in todo
        if r.trace.final_candidate.code != r.trace.initial[0].code
    }
    initial_reports = codeql.scan_batch(initial_batch)
    final_reports = codeql.scan_batch(final_batch) if final_batch else {}
    out = []
    for record in records:
        if record.task_id not in initial_reports:
            out.append(record)
            continue
        initial = initial_reports[record.task_id]
        final = final_reports.get(record.task_id, initial)
        pair = {"initial": report_to_dict(initial), "final": report_to_dict(final)}
        existing = record.trace.meta.get("eval_reports", {})
        merged = {**existing, AnalyzerId.CODEQL.value: pair}
        trace = replace(record.trace, meta={**record.trace.meta, "eval_reports": merged})
        out.append(replace(record, trace=trace))
    return out


def run_benchmark(
    cfg: RunConfig,
    llm_backend: LlmBackend | None = None,
    analyzer=None,
    templates: PromptTemplates | None = None,
    clock: Callable[[], datetime] | None = None,
) -> RunSummary:
    """Run generate -> scan -> refine -> evaluate over the whole dataset.

    Partial failures are recorded and never abort the batch; records are
    written in dataset order so reruns are byte-identical under replay.
    """
    cfg.validate()
    _check_tools(cfg, analyzer_injected=analyzer is not None)
    templates = templates or default_templates()
    digest = config_digest(cfg, templates)
    clock = resolve_clock(clock)
    tasks = load_dataset(cfg.dataset)

    out_path = records_path(cfg)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    done = _existing_task_ids(out_path, cfg.model_id, cfg.strategy, digest) if cfg.resume else set()
    todo = [task for task in tasks if task.id not in done]
    skipped = len(tasks) - len(todo)
    if not todo:
        return RunSummary(completed=0, skipped=skipped, failed=0)

    try:
        backend = llm_backend if llm_backend is not None else build_backend(cfg.provider)
    except ConfigError as exc:
        raise FatalConfigError(str(exc)) from exc
    scratch: tempfile.TemporaryDirectory | None = None
    if analyzer is None:
        scratch = tempfile.TemporaryDirectory(prefix="secpatch-run-")
        analyzer = make_analyzer(cfg.analyzer, workdir=Path(scratch.name) / "scan")

    inline_evals = [
        make_analyzer(a) for a in cfg.eval_analyzers
        if a not in (AnalyzerId.CODEQL, cfg.analyzer)
    ]
    analyzer_version = analyzer.version() if hasattr(analyzer, "version") else None

    def process(task: TaskPrompt) -> RunRecord:
        llm = LlmClient(
            backend=backend,
            model_id=cfg.model_id,
            temperature=cfg.temperature,
            max_tokens=cfg.max_tokens,
        )
        started = clock()
        generated = generate_initial(task, llm, templates=templates, cfg=cfg.strategy_cfg)
        initial_report = analyzer.scan(generated.candidate)
        gen_meta: dict[str, Any] = {"generation_llm_calls": generated.llm_calls}
        if generated.compile_error is not None:
            gen_meta["compile_error"] = {
                "message": generated.compile_error.message,
                "line": generated.compile_error.line,
            }
        if analyzer_version:
            gen_meta["analyzer_version"] = analyzer_version
        if is_secure(initial_report):
            trace = RefinementTrace(
                task_id=task.id,
                strategy=cfg.strategy,
                initial=(generated.candidate, initial_report),
                attempts=(),
                terminal=Terminal.FIXED_AT_GENERATION,
                total_llm_calls=0,
                meta=gen_meta,
            )
        else:
            trace = run_strategy(
                cfg.strategy, task, generated.candidate, initial_report,
                llm, analyzer, cfg.strategy_cfg, templates,
            )
            trace = with_trace_meta(trace, **gen_meta)
        if inline_evals:
            eval_reports: dict[str, Any] = {}
            for evaluator in inline_evals:
                eval_reports[evaluator.id.value] = _eval_report_pair(evaluator, trace)
            trace = with_trace_meta(trace, eval_reports=eval_reports)
        finished = clock()
        return RunRecord(
            task_id=task.id,
            model_id=cfg.model_id,
            strategy=cfg.strategy,
            trace=trace,
            started_at=started,
            finished_at=finished,
            config_digest=digest,
        )

    completed = 0
    failures: list[tuple[str, str]] = []
    pending: dict[int, RunRecord | None] = {}
    next_write = 0
    try:
        with out_path.open("a", encoding="utf-8") as out:
            with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
                futures = {pool.submit(process, task): idx for idx, task in enumerate(todo)}
                for future in as_completed(futures):
                    idx = futures[future]
                    try:
                        pending[idx] = future.result()
                    except Exception as exc:  # noqa: BLE001 - isolate per-task failures
                        logger.error("task %s failed: %s", todo[idx].id, exc)
                        failures.append((todo[idx].id, f"{type(exc).__name__}: {exc}"))
                        pending[idx] = None
                    while next_write in pending:
                        record = pending.pop(next_write)
                        if record is not None:
                            out.write(record_to_json_line(record) + "\n")
                            out.flush()
                            completed += 1
                        next_write += 1
    finally:
        if scratch is not None:
            scratch.cleanup()

    if AnalyzerId.CODEQL in cfg.eval_analyzers:
        _run_codeql_post_pass(out_path)

    failures.sort(key=lambda pair: pair[0])
    return RunSummary(
        completed=completed,
        skipped=skipped,
        failed=len(failures),
        failed_tasks=tuple(failures),
    )


def _run_codeql_post_pass(out_path: Path) -> None:
    """Re-score the whole record file with CodeQL as one serialized batch."""
    records = load_records(out_path)
    updated = evaluate_records(records, AnalyzerId.CODEQL)
    tmp = out_path.with_suffix(".jsonl.tmp")
    with tmp.open("w", encoding="utf-8") as handle:
        for record in updated:
            handle.write(record_to_json_line(record) + "\n")
    tmp.replace(out_path)
