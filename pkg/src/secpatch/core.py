"""Shared domain types for the security-patching pipeline.

Everything downstream (analyzers, refinement strategies, the batch harness,
reporting) works in terms of these types: a task prompt, a code candidate,
an analyzer report, proposed fix solutions, and the refinement trace that
records how an attempt tree played out. All types are immutable values after
construction and safe to share across worker threads.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Iterator


class SecpatchError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(SecpatchError):
    """Invalid or inconsistent configuration."""


class EmptyResponse(SecpatchError):
    """An LLM response contained no usable code."""


class ToolErrorPropagated(SecpatchError):
    """An operation consumed a report from a failed analyzer run."""


# ---------------------------------------------------------------------------
# Enumerations (values are the stable serialized names)
# ---------------------------------------------------------------------------


class SourceDataset(str, Enum):
    LLMSECEVAL = "LLMSecEval"
    SECURITYEVAL = "SecurityEval"
    PYTHONSECURITYEVAL = "PythonSecurityEval"
    CUSTOM = "Custom"


class Domain(str, Enum):
    COMPUTATION = "Computation"
    SYSTEM = "System"
    NETWORK = "Network"
    CRYPTOGRAPHY = "Cryptography"
    GENERAL = "General"
    DATABASE = "Database"
    WEB_FRAMEWORKS = "WebFrameworks"


class AnalyzerId(str, Enum):
    BANDIT = "bandit"
    CODEQL = "codeql"
    RULESCAN = "rulescan"


class StrategyId(str, Enum):
    DIRECT = "direct"
    SELF_DEBUG = "selfdebug"
    BANDIT_FEEDBACK = "bandit"
    VERBALIZATION = "verbalize"
    FDSP = "fdsp"


class Origin(str, Enum):
    INITIAL = "initial"
    COMPILE_FIXED = "compile_fixed"
    REFINED = "refined"


class Severity(str, Enum):
    LOW = "low"
    MEDIUM = "medium"
    HIGH = "high"
    UNKNOWN = "unknown"

    @classmethod
    def parse(cls, value: str | None) -> "Severity":
        try:
            return cls((value or "").lower())
        except ValueError:
            return cls.UNKNOWN


class Confidence(str, Enum):
    LOW = "low"
    MEDIUM = "medium"
    HIGH = "high"
    UNKNOWN = "unknown"

    @classmethod
    def parse(cls, value: str | None) -> "Confidence":
        try:
            return cls((value or "").lower())
        except ValueError:
            return cls.UNKNOWN


class ScanStatus(str, Enum):
    CLEAN = "clean"
    FINDINGS_PRESENT = "findings_present"
    TOOL_ERROR = "tool_error"


class Terminal(str, Enum):
    FIXED_AT_GENERATION = "fixed_at_generation"
    FIXED = "fixed"
    UNFIXED = "unfixed"
    ERROR = "error"


# ---------------------------------------------------------------------------
# Value types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TaskPrompt:
    """One natural-language task from a benchmark dataset."""

    id: str
    text: str
    source_dataset: SourceDataset = SourceDataset.CUSTOM
    domains: frozenset[Domain] = frozenset()

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("TaskPrompt.id must be non-empty")
        if not self.text:
            raise ValueError("TaskPrompt.text must be non-empty")


@dataclass(frozen=True)
class Lineage:
    """Where a refined candidate came from: strategy, solution branch, round."""

    strategy: StrategyId
    solution_index: int
    iteration: int

    def __post_init__(self) -> None:
        if self.solution_index < 1:
            raise ValueError("lineage solution_index must be >= 1")
        if self.iteration < 1:
            raise ValueError("lineage iteration must be >= 1")


@dataclass(frozen=True)
class CodeCandidate:
    """A generated or refined program, treated as opaque source text."""

    code: str
    origin: Origin = Origin.INITIAL
    lineage: Lineage | None = None

    def __post_init__(self) -> None:
        if not self.code:
            raise ValueError("CodeCandidate.code must be non-empty")
        if (self.origin is Origin.REFINED) != (self.lineage is not None):
            raise ValueError("lineage must be present exactly when origin is refined")


@dataclass(frozen=True)
class Finding:
    """One analyzer finding, normalized across tools."""

    rule_id: str
    message: str
    line: int
    tool: AnalyzerId
    severity: Severity = Severity.UNKNOWN
    confidence: Confidence = Confidence.UNKNOWN
    cwe: str | None = None

    def __post_init__(self) -> None:
        if not self.rule_id:
            raise ValueError("Finding.rule_id must be non-empty")
        if self.line < 1:
            raise ValueError("Finding.line must be >= 1")

    @property
    def sort_key(self) -> tuple[int, str]:
        return (self.line, self.rule_id)


@dataclass(frozen=True)
class AnalysisReport:
    """An analyzer run over one candidate: findings plus the verbatim payload.

    Findings are canonically sorted by (line, rule_id) so report equality is
    well-defined regardless of tool output ordering.
    """

    tool: AnalyzerId
    findings: tuple[Finding, ...]
    raw: str
    exit_status: ScanStatus

    def __post_init__(self) -> None:
        keys = [f.sort_key for f in self.findings]
        if keys != sorted(keys):
            raise ValueError("findings must be sorted by (line, rule_id)")
        if self.exit_status is ScanStatus.CLEAN and self.findings:
            raise ValueError("clean report cannot carry findings")
        if self.exit_status is ScanStatus.FINDINGS_PRESENT and not self.findings:
            raise ValueError("findings_present report must carry findings")

    @classmethod
    def build(cls, tool: AnalyzerId, findings: Iterable[Finding], raw: str) -> "AnalysisReport":
        ordered = tuple(sorted(findings, key=lambda f: f.sort_key))
        status = ScanStatus.FINDINGS_PRESENT if ordered else ScanStatus.CLEAN
        return cls(tool=tool, findings=ordered, raw=raw, exit_status=status)

    @classmethod
    def tool_error(cls, tool: AnalyzerId, raw: str) -> "AnalysisReport":
        return cls(tool=tool, findings=(), raw=raw, exit_status=ScanStatus.TOOL_ERROR)

    @property
    def is_clean(self) -> bool:
        return self.exit_status is ScanStatus.CLEAN


@dataclass(frozen=True)
class Solution:
    """One proposed mitigation strategy out of a numbered set."""

    index: int
    title: str
    body: str

    def __post_init__(self) -> None:
        if self.index < 1:
            raise ValueError("Solution.index must be >= 1")
        if not self.body:
            raise ValueError("Solution.body must be non-empty")


@dataclass(frozen=True)
class RefinementAttempt:
    """One repair pass: an LLM-produced candidate and its fresh scan."""

    solution_index: int  # 0 for strategies without solution branches
    iteration: int
    candidate: CodeCandidate
    report: AnalysisReport
    llm_calls_used: int = 1
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.solution_index < 0:
            raise ValueError("attempt solution_index must be >= 0")
        if self.iteration < 1:
            raise ValueError("attempt iteration must be >= 1")
        if self.llm_calls_used < 1:
            raise ValueError("attempt llm_calls_used must be >= 1")


@dataclass(frozen=True)
class RefinementTrace:
    """The full attempt record for one task under one strategy.

    Invariants enforced here: a fixed trace ends on a clean report, a
    fixed-at-generation trace has no attempts, and no attempt ever follows
    an attempt whose report came back clean (early stop).
    """

    task_id: str
    strategy: StrategyId
    initial: tuple[CodeCandidate, AnalysisReport]
    attempts: tuple[RefinementAttempt, ...]
    terminal: Terminal
    total_llm_calls: int
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.total_llm_calls < 0:
            raise ValueError("total_llm_calls must be >= 0")
        for attempt in self.attempts[:-1]:
            if attempt.report.is_clean:
                raise ValueError("no attempt may follow a clean report")
        if self.terminal is Terminal.FIXED:
            if not self.attempts or not self.attempts[-1].report.is_clean:
                raise ValueError("fixed trace must end on a clean report")
        if self.terminal is Terminal.FIXED_AT_GENERATION and self.attempts:
            raise ValueError("fixed_at_generation trace cannot carry attempts")
        if self.terminal is Terminal.UNFIXED:
            if not self.attempts or self.attempts[-1].report.is_clean:
                raise ValueError("unfixed trace must end on a flagged report")

    @property
    def final_attempt(self) -> RefinementAttempt | None:
        """The attempt designated as the trace outcome, if any.

        For unfixed traces a strategy may designate a non-last attempt via
        meta["final"] (e.g. the attempt with the fewest findings).
        """
        if not self.attempts:
            return None
        pointer = self.meta.get("final")
        if isinstance(pointer, dict):
            for attempt in self.attempts:
                if (
                    attempt.solution_index == pointer.get("solution_index")
                    and attempt.iteration == pointer.get("iteration")
                ):
                    return attempt
        return self.attempts[-1]

    @property
    def final_candidate(self) -> CodeCandidate:
        """Best available program after refinement (original if none)."""
        if self.terminal is Terminal.ERROR:
            return self.initial[0]
        attempt = self.final_attempt
        return attempt.candidate if attempt is not None else self.initial[0]

    @property
    def final_report(self) -> AnalysisReport:
        """Report matching :attr:`final_candidate`."""
        if self.terminal is Terminal.ERROR:
            return self.initial[1]
        attempt = self.final_attempt
        return attempt.report if attempt is not None else self.initial[1]


@dataclass(frozen=True)
class RunRecord:
    """One persisted (task, model, strategy) execution."""

    task_id: str
    model_id: str
    strategy: StrategyId
    trace: RefinementTrace
    started_at: datetime
    finished_at: datetime
    config_digest: str

    def __post_init__(self) -> None:
        if self.finished_at < self.started_at:
            raise ValueError("finished_at must be >= started_at")


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

_FENCE_RE = re.compile(r"```([^\n`]*)\n(.*?)```", re.DOTALL)
_PYTHON_TAGS = {"python", "python3", "py"}


def extract_code(
    llm_response: str,
    origin: Origin = Origin.INITIAL,
    lineage: Lineage | None = None,
) -> CodeCandidate:
    """Pull program text out of a chat response.

    Preference order: first fenced block tagged as python, then the first
    fenced block of any tag, then the whole response trimmed. Leading lines
    beginning with "#" are legal code (prompt echoes) and are preserved.

    Raises :class:`EmptyResponse` when no non-whitespace code can be found.
    """
    if not llm_response or not llm_response.strip():
        raise EmptyResponse("LLM response is empty or whitespace-only")
    python_blocks: list[str] = []
    other_blocks: list[str] = []
    for match in _FENCE_RE.finditer(llm_response):
        tag = match.group(1).strip().lower()
        body = match.group(2).strip("\n")
        if not body.strip():
            continue
        (python_blocks if tag in _PYTHON_TAGS else other_blocks).append(body)
    if python_blocks:
        code = python_blocks[0]
    elif other_blocks:
        code = other_blocks[0]
    else:
        code = llm_response.strip()
    code = code.strip("\n").rstrip()
    if not code.strip():
        raise EmptyResponse("LLM response contained only empty code blocks")
    return CodeCandidate(code=code, origin=origin, lineage=lineage)


def is_secure(report: AnalysisReport) -> bool:
    """The analyzer stop condition: true exactly when the report is clean."""
    if report.exit_status is ScanStatus.TOOL_ERROR:
        raise ToolErrorPropagated(f"{report.tool.value} run failed; report is unusable")
    return not report.findings


# ---------------------------------------------------------------------------
# Persisted record format (JSONL, fixed key order, UTF-8)
# ---------------------------------------------------------------------------


def _lineage_to_dict(lineage: Lineage | None) -> dict[str, Any] | None:
    if lineage is None:
        return None
    return {
        "strategy": lineage.strategy.value,
        "solution_index": lineage.solution_index,
        "iteration": lineage.iteration,
    }


def _candidate_to_dict(candidate: CodeCandidate) -> dict[str, Any]:
    return {
        "code": candidate.code,
        "origin": candidate.origin.value,
        "lineage": _lineage_to_dict(candidate.lineage),
    }


def _finding_to_dict(finding: Finding) -> dict[str, Any]:
    return {
        "rule_id": finding.rule_id,
        "cwe": finding.cwe,
        "severity": finding.severity.value,
        "confidence": finding.confidence.value,
        "message": finding.message,
        "line": finding.line,
        "tool": finding.tool.value,
    }


def report_to_dict(report: AnalysisReport) -> dict[str, Any]:
    return {
        "tool": report.tool.value,
        "findings": [_finding_to_dict(f) for f in report.findings],
        "raw": report.raw,
        "exit_status": report.exit_status.value,
    }


def _attempt_to_dict(attempt: RefinementAttempt) -> dict[str, Any]:
    return {
        "solution_index": attempt.solution_index,
        "iteration": attempt.iteration,
        "candidate": _candidate_to_dict(attempt.candidate),
        "report": report_to_dict(attempt.report),
        "llm_calls_used": attempt.llm_calls_used,
        "meta": attempt.meta,
    }


def _trace_to_dict(trace: RefinementTrace) -> dict[str, Any]:
    return {
        "task_id": trace.task_id,
        "strategy": trace.strategy.value,
        "initial": {
            "candidate": _candidate_to_dict(trace.initial[0]),
            "report": report_to_dict(trace.initial[1]),
        },
        "attempts": [_attempt_to_dict(a) for a in trace.attempts],
        "terminal": trace.terminal.value,
        "total_llm_calls": trace.total_llm_calls,
        "meta": trace.meta,
    }


def record_to_dict(record: RunRecord) -> dict[str, Any]:
    """Wire representation with the documented fixed key order."""
    return {
        "task_id": record.task_id,
        "model_id": record.model_id,
        "strategy": record.strategy.value,
        "trace": _trace_to_dict(record.trace),
        "started_at": record.started_at.isoformat(),
        "finished_at": record.finished_at.isoformat(),
        "config_digest": record.config_digest,
    }


def record_to_json_line(record: RunRecord) -> str:
    return json.dumps(record_to_dict(record), ensure_ascii=False, separators=(",", ":"))


def _lineage_from_dict(data: dict[str, Any] | None) -> Lineage | None:
    if data is None:
        return None
    return Lineage(
        strategy=StrategyId(data["strategy"]),
        solution_index=data["solution_index"],
        iteration=data["iteration"],
    )


def _candidate_from_dict(data: dict[str, Any]) -> CodeCandidate:
    return CodeCandidate(
        code=data["code"],
        origin=Origin(data["origin"]),
        lineage=_lineage_from_dict(data.get("lineage")),
    )


def _finding_from_dict(data: dict[str, Any]) -> Finding:
    return Finding(
        rule_id=data["rule_id"],
        message=data["message"],
        line=data["line"],
        tool=AnalyzerId(data["tool"]),
        severity=Severity(data["severity"]),
        confidence=Confidence(data["confidence"]),
        cwe=data.get("cwe"),
    )


def report_from_dict(data: dict[str, Any]) -> AnalysisReport:
    return AnalysisReport(
        tool=AnalyzerId(data["tool"]),
        findings=tuple(_finding_from_dict(f) for f in data["findings"]),
        raw=data["raw"],
        exit_status=ScanStatus(data["exit_status"]),
    )


def _attempt_from_dict(data: dict[str, Any]) -> RefinementAttempt:
    return RefinementAttempt(
        solution_index=data["solution_index"],
        iteration=data["iteration"],
        candidate=_candidate_from_dict(data["candidate"]),
        report=report_from_dict(data["report"]),
        llm_calls_used=data["llm_calls_used"],
        meta=data.get("meta", {}),
    )


def _trace_from_dict(data: dict[str, Any]) -> RefinementTrace:
    return RefinementTrace(
        task_id=data["task_id"],
        strategy=StrategyId(data["strategy"]),
        initial=(
            _candidate_from_dict(data["initial"]["candidate"]),
            report_from_dict(data["initial"]["report"]),
        ),
        attempts=tuple(_attempt_from_dict(a) for a in data["attempts"]),
        terminal=Terminal(data["terminal"]),
        total_llm_calls=data["total_llm_calls"],
        meta=data.get("meta", {}),
    )


def parse_timestamp(value: str) -> datetime:
    """Parse an RFC 3339 timestamp, accepting a trailing Z for UTC."""
    if value.endswith(("Z", "z")):
        value = value[:-1] + "+00:00"
    parsed = datetime.fromisoformat(value)
    if parsed.tzinfo is None:
        parsed = parsed.replace(tzinfo=timezone.utc)
    return parsed


def record_from_dict(data: dict[str, Any]) -> RunRecord:
    return RunRecord(
        task_id=data["task_id"],
        model_id=data["model_id"],
        strategy=StrategyId(data["strategy"]),
        trace=_trace_from_dict(data["trace"]),
        started_at=parse_timestamp(data["started_at"]),
        finished_at=parse_timestamp(data["finished_at"]),
        config_digest=data["config_digest"],
    )


def record_from_json_line(line: str) -> RunRecord:
    return record_from_dict(json.loads(line))


def append_records(path: str | Path, records: Iterable[RunRecord]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a", encoding="utf-8") as handle:
        for record in records:
            handle.write(record_to_json_line(record) + "\n")


def iter_records(path: str | Path) -> Iterator[RunRecord]:
    with Path(path).open("r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                yield record_from_json_line(line)
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise SecpatchError(f"{path}:{lineno}: malformed run record: {exc}") from exc


def load_records(path: str | Path) -> list[RunRecord]:
    return list(iter_records(path))


def with_trace_meta(trace: RefinementTrace, **extra: Any) -> RefinementTrace:
    """A copy of the trace with additional meta entries (existing keys win)."""
    merged = {**extra, **trace.meta}
    return replace(trace, meta=merged)
