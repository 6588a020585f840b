"""Refinement strategies.

Five ways to turn a flagged candidate into a (hopefully) clean one, each
producing a :class:`~secpatch.core.RefinementTrace`:

* ``direct_refine`` - one shot: ask whether the code has a security issue
  and to fix it if so.
* ``self_debug_refine`` - two passes: the model explains its code
  line-by-line, then fixes it using its own explanation.
* ``bandit_feedback_refine`` - one shot with the analyzer report rendered
  into the prompt (rule id, message, flagged source line).
* ``verbalization_refine`` - the terse report is first rewritten by the
  model into detailed natural-language feedback, then used to fix.
* ``fdsp_refine`` - feedback-driven security patching: generate J candidate
  mitigation strategies from the report, then iterate each branch up to K
  repair rounds, stopping as soon as a scan comes back clean.

The initial generation step (``generate_initial``) lives here too: one
generation call plus up to a configured number of compile-error repair
rounds. Strategies never mutate the initial candidate; the original program
is recoverable from every trace.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from importlib import resources
from typing import Any, Callable, Mapping, Protocol

from .core import (
    AnalysisReport,
    CodeCandidate,
    EmptyResponse,
    Lineage,
    Origin,
    RefinementAttempt,
    RefinementTrace,
    SecpatchError,
    Solution,
    StrategyId,
    TaskPrompt,
    Terminal,
    extract_code,
    is_secure,
)
from .analysis import CompileError, syntax_check
from .llm import LlmClient, LlmError


class PreconditionError(SecpatchError):
    """A strategy was invoked on input that violates its precondition."""


class PromptError(SecpatchError):
    """A template referenced a placeholder that was not supplied."""


class BranchSeedMode(str, Enum):
    FROM_ORIGINAL = "from_original"
    CHAINED = "chained"


@dataclass(frozen=True)
class StrategyConfig:
    solutions_j: int = 3
    iterations_k: int = 2
    max_compile_fix_rounds: int = 2
    branch_seed_mode: BranchSeedMode = BranchSeedMode.FROM_ORIGINAL

    def __post_init__(self) -> None:
        if self.solutions_j < 1:
            raise ValueError("solutions_j must be >= 1")
        if self.iterations_k < 1:
            raise ValueError("iterations_k must be >= 1")
        if self.max_compile_fix_rounds < 0:
            raise ValueError("max_compile_fix_rounds must be >= 0")


TEMPLATE_NAMES = (
    "generation",
    "compile_fix",
    "direct",
    "explain",
    "debug_fix",
    "bandit_fix",
    "verbalize",
    "verbalized_fix",
    "solution_gen",
    "fdsp_fix",
)


@dataclass(frozen=True)
class PromptTemplates:
    """Named prompt templates with ``{placeholder}`` slots.

    Templates ship as versioned resource files; :meth:`digest` identifies the
    exact template set a run used.
    """

    templates: Mapping[str, str]

    def __post_init__(self) -> None:
        missing = [name for name in TEMPLATE_NAMES if name not in self.templates]
        if missing:
            raise ValueError(f"missing templates: {missing}")

    def render(self, name: str, **values: Any) -> str:
        try:
            return self.templates[name].format(**values)
        except KeyError as exc:
            raise PromptError(f"template {name!r} needs placeholder {exc.args[0]!r}") from exc

    def digest(self) -> str:
        blob = "\x00".join(f"{name}\x01{self.templates[name]}" for name in sorted(self.templates))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@lru_cache(maxsize=1)
def default_templates() -> PromptTemplates:
    root = resources.files("secpatch").joinpath("templates")
    loaded = {
        name: root.joinpath(f"{name}.txt").read_text(encoding="utf-8").strip("\n")
        for name in TEMPLATE_NAMES
    }
    return PromptTemplates(templates=loaded)


class Analyzer(Protocol):
    id: Any

    def scan(self, candidate: CodeCandidate) -> AnalysisReport: ...


SyntaxChecker = Callable[[CodeCandidate], "CompileError | None"]


def render_report_feedback(report: AnalysisReport, code: str) -> str:
    """Render findings the way the analyzer presents them to a human:
    rule id, message, and the flagged source line."""
    lines = code.splitlines()
    blocks = []
    for finding in report.findings:
        source = lines[finding.line - 1].strip() if 0 < finding.line <= len(lines) else ""
        blocks.append(f"Issue: [{finding.rule_id}] {finding.message}\nLine {finding.line}:{source}")
    return "\n\n".join(blocks)


def _compile_error_text(error: CompileError) -> str:
    if error.line is not None:
        return f"line {error.line}: {error.message}"
    return error.message


def _require_flagged(report: AnalysisReport) -> None:
    if is_secure(report):
        raise PreconditionError("refinement requires a report with at least one finding")


def _error_trace(
    task: TaskPrompt,
    strategy: StrategyId,
    initial: tuple[CodeCandidate, AnalysisReport],
    calls: int,
    cause: Exception,
    meta: dict[str, Any] | None = None,
) -> RefinementTrace:
    merged = dict(meta or {})
    merged["error"] = f"{type(cause).__name__}: {cause}"
    return RefinementTrace(
        task_id=task.id,
        strategy=strategy,
        initial=initial,
        attempts=(),
        terminal=Terminal.ERROR,
        total_llm_calls=calls,
        meta=merged,
    )


def _attempt_meta(candidate: CodeCandidate, extra: dict[str, Any] | None = None) -> dict[str, Any]:
    meta = dict(extra or {})
    syntax = syntax_check(candidate)
    if syntax is not None:
        # Post-refinement syntax breaks are recorded, not repaired.
        meta["syntax_error"] = {"message": syntax.message, "line": syntax.line}
    return meta


# ---------------------------------------------------------------------------
# Initial generation (one shot plus compile-error repair rounds)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GenerationResult:
    candidate: CodeCandidate
    llm_calls: int
    compile_error: CompileError | None = None


def generate_initial(
    task: TaskPrompt,
    llm: LlmClient,
    checker: SyntaxChecker = syntax_check,
    templates: PromptTemplates | None = None,
    cfg: StrategyConfig = StrategyConfig(),
) -> GenerationResult:
    """Generate a program for the task, repairing compile errors if needed.

    Returns the first syntactically valid candidate. When the error persists
    through every repair round, the last candidate is returned with origin
    ``initial`` and the unresolved error attached.
    """
    templates = templates or default_templates()
    calls = 1
    text = llm.ask(templates.render("generation", task=task.text))
    candidate = extract_code(text)
    error = checker(candidate)
    rounds = 0
    while error is not None and rounds < cfg.max_compile_fix_rounds:
        calls += 1
        rounds += 1
        text = llm.ask(
            templates.render(
                "compile_fix",
                task=task.text,
                code=candidate.code,
                error=_compile_error_text(error),
            )
        )
        candidate = extract_code(text, origin=Origin.COMPILE_FIXED)
        error = checker(candidate)
    if error is not None and candidate.origin is not Origin.INITIAL:
        candidate = CodeCandidate(code=candidate.code, origin=Origin.INITIAL)
    return GenerationResult(candidate=candidate, llm_calls=calls, compile_error=error)


# ---------------------------------------------------------------------------
# Baseline strategies
# ---------------------------------------------------------------------------


def direct_refine(
    task: TaskPrompt,
    candidate: CodeCandidate,
    report: AnalysisReport,
    llm: LlmClient,
    analyzer: Analyzer,
    templates: PromptTemplates | None = None,
) -> RefinementTrace:
    templates = templates or default_templates()
    _require_flagged(report)
    initial = (candidate, report)
    calls = 1
    try:
        text = llm.ask(templates.render("direct", code=candidate.code))
        refined = extract_code(
            text, origin=Origin.REFINED, lineage=Lineage(StrategyId.DIRECT, 1, 1)
        )
    except (LlmError, EmptyResponse) as exc:
        return _error_trace(task, StrategyId.DIRECT, initial, calls, exc)
    new_report = analyzer.scan(refined)
    attempt = RefinementAttempt(
        solution_index=0,
        iteration=1,
        candidate=refined,
        report=new_report,
        llm_calls_used=1,
        meta=_attempt_meta(refined),
    )
    return RefinementTrace(
        task_id=task.id,
        strategy=StrategyId.DIRECT,
        initial=initial,
        attempts=(attempt,),
        terminal=Terminal.FIXED if new_report.is_clean else Terminal.UNFIXED,
        total_llm_calls=calls,
    )


def self_debug_refine(
    task: TaskPrompt,
    candidate: CodeCandidate,
    report: AnalysisReport,
    llm: LlmClient,
    analyzer: Analyzer,
    templates: PromptTemplates | None = None,
) -> RefinementTrace:
    """Two passes: explain the code line-by-line, then fix it with the
    explanation as feedback. Exactly two model calls."""
    templates = templates or default_templates()
    _require_flagged(report)
    initial = (candidate, report)
    calls = 1
    try:
        explanation = llm.ask(templates.render("explain", code=candidate.code))
    except (LlmError, EmptyResponse) as exc:
        return _error_trace(task, StrategyId.SELF_DEBUG, initial, calls, exc)
    calls += 1
    try:
        text = llm.ask(
            templates.render("debug_fix", code=candidate.code, explanation=explanation)
        )
        refined = extract_code(
            text, origin=Origin.REFINED, lineage=Lineage(StrategyId.SELF_DEBUG, 1, 1)
        )
    except (LlmError, EmptyResponse) as exc:
        return _error_trace(
            task, StrategyId.SELF_DEBUG, initial, calls, exc,
            meta={"explanation": explanation},
        )
    new_report = analyzer.scan(refined)
    attempt = RefinementAttempt(
        solution_index=0,
        iteration=1,
        candidate=refined,
        report=new_report,
        llm_calls_used=2,
        meta=_attempt_meta(refined, {"explanation": explanation}),
    )
    return RefinementTrace(
        task_id=task.id,
        strategy=StrategyId.SELF_DEBUG,
        initial=initial,
        attempts=(attempt,),
        terminal=Terminal.FIXED if new_report.is_clean else Terminal.UNFIXED,
        total_llm_calls=calls,
    )


def bandit_feedback_refine(
    task: TaskPrompt,
    candidate: CodeCandidate,
    report: AnalysisReport,
    llm: LlmClient,
    analyzer: Analyzer,
    templates: PromptTemplates | None = None,
) -> RefinementTrace:
    """One shot with the raw analyzer report in the prompt. The report only
    highlights the problematic lines; it proposes no fix."""
    templates = templates or default_templates()
    _require_flagged(report)
    initial = (candidate, report)
    feedback = render_report_feedback(report, candidate.code)
    calls = 1
    try:
        text = llm.ask(templates.render("bandit_fix", code=candidate.code, report=feedback))
        refined = extract_code(
            text, origin=Origin.REFINED, lineage=Lineage(StrategyId.BANDIT_FEEDBACK, 1, 1)
        )
    except (LlmError, EmptyResponse) as exc:
        return _error_trace(task, StrategyId.BANDIT_FEEDBACK, initial, calls, exc)
    new_report = analyzer.scan(refined)
    attempt = RefinementAttempt(
        solution_index=0,
        iteration=1,
        candidate=refined,
        report=new_report,
        llm_calls_used=1,
        meta=_attempt_meta(refined),
    )
    return RefinementTrace(
        task_id=task.id,
        strategy=StrategyId.BANDIT_FEEDBACK,
        initial=initial,
        attempts=(attempt,),
        terminal=Terminal.FIXED if new_report.is_clean else Terminal.UNFIXED,
        total_llm_calls=calls,
    )


def verbalize(
    report: AnalysisReport,
    candidate: CodeCandidate,
    llm: LlmClient,
    templates: PromptTemplates | None = None,
) -> str:
    """Rewrite the terse analyzer report into detailed prose feedback."""
    templates = templates or default_templates()
    _require_flagged(report)
    feedback = render_report_feedback(report, candidate.code)
    return llm.ask(templates.render("verbalize", code=candidate.code, report=feedback))


def verbalization_refine(
    task: TaskPrompt,
    candidate: CodeCandidate,
    report: AnalysisReport,
    llm: LlmClient,
    analyzer: Analyzer,
    templates: PromptTemplates | None = None,
) -> RefinementTrace:
    templates = templates or default_templates()
    _require_flagged(report)
    initial = (candidate, report)
    calls = 1
    try:
        prose = verbalize(report, candidate, llm, templates)
    except (LlmError, EmptyResponse) as exc:
        return _error_trace(task, StrategyId.VERBALIZATION, initial, calls, exc)
    calls += 1
    try:
        text = llm.ask(
            templates.render("verbalized_fix", code=candidate.code, feedback=prose)
        )
        refined = extract_code(
            text, origin=Origin.REFINED, lineage=Lineage(StrategyId.VERBALIZATION, 1, 1)
        )
    except (LlmError, EmptyResponse) as exc:
        return _error_trace(
            task, StrategyId.VERBALIZATION, initial, calls, exc,
            meta={"verbalization": prose},
        )
    new_report = analyzer.scan(refined)
    attempt = RefinementAttempt(
        solution_index=0,
        iteration=1,
        candidate=refined,
        report=new_report,
        llm_calls_used=2,
        meta=_attempt_meta(refined),
    )
    return RefinementTrace(
        task_id=task.id,
        strategy=StrategyId.VERBALIZATION,
        initial=initial,
        attempts=(attempt,),
        terminal=Terminal.FIXED if new_report.is_clean else Terminal.UNFIXED,
        total_llm_calls=calls,
        meta={"verbalization": prose},
    )


# ---------------------------------------------------------------------------
# Solution generation and the branching refinement loop
# ---------------------------------------------------------------------------

_ITEM_MARKER_RE = re.compile(r"(?m)^\s*(?:\*\*)?(\d{1,2})[.)]\s*")
_TITLE_MAX_CHARS = 80


def _extract_title(body: str) -> str:
    first_line = body.splitlines()[0]
    colon = first_line.find(":")
    if 0 < colon <= _TITLE_MAX_CHARS:
        return first_line[:colon].strip("*# ").strip()
    return ""


def parse_solutions(text: str, j: int) -> tuple[list[Solution], bool]:
    """Split a response into numbered solutions.

    Accepts "1)", "1." and "**1)**" style markers. When fewer than ``j``
    items parse out, the whole response becomes solution 1 and the shortfall
    flag is set. At most ``j`` solutions are returned.
    """
    markers = list(_ITEM_MARKER_RE.finditer(text))
    items: list[str] = []
    for index, marker in enumerate(markers):
        end = markers[index + 1].start() if index + 1 < len(markers) else len(text)
        body = text[marker.end():end].strip().lstrip("*").strip()
        if body:
            items.append(body)
    if len(items) < j:
        return [Solution(index=1, title="", body=text.strip())], True
    items = items[:j]
    return (
        [
            Solution(index=idx, title=_extract_title(body), body=body)
            for idx, body in enumerate(items, start=1)
        ],
        False,
    )


@dataclass(frozen=True)
class SolutionBatch:
    solutions: tuple[Solution, ...]
    shortfall: bool
    raw: str


def generate_solutions(
    candidate: CodeCandidate,
    report: AnalysisReport,
    j: int,
    llm: LlmClient,
    templates: PromptTemplates | None = None,
) -> SolutionBatch:
    """One model call proposing ``j`` distinct, numbered mitigation strategies."""
    templates = templates or default_templates()
    _require_flagged(report)
    if j < 1:
        raise PreconditionError("solution count must be >= 1")
    feedback = render_report_feedback(report, candidate.code)
    text = llm.ask(
        templates.render("solution_gen", code=candidate.code, report=feedback, J=j)
    )
    solutions, shortfall = parse_solutions(text, j)
    return SolutionBatch(solutions=tuple(solutions), shortfall=shortfall, raw=text)


def fdsp_refine(
    task: TaskPrompt,
    candidate: CodeCandidate,
    report: AnalysisReport,
    llm: LlmClient,
    analyzer: Analyzer,
    cfg: StrategyConfig = StrategyConfig(),
    templates: PromptTemplates | None = None,
) -> RefinementTrace:
    """Feedback-driven security patching.

    One call proposes J mitigation strategies from the analyzer report; each
    strategy opens a branch of up to K repair rounds. Branches start from the
    original program (configurable) while rounds within a branch chain on the
    previous round's output. The loop stops the moment a scan comes back
    clean. A model failure abandons the current branch and moves on; the
    trace terminal is ``error`` only when every branch was abandoned.
    """
    templates = templates or default_templates()
    _require_flagged(report)
    initial = (candidate, report)
    calls = 1
    try:
        batch = generate_solutions(candidate, report, cfg.solutions_j, llm, templates)
    except (LlmError, EmptyResponse) as exc:
        return _error_trace(task, StrategyId.FDSP, initial, calls, exc)
    meta: dict[str, Any] = {
        "solutions": [
            {"index": s.index, "title": s.title, "body": s.body} for s in batch.solutions
        ],
        "solution_shortfall": batch.shortfall,
        "branch_seed_mode": cfg.branch_seed_mode.value,
    }
    attempts: list[RefinementAttempt] = []
    branch_errors: list[str] = []
    errored_branches = 0
    fixed = False
    chain_code = candidate.code
    for solution in batch.solutions:
        branch_code = (
            candidate.code if cfg.branch_seed_mode is BranchSeedMode.FROM_ORIGINAL else chain_code
        )
        branch_errored = False
        for iteration in range(1, cfg.iterations_k + 1):
            calls += 1
            try:
                text = llm.ask(
                    templates.render("fdsp_fix", code=branch_code, solution=solution.body)
                )
                refined = extract_code(
                    text,
                    origin=Origin.REFINED,
                    lineage=Lineage(StrategyId.FDSP, solution.index, iteration),
                )
            except (LlmError, EmptyResponse) as exc:
                branch_errors.append(
                    f"solution {solution.index} iteration {iteration}: "
                    f"{type(exc).__name__}: {exc}"
                )
                branch_errored = True
                break
            new_report = analyzer.scan(refined)
            attempts.append(
                RefinementAttempt(
                    solution_index=solution.index,
                    iteration=iteration,
                    candidate=refined,
                    report=new_report,
                    llm_calls_used=1,
                    meta=_attempt_meta(refined),
                )
            )
            if new_report.is_clean:
                fixed = True
                break
            branch_code = refined.code
        chain_code = branch_code
        if branch_errored:
            errored_branches += 1
        if fixed:
            break
    if branch_errors:
        meta["errors"] = branch_errors
    if fixed:
        terminal = Terminal.FIXED
    elif errored_branches == len(batch.solutions):
        terminal = Terminal.ERROR
    else:
        terminal = Terminal.UNFIXED
        best = min(attempts, key=lambda a: len(a.report.findings))
        meta["final"] = {"solution_index": best.solution_index, "iteration": best.iteration}
    return RefinementTrace(
        task_id=task.id,
        strategy=StrategyId.FDSP,
        initial=initial,
        attempts=tuple(attempts),
        terminal=terminal,
        total_llm_calls=calls,
        meta=meta,
    )


# ---------------------------------------------------------------------------
# Dispatch
# ---------------------------------------------------------------------------


def run_strategy(
    strategy: StrategyId,
    task: TaskPrompt,
    candidate: CodeCandidate,
    report: AnalysisReport,
    llm: LlmClient,
    analyzer: Analyzer,
    cfg: StrategyConfig = StrategyConfig(),
    templates: PromptTemplates | None = None,
) -> RefinementTrace:
    if strategy is StrategyId.DIRECT:
        return direct_refine(task, candidate, report, llm, analyzer, templates)
    if strategy is StrategyId.SELF_DEBUG:
        return self_debug_refine(task, candidate, report, llm, analyzer, templates)
    if strategy is StrategyId.BANDIT_FEEDBACK:
        return bandit_feedback_refine(task, candidate, report, llm, analyzer, templates)
    if strategy is StrategyId.VERBALIZATION:
        return verbalization_refine(task, candidate, report, llm, analyzer, templates)
    if strategy is StrategyId.FDSP:
        return fdsp_refine(task, candidate, report, llm, analyzer, cfg, templates)
    raise ValueError(f"unknown strategy: {strategy}")
