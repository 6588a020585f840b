"""Aggregation of run records into result tables and histograms.

"Vulnerable" is binary per program: a candidate counts as flagged when its
report carries at least one finding, and percentages are taken over the full
dataset. All arithmetic happens on raw counts; rounding (half-up, one
decimal) is applied only at presentation time. Rendering is deterministic:
identical inputs produce byte-identical output.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from enum import Enum
from pathlib import Path
from typing import Mapping, Sequence

from .core import (
    AnalysisReport,
    AnalyzerId,
    RunRecord,
    SecpatchError,
    StrategyId,
    Terminal,
    report_from_dict,
)
from .strategies import StrategyConfig


class DomainError(SecpatchError):
    """A metrics operation was called outside its domain."""


class EmptyRunSet(SecpatchError):
    """No records to aggregate."""


class IoError(SecpatchError):
    """A rendered artifact could not be written."""


ROW_GENERATED = "Generated code"

STRATEGY_ROW_LABELS: dict[StrategyId, str] = {
    StrategyId.DIRECT: "Direct prompting",
    StrategyId.SELF_DEBUG: "Self-debugging",
    StrategyId.BANDIT_FEEDBACK: "Bandit feedback",
    StrategyId.VERBALIZATION: "Verbalization",
    StrategyId.FDSP: "FDSP",
}

STRATEGY_ORDER = (
    StrategyId.DIRECT,
    StrategyId.SELF_DEBUG,
    StrategyId.BANDIT_FEEDBACK,
    StrategyId.VERBALIZATION,
    StrategyId.FDSP,
)

# Fixed column order when several tools are rendered side by side.
TOOL_ORDER = (AnalyzerId.BANDIT, AnalyzerId.CODEQL, AnalyzerId.RULESCAN)


def _round1(value: Decimal) -> float:
    return float(value.quantize(Decimal("0.1"), rounding=ROUND_HALF_UP))


def _exact_percent(flagged: int, total: int) -> Decimal:
    return Decimal(flagged) * 100 / Decimal(total)


def percent_vulnerable(flagged: int, total: int) -> float:
    """Share of flagged programs over the dataset, one decimal, half-up."""
    if total <= 0:
        raise DomainError("total must be > 0")
    if not 0 <= flagged <= total:
        raise DomainError("flagged must be in [0, total]")
    return _round1(_exact_percent(flagged, total))


def reduction_delta(generated_pct: float, refined_pct: float) -> float:
    """How many percentage points of vulnerable code the strategy removed."""
    for value in (generated_pct, refined_pct):
        if not 0 <= value <= 100:
            raise DomainError("percentages must be in [0, 100]")
    return _round1(Decimal(str(generated_pct)) - Decimal(str(refined_pct)))


@dataclass(frozen=True)
class CellResult:
    flagged: int
    total: int
    percent: float
    delta_vs_generated: float | None = None

    def __post_init__(self) -> None:
        if self.total <= 0:
            raise DomainError("cell total must be > 0")
        if not 0 <= self.flagged <= self.total:
            raise DomainError("cell flagged must be in [0, total]")


# ---------------------------------------------------------------------------
# Report resolution per record and tool
# ---------------------------------------------------------------------------


def _eval_pair(record: RunRecord, tool: AnalyzerId) -> dict | None:
    reports = record.trace.meta.get("eval_reports")
    if isinstance(reports, Mapping):
        pair = reports.get(tool.value)
        if isinstance(pair, Mapping):
            return dict(pair)
    return None


def initial_report_for(record: RunRecord, tool: AnalyzerId) -> AnalysisReport | None:
    if record.trace.initial[1].tool is tool:
        return record.trace.initial[1]
    pair = _eval_pair(record, tool)
    if pair and "initial" in pair:
        return report_from_dict(pair["initial"])
    return None


def final_report_for(record: RunRecord, tool: AnalyzerId) -> AnalysisReport | None:
    if record.trace.initial[1].tool is tool:
        return record.trace.final_report
    pair = _eval_pair(record, tool)
    if pair and "final" in pair:
        return report_from_dict(pair["final"])
    return None


def _flagged(report: AnalysisReport | None) -> bool:
    return report is not None and bool(report.findings)


# ---------------------------------------------------------------------------
# Main results table
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MainTable:
    tool: AnalyzerId
    models: tuple[str, ...]
    rows: tuple[str, ...]
    cells: Mapping[tuple[str, str], CellResult]  # (row, model) -> cell


def build_main_table(records: Sequence[RunRecord], tool: AnalyzerId) -> MainTable:
    """One row per strategy plus a generated-code row, one column per model.

    Flagged counts use the initial report for the generated row and the
    final report for strategy rows. When several strategy runs exist for one
    model, the generated row is computed over tasks de-duplicated in
    canonical strategy order (runs re-generate independently).
    """
    if not records:
        raise EmptyRunSet("no records to tabulate")
    by_model: dict[str, dict[StrategyId, list[RunRecord]]] = {}
    for record in records:
        by_model.setdefault(record.model_id, {}).setdefault(record.strategy, []).append(record)

    models = tuple(sorted(by_model))
    strategies_present = [
        s for s in STRATEGY_ORDER if any(s in groups for groups in by_model.values())
    ]
    rows = (ROW_GENERATED, *[STRATEGY_ROW_LABELS[s] for s in strategies_present])

    cells: dict[tuple[str, str], CellResult] = {}
    for model in models:
        groups = by_model[model]
        seen_tasks: dict[str, RunRecord] = {}
        for strategy in STRATEGY_ORDER:
            for record in groups.get(strategy, []):
                seen_tasks.setdefault(record.task_id, record)
        generated_total = len(seen_tasks)
        generated_flagged = sum(
            1 for record in seen_tasks.values()
            if _flagged(initial_report_for(record, tool))
        )
        generated_exact = _exact_percent(generated_flagged, generated_total)
        cells[(ROW_GENERATED, model)] = CellResult(
            flagged=generated_flagged,
            total=generated_total,
            percent=_round1(generated_exact),
        )
        for strategy in strategies_present:
            group = groups.get(strategy)
            if not group:
                continue
            flagged = sum(1 for record in group if _flagged(final_report_for(record, tool)))
            exact = _exact_percent(flagged, len(group))
            cells[(STRATEGY_ROW_LABELS[strategy], model)] = CellResult(
                flagged=flagged,
                total=len(group),
                percent=_round1(exact),
                delta_vs_generated=_round1(generated_exact - exact),
            )
    return MainTable(tool=tool, models=models, rows=rows, cells=cells)


# ---------------------------------------------------------------------------
# CWE histograms
# ---------------------------------------------------------------------------


class HistogramPhase(str, Enum):
    GENERATED = "generated"
    UNRESOLVED = "unresolved"


UNMAPPED_BUCKET = "Unmapped"


@dataclass(frozen=True)
class CweHistogram:
    phase: HistogramPhase
    tool: AnalyzerId
    counts: tuple[tuple[str, int], ...]  # (cwe, count), descending

    def as_dict(self) -> dict[str, int]:
        return dict(self.counts)


def cwe_histogram(
    records: Sequence[RunRecord],
    phase: HistogramPhase,
    tool: AnalyzerId,
    top_n: int = 10,
) -> CweHistogram:
    """Finding counts per CWE.

    The generated phase tallies initial reports of every record; the
    unresolved phase tallies final reports of traces that did not end fixed.
    Findings without a CWE land in the "Unmapped" bucket.
    """
    if not records:
        raise EmptyRunSet("no records to tally")
    counter: Counter[str] = Counter()
    for record in records:
        if phase is HistogramPhase.GENERATED:
            report = initial_report_for(record, tool)
        else:
            if record.trace.terminal in (Terminal.FIXED, Terminal.FIXED_AT_GENERATION):
                continue
            report = final_report_for(record, tool)
        if report is None:
            continue
        for finding in report.findings:
            counter[finding.cwe or UNMAPPED_BUCKET] += 1
    ordered = sorted(counter.items(), key=lambda kv: (-kv[1], kv[0]))[:top_n]
    return CweHistogram(phase=phase, tool=tool, counts=tuple(ordered))


# ---------------------------------------------------------------------------
# Ablation table
# ---------------------------------------------------------------------------


def ablation_label(cfg: StrategyConfig) -> str:
    if cfg.solutions_j == 1 and cfg.iterations_k == 1:
        return "FDSP with single solution and iteration"
    if cfg.solutions_j == 1:
        return "FDSP with single solution"
    if cfg.iterations_k == 1:
        return "FDSP with single iteration"
    return "FDSP"


@dataclass(frozen=True)
class AblationTable:
    tool: AnalyzerId
    rows: tuple[tuple[str, CellResult], ...]  # (label, cell), generated first


def build_ablation_table(
    variants: Mapping[str, Sequence[RunRecord]],
    tool: AnalyzerId,
) -> AblationTable:
    """One row per labeled variant plus the generated-code row.

    The generated row comes from the first variant (all variants share one
    generation protocol); deltas are against that row.
    """
    if not variants or all(not records for records in variants.values()):
        raise EmptyRunSet("no variant records to tabulate")
    first = next(iter(variants.values()))
    generated_flagged = sum(
        1 for record in first if _flagged(initial_report_for(record, tool))
    )
    generated_exact = _exact_percent(generated_flagged, len(first))
    rows: list[tuple[str, CellResult]] = [
        (
            ROW_GENERATED,
            CellResult(
                flagged=generated_flagged,
                total=len(first),
                percent=_round1(generated_exact),
            ),
        )
    ]
    for label, records in variants.items():
        if not records:
            continue
        flagged = sum(1 for record in records if _flagged(final_report_for(record, tool)))
        exact = _exact_percent(flagged, len(records))
        rows.append(
            (
                label,
                CellResult(
                    flagged=flagged,
                    total=len(records),
                    percent=_round1(exact),
                    delta_vs_generated=_round1(generated_exact - exact),
                ),
            )
        )
    return AblationTable(tool=tool, rows=tuple(rows))


# ---------------------------------------------------------------------------
# Rendering (markdown / csv / plotdata), deterministic byte-for-byte
# ---------------------------------------------------------------------------


class RenderFormat(str, Enum):
    MARKDOWN = "md"
    CSV = "csv"
    PLOTDATA = "plotdata"


def _format_cell(cell: CellResult) -> str:
    text = f"{cell.percent}%"
    if cell.delta_vs_generated is not None:
        text += f" (↓{cell.delta_vs_generated})"
    return text


def render_main_tables_markdown(tables: Sequence[MainTable]) -> str:
    """Side-by-side model x tool columns, tools in fixed order per model."""
    tables = sorted(tables, key=lambda t: TOOL_ORDER.index(t.tool))
    models = tuple(sorted({m for table in tables for m in table.models}))
    rows: list[str] = []
    for table in tables:
        for row in table.rows:
            if row not in rows:
                rows.append(row)
    columns = [(model, table) for model in models for table in tables]
    header = "| Approach | " + " | ".join(
        f"{model} ({table.tool.value})" for model, table in columns
    ) + " |"
    divider = "| --- |" + " --- |" * len(columns)
    lines = [header, divider]
    for row in rows:
        cells = []
        for model, table in columns:
            cell = table.cells.get((row, model))
            cells.append(_format_cell(cell) if cell else "-")
        lines.append(f"| {row} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def render_main_tables_csv(tables: Sequence[MainTable]) -> str:
    tables = sorted(tables, key=lambda t: TOOL_ORDER.index(t.tool))
    lines = ["row,model,tool,flagged,total,percent,delta"]
    for table in tables:
        for row in table.rows:
            for model in table.models:
                cell = table.cells.get((row, model))
                if cell is None:
                    continue
                delta = "" if cell.delta_vs_generated is None else cell.delta_vs_generated
                lines.append(
                    f"{row},{model},{table.tool.value},"
                    f"{cell.flagged},{cell.total},{cell.percent},{delta}"
                )
    return "\n".join(lines) + "\n"


def render_main_tables_plotdata(tables: Sequence[MainTable]) -> str:
    tables = sorted(tables, key=lambda t: TOOL_ORDER.index(t.tool))
    lines = ["row,metric,value"]
    for table in tables:
        for row in table.rows:
            for model in table.models:
                cell = table.cells.get((row, model))
                if cell is None:
                    continue
                lines.append(f"{row},{model}|{table.tool.value}|percent,{cell.percent}")
                if cell.delta_vs_generated is not None:
                    lines.append(
                        f"{row},{model}|{table.tool.value}|delta,{cell.delta_vs_generated}"
                    )
    return "\n".join(lines) + "\n"


def render_histogram_markdown(histogram: CweHistogram) -> str:
    lines = [
        f"| CWE | Count ({histogram.phase.value}, {histogram.tool.value}) |",
        "| --- | --- |",
    ]
    lines.extend(f"| {cwe} | {count} |" for cwe, count in histogram.counts)
    return "\n".join(lines) + "\n"


def render_histogram_csv(histogram: CweHistogram) -> str:
    lines = ["label,count"]
    lines.extend(f"{cwe},{count}" for cwe, count in histogram.counts)
    return "\n".join(lines) + "\n"


def render_ablation_markdown(table: AblationTable) -> str:
    lines = [
        f"| Ablation | {table.tool.value} |",
        "| --- | --- |",
    ]
    for label, cell in table.rows:
        lines.append(f"| {label} | {_format_cell(cell)} |")
    return "\n".join(lines) + "\n"


def render_ablation_csv(table: AblationTable) -> str:
    lines = ["row,tool,flagged,total,percent,delta"]
    for label, cell in table.rows:
        delta = "" if cell.delta_vs_generated is None else cell.delta_vs_generated
        lines.append(
            f"{label},{table.tool.value},{cell.flagged},{cell.total},{cell.percent},{delta}"
        )
    return "\n".join(lines) + "\n"


def render(obj, fmt: RenderFormat | str) -> str:
    """Render a table or histogram to text in the requested format."""
    fmt = RenderFormat(fmt)
    if isinstance(obj, MainTable):
        obj = [obj]
    if isinstance(obj, (list, tuple)) and all(isinstance(t, MainTable) for t in obj):
        if fmt is RenderFormat.MARKDOWN:
            return render_main_tables_markdown(obj)
        if fmt is RenderFormat.CSV:
            return render_main_tables_csv(obj)
        return render_main_tables_plotdata(obj)
    if isinstance(obj, CweHistogram):
        if fmt is RenderFormat.MARKDOWN:
            return render_histogram_markdown(obj)
        return render_histogram_csv(obj)
    if isinstance(obj, AblationTable):
        if fmt is RenderFormat.MARKDOWN:
            return render_ablation_markdown(obj)
        return render_ablation_csv(obj)
    raise TypeError(f"cannot render {type(obj).__name__}")


def render_to_file(obj, fmt: RenderFormat | str, path: str | Path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(render(obj, fmt), encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
    return path
