"""Static analyzers behind one interface.

Four detection paths share the :class:`~secpatch.core.AnalysisReport` shape:

* ``bandit_scan`` shells out to the external Bandit linter (the primary
  vulnerability detector) and parses its JSON output.
* ``codeql_scan`` drives the CodeQL CLI in batch mode and parses SARIF;
  it is used for evaluation only, never inside a refinement loop.
* ``rulescan`` is a built-in line-oriented heuristic approximating a small
  Bandit subset. It exists for hermetic tests and offline demos and must not
  be used to score benchmark-grade results.
* ``syntax_check`` compiles a candidate without executing it. Generated code
  is never executed here: it routinely touches databases, the OS and the
  network, and the compile gate only needs the error message.
"""

from __future__ import annotations

import json
import logging
import re
import shutil
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping

from .core import (
    AnalysisReport,
    AnalyzerId,
    CodeCandidate,
    Confidence,
    Finding,
    SecpatchError,
    Severity,
)

logger = logging.getLogger(__name__)


class ToolNotFound(SecpatchError):
    """An external analyzer executable could not be resolved."""


class ToolCrashed(SecpatchError):
    """An external analyzer exited with an unexpected status."""


class ParseError(SecpatchError):
    """An analyzer payload could not be parsed."""


class DatabaseCreationFailed(SecpatchError):
    """CodeQL could not build a database over the candidate sources."""


class SarifParseError(SecpatchError):
    """A SARIF payload could not be parsed."""


# ---------------------------------------------------------------------------
# CWE registry and rule mapping
# ---------------------------------------------------------------------------

CWE_REGISTRY: dict[str, str] = {
    "CWE-20": "Improper Input Validation",
    "CWE-22": "Improper Limitation of a Pathname to a Restricted Directory ('Path Traversal')",
    "CWE-78": "Improper Neutralization of Special Elements used in an OS Command ('OS Command Injection')",
    "CWE-79": "Improper Neutralization of Input During Web Page Generation ('Cross-site Scripting')",
    "CWE-89": "Improper Neutralization of Special Elements used in an SQL Command ('SQL Injection')",
    "CWE-94": "Improper Control of Generation of Code ('Code Injection')",
    "CWE-119": "Improper Restriction of Operations within the Bounds of a Memory Buffer",
    "CWE-120": "Buffer Copy without Checking Size of Input ('Classic Buffer Overflow')",
    "CWE-125": "Out-of-bounds Read",
    "CWE-190": "Integer Overflow or Wraparound",
    "CWE-200": "Exposure of Sensitive Information to an Unauthorized Actor",
    "CWE-259": "Use of Hard-coded Password",
    "CWE-284": "Improper Access Control",
    "CWE-287": "Improper Authentication",
    "CWE-295": "Improper Certificate Validation",
    "CWE-306": "Missing Authentication for Critical Function",
    "CWE-352": "Cross-Site Request Forgery (CSRF)",
    "CWE-400": "Uncontrolled Resource Consumption",
    "CWE-416": "Use After Free",
    "CWE-434": "Unrestricted Upload of File with Dangerous Type",
    "CWE-476": "NULL Pointer Dereference",
    "CWE-502": "Deserialization of Untrusted Data",
    "CWE-611": "Improper Restriction of XML External Entity Reference (XXE)",
    "CWE-703": "Improper Handling of Exceptional Conditions",
    "CWE-732": "Incorrect Permission Assignment for Critical Resource",
    "CWE-787": "Out-of-bounds Write",
    "CWE-798": "Use of Hard-coded Credentials",
    "CWE-862": "Missing Authorization",
    "CWE-918": "Server-Side Request Forgery (SSRF)",
    "CWE-1021": "Improper Restriction of Rendered UI Layers or Frames",
    "CWE-1295": "Debug Features Enabled in Production",
}

_CWE_ID_RE = re.compile(r"^CWE-\d+$")


@dataclass(frozen=True)
class CweEntry:
    cwe_id: str
    description: str

    def __post_init__(self) -> None:
        if not _CWE_ID_RE.match(self.cwe_id):
            raise ValueError(f"malformed CWE id: {self.cwe_id!r}")


@dataclass(frozen=True)
class CompileError:
    message: str
    line: int | None = None

    def __post_init__(self) -> None:
        if not self.message:
            raise ValueError("CompileError.message must be non-empty")


# Fallback mapping for analyzer payloads that do not carry a CWE themselves.
_RULE_TO_CWE: dict[str, str] = {
    "B101": "CWE-703",
    "B102": "CWE-94",
    "B105": "CWE-259",
    "B106": "CWE-259",
    "B107": "CWE-259",
    "B110": "CWE-703",
    "B113": "CWE-400",
    "B201": "CWE-1295",
    "B301": "CWE-502",
    "B307": "CWE-94",
    "B403": "CWE-502",
    "B501": "CWE-295",
    "B506": "CWE-20",
    "B601": "CWE-78",
    "B602": "CWE-78",
    "B603": "CWE-78",
    "B604": "CWE-78",
    "B605": "CWE-78",
    "B606": "CWE-78",
    "B607": "CWE-78",
    "B608": "CWE-89",
    "B609": "CWE-78",
    "B611": "CWE-89",
}


def map_rule_to_cwe(rule_id: str) -> CweEntry | None:
    """Static lookup from a tool rule id to its CWE, None for unknown rules."""
    bare = rule_id[3:] if rule_id.startswith("RS-") else rule_id
    cwe_id = _RULE_TO_CWE.get(bare)
    if cwe_id is None:
        return None
    return CweEntry(cwe_id=cwe_id, description=CWE_REGISTRY[cwe_id])


# ---------------------------------------------------------------------------
# Syntax gate (compile only, never execute)
# ---------------------------------------------------------------------------


def syntax_check(candidate: CodeCandidate) -> CompileError | None:
    """Compile the candidate source; return the first error or None."""
    try:
        compile(candidate.code, "<candidate>", "exec")
    except SyntaxError as exc:
        return CompileError(message=exc.msg or "invalid syntax", line=exc.lineno)
    except ValueError as exc:
        return CompileError(message=str(exc) or "invalid source", line=None)
    return None


# ---------------------------------------------------------------------------
# Bandit adapter
# ---------------------------------------------------------------------------

# Bandit exit codes: 0 = no issues, 1 = issues found; both carry valid JSON.
_BANDIT_OK_EXIT_CODES = (0, 1)


def parse_bandit_results(payload: Mapping) -> list[Finding]:
    findings = []
    for result in payload.get("results", []):
        cwe = None
        issue_cwe = result.get("issue_cwe")
        if isinstance(issue_cwe, Mapping) and issue_cwe.get("id"):
            cwe = f"CWE-{issue_cwe['id']}"
        else:
            entry = map_rule_to_cwe(result.get("test_id", ""))
            cwe = entry.cwe_id if entry else None
        findings.append(
            Finding(
                rule_id=result["test_id"],
                message=result.get("issue_text", ""),
                line=result["line_number"],
                tool=AnalyzerId.BANDIT,
                severity=Severity.parse(result.get("issue_severity")),
                confidence=Confidence.parse(result.get("issue_confidence")),
                cwe=cwe,
            )
        )
    return findings


def bandit_report_from_payload(raw: str) -> AnalysisReport:
    """Build a report from a verbatim Bandit JSON payload."""
    try:
        payload = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed Bandit JSON ({exc}); starts with: {raw[:200]!r}") from exc
    try:
        findings = parse_bandit_results(payload)
    except (KeyError, TypeError) as exc:
        raise ParseError(f"unexpected Bandit JSON shape: {exc}; starts with: {raw[:200]!r}") from exc
    return AnalysisReport.build(AnalyzerId.BANDIT, findings, raw)


def bandit_version(executable: str = "bandit") -> str | None:
    exe = shutil.which(executable)
    if exe is None:
        return None
    try:
        proc = subprocess.run([exe, "--version"], capture_output=True, text=True, timeout=30)
    except (OSError, subprocess.TimeoutExpired):
        return None
    first = (proc.stdout or "").splitlines()
    return first[0].strip() if first else None


def bandit_scan(
    candidate: CodeCandidate,
    workdir: str | Path,
    executable: str = "bandit",
) -> AnalysisReport:
    """Write the candidate to a fresh temp file and run Bandit over it."""
    exe = shutil.which(executable)
    if exe is None:
        raise ToolNotFound(f"bandit executable not found: {executable!r}")
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    scan_dir = Path(tempfile.mkdtemp(prefix="bandit-", dir=workdir))
    try:
        target = scan_dir / "candidate.py"
        target.write_text(candidate.code, encoding="utf-8")
        proc = subprocess.run(
            [exe, "-f", "json", str(target)],
            capture_output=True,
            text=True,
        )
        if proc.returncode not in _BANDIT_OK_EXIT_CODES:
            raise ToolCrashed(
                f"bandit exited with {proc.returncode}: {(proc.stderr or '').strip()[:500]}"
            )
        return bandit_report_from_payload(proc.stdout)
    finally:
        shutil.rmtree(scan_dir, ignore_errors=True)


# ---------------------------------------------------------------------------
# CodeQL adapter (batch, SARIF 2.1.0 output)
# ---------------------------------------------------------------------------


def parse_sarif(sarif_text: str, file_to_task: Mapping[str, str]) -> dict[str, list[Finding]]:
    """Extract per-task findings from a SARIF payload.

    ``file_to_task`` maps source file names (as they appear in SARIF
    artifact URIs, matched on basename) to task ids.
    """
    try:
        payload = json.loads(sarif_text)
        runs = payload["runs"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise SarifParseError(f"malformed SARIF: {exc}") from exc
    findings: dict[str, list[Finding]] = {task: [] for task in file_to_task.values()}
    for run in runs:
        for result in run.get("results", []):
            rule_id = result.get("ruleId", "UNKNOWN")
            message = (result.get("message") or {}).get("text", "")
            locations = result.get("locations") or []
            if not locations:
                continue
            physical = locations[0].get("physicalLocation", {})
            uri = (physical.get("artifactLocation") or {}).get("uri", "")
            task_id = file_to_task.get(Path(uri).name)
            if task_id is None:
                continue
            line = (physical.get("region") or {}).get("startLine", 1)
            entry = map_rule_to_cwe(rule_id)
            findings[task_id].append(
                Finding(
                    rule_id=rule_id,
                    message=message,
                    line=max(1, int(line)),
                    tool=AnalyzerId.CODEQL,
                    severity=Severity.parse(result.get("level")),
                    cwe=entry.cwe_id if entry else None,
                )
            )
    return findings


def _safe_filename(task_id: str, taken: set[str]) -> str:
    base = re.sub(r"[^A-Za-z0-9_.-]", "_", task_id) or "task"
    name = f"{base}.py"
    serial = 1
    while name in taken:
        serial += 1
        name = f"{base}_{serial}.py"
    taken.add(name)
    return name


def codeql_scan(
    candidates: Mapping[str, CodeCandidate],
    workdir: str | Path,
    executable: str = "codeql",
    query_suite: str | None = None,
) -> dict[str, AnalysisReport]:
    """Scan a task-keyed batch of candidates with CodeQL.

    Database creation is per-directory, so all candidates are laid out one
    file each and analyzed together; tasks with no SARIF results get clean
    reports.
    """
    if not candidates:
        return {}
    exe = shutil.which(executable)
    if exe is None:
        raise ToolNotFound(f"codeql executable not found: {executable!r}")
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    batch_dir = Path(tempfile.mkdtemp(prefix="codeql-", dir=workdir))
    try:
        src_dir = batch_dir / "src"
        src_dir.mkdir()
        taken: set[str] = set()
        file_to_task: dict[str, str] = {}
        for task_id, candidate in candidates.items():
            name = _safe_filename(task_id, taken)
            (src_dir / name).write_text(candidate.code, encoding="utf-8")
            file_to_task[name] = task_id
        db_dir = batch_dir / "db"
        create = subprocess.run(
            [exe, "database", "create", str(db_dir), "--language=python",
             f"--source-root={src_dir}", "--overwrite"],
            capture_output=True,
            text=True,
        )
        if create.returncode != 0:
            raise DatabaseCreationFailed(
                f"codeql database create failed: {(create.stderr or '').strip()[:500]}"
            )
        sarif_path = batch_dir / "results.sarif"
        analyze_cmd = [exe, "database", "analyze", str(db_dir),
                       "--format=sarif-latest", f"--output={sarif_path}"]
        if query_suite:
            analyze_cmd.append(query_suite)
        analyze = subprocess.run(analyze_cmd, capture_output=True, text=True)
        if analyze.returncode != 0:
            raise ToolCrashed(
                f"codeql database analyze failed: {(analyze.stderr or '').strip()[:500]}"
            )
        sarif_text = sarif_path.read_text(encoding="utf-8")
        per_task = parse_sarif(sarif_text, file_to_task)
        return {
            task_id: AnalysisReport.build(AnalyzerId.CODEQL, found, sarif_text)
            for task_id, found in per_task.items()
        }
    finally:
        shutil.rmtree(batch_dir, ignore_errors=True)


# ---------------------------------------------------------------------------
# RuleScan: hermetic heuristic stand-in
# ---------------------------------------------------------------------------

_SQL_EXEC = re.compile(r"\bexecute(?:many)?\s*\(")
_STR_FORMAT = re.compile(r"\.format\s*\(")
_FSTRING_BRACE = re.compile(r"""\bf["'][^"']*\{""")
_PERCENT_FMT = re.compile(r"""["']\s*%\s*[\w(]""")
_STR_CONCAT = re.compile(r"""["']\s*\+|\+\s*["']""")

_SHELL_TRUE = re.compile(r"\bshell\s*=\s*True\b")
_SUBPROCESS = re.compile(r"\bsubprocess\b|\bPopen\s*\(")

_EVAL_EXEC = re.compile(r"(?<![\w.])(?:eval|exec)\s*\(")

_HARDCODED_PASSWORD = re.compile(
    r"""(?i)\b\w*(?:password|passwd|pwd)\w*\s*=(?!=)\s*["'][^"']+["']"""
)

_FLASK_DEBUG = re.compile(r"\.run\s*\([^)]*\bdebug\s*=\s*True")


def _is_sql_injection(line: str) -> bool:
    if not _SQL_EXEC.search(line):
        return False
    return any(
        pattern.search(line)
        for pattern in (_STR_FORMAT, _FSTRING_BRACE, _PERCENT_FMT, _STR_CONCAT)
    )


@dataclass(frozen=True)
class _Rule:
    rule_id: str
    cwe: str
    severity: Severity
    confidence: Confidence
    message: str
    matches: Callable[[str], bool]


_RULES: tuple[_Rule, ...] = (
    _Rule(
        rule_id="RS-B608",
        cwe="CWE-89",
        severity=Severity.MEDIUM,
        confidence=Confidence.MEDIUM,
        message="Possible SQL injection vector through string-based query construction.",
        matches=_is_sql_injection,
    ),
    _Rule(
        rule_id="RS-B602",
        cwe="CWE-78",
        severity=Severity.HIGH,
        confidence=Confidence.HIGH,
        message="subprocess call with shell=True identified, security issue.",
        matches=lambda line: bool(_SHELL_TRUE.search(line) and _SUBPROCESS.search(line)),
    ),
    _Rule(
        rule_id="RS-B307",
        cwe="CWE-94",
        severity=Severity.MEDIUM,
        confidence=Confidence.HIGH,
        message="Use of possibly insecure function - consider using safer ast.literal_eval.",
        matches=lambda line: bool(_EVAL_EXEC.search(line)),
    ),
    _Rule(
        rule_id="RS-B105",
        cwe="CWE-259",
        severity=Severity.LOW,
        confidence=Confidence.MEDIUM,
        message="Possible hardcoded password.",
        matches=lambda line: bool(_HARDCODED_PASSWORD.search(line)),
    ),
    _Rule(
        rule_id="RS-B201",
        cwe="CWE-1295",
        severity=Severity.HIGH,
        confidence=Confidence.MEDIUM,
        message="A Flask app appears to be run with debug=True, that exposes the "
        "Werkzeug debugger and allows the execution of arbitrary code.",
        matches=lambda line: bool(_FLASK_DEBUG.search(line)),
    ),
)


def rulescan(candidate: CodeCandidate) -> AnalysisReport:
    """Line-oriented heuristic scan approximating a small Bandit subset."""
    findings = []
    for lineno, line in enumerate(candidate.code.splitlines(), start=1):
        if line.lstrip().startswith("#"):
            continue
        for rule in _RULES:
            if rule.matches(line):
                findings.append(
                    Finding(
                        rule_id=rule.rule_id,
                        message=rule.message,
                        line=lineno,
                        tool=AnalyzerId.RULESCAN,
                        severity=rule.severity,
                        confidence=rule.confidence,
                        cwe=rule.cwe,
                    )
                )
    raw = "\n".join(
        f"{f.rule_id} line {f.line}: {f.message}"
        for f in sorted(findings, key=lambda f: f.sort_key)
    )
    return AnalysisReport.build(AnalyzerId.RULESCAN, findings, raw)


RULESCAN_RULE_IDS = tuple(rule.rule_id for rule in _RULES)


# ---------------------------------------------------------------------------
# Analyzer objects (uniform scan interface for strategies and the harness)
# ---------------------------------------------------------------------------


class RuleScanAnalyzer:
    id = AnalyzerId.RULESCAN

    def scan(self, candidate: CodeCandidate) -> AnalysisReport:
        return rulescan(candidate)


class BanditAnalyzer:
    id = AnalyzerId.BANDIT

    def __init__(self, workdir: str | Path | None = None, executable: str = "bandit") -> None:
        self.workdir = Path(workdir) if workdir else Path(tempfile.gettempdir()) / "secpatch-bandit"
        self.executable = executable

    def scan(self, candidate: CodeCandidate) -> AnalysisReport:
        return bandit_scan(candidate, self.workdir, self.executable)

    def version(self) -> str | None:
        return bandit_version(self.executable)


class CodeQlAnalyzer:
    """Batch-only evaluation analyzer; one database per candidate set."""

    id = AnalyzerId.CODEQL

    def __init__(
        self,
        workdir: str | Path | None = None,
        executable: str = "codeql",
        query_suite: str | None = None,
    ) -> None:
        self.workdir = Path(workdir) if workdir else Path(tempfile.gettempdir()) / "secpatch-codeql"
        self.executable = executable
        self.query_suite = query_suite

    def scan_batch(self, candidates: Mapping[str, CodeCandidate]) -> dict[str, AnalysisReport]:
        return codeql_scan(candidates, self.workdir, self.executable, self.query_suite)


def make_analyzer(analyzer_id: AnalyzerId, workdir: str | Path | None = None):
    if analyzer_id is AnalyzerId.RULESCAN:
        return RuleScanAnalyzer()
    if analyzer_id is AnalyzerId.BANDIT:
        return BanditAnalyzer(workdir=workdir)
    if analyzer_id is AnalyzerId.CODEQL:
        return CodeQlAnalyzer(workdir=workdir)
    raise ValueError(f"unknown analyzer: {analyzer_id}")
