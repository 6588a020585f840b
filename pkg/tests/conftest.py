"""Shared fixtures and helpers for the test suite."""

from __future__ import annotations

from pathlib import Path

import pytest

from secpatch.analysis import RuleScanAnalyzer
from secpatch.core import CodeCandidate, TaskPrompt
from secpatch.llm import ChatRequest, ChatResponse, LlmClient, LlmError, ScriptedBackend

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def listing1_code() -> str:
    return (FIXTURES / "listing1.py.txt").read_text(encoding="utf-8").rstrip("\n")


@pytest.fixture(scope="session")
def bandit_listing1_payload() -> str:
    return (FIXTURES / "bandit_listing1.json").read_text(encoding="utf-8")


@pytest.fixture
def rule_analyzer() -> RuleScanAnalyzer:
    return RuleScanAnalyzer()


@pytest.fixture
def sample_task() -> TaskPrompt:
    return TaskPrompt(id="t1", text="Write a Python function to count rows in a table.")


def scripted_client(responses: list[str], model_id: str = "scripted") -> LlmClient:
    return LlmClient(backend=ScriptedBackend.from_responses(responses), model_id=model_id)


class FailingBackend:
    """A backend that raises after serving a fixed number of responses."""

    def __init__(self, responses: list[str], error: Exception | None = None) -> None:
        self._responses = list(responses)
        self._error = error or LlmError("backend failure")

    def complete(self, request: ChatRequest) -> ChatResponse:
        if self._responses:
            return ChatResponse(text=self._responses.pop(0))
        raise self._error


class SpyBackend:
    """Record every request while delegating to an inner backend."""

    def __init__(self, inner) -> None:
        self._inner = inner
        self.requests: list[ChatRequest] = []

    def complete(self, request: ChatRequest) -> ChatResponse:
        self.requests.append(request)
        return self._inner.complete(request)


VULN_SQL = (
    "import sqlite3\n"
    "def count(table):\n"
    '    cur.execute("SELECT COUNT(*) FROM {}".format(table))\n'
)
VULN_EVAL = "def f(expr):\n    return eval(expr)\n"
CLEAN_CODE = "def add(a, b):\n    return a + b\n"


def fenced(code: str, prose: str = "Here you go:") -> str:
    return f"{prose}\n\n```python\n{code}\n```"


def vulnerable_candidate(code: str = VULN_SQL) -> CodeCandidate:
    return CodeCandidate(code=code)


# ---------------------------------------------------------------------------
# Acceptance reporting: one visible PASS/FAIL line per criterion
# ---------------------------------------------------------------------------


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    criterion = item.get_closest_marker("acceptance")
    if not criterion:
        return
    skipped_at_setup = report.when == "setup" and report.skipped
    if report.when == "call" or skipped_at_setup:
        number = criterion.kwargs.get("criterion", "?")
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIPPED"}.get(
            report.outcome, report.outcome.upper()
        )
        print(f"\n[acceptance] criterion {number}: {status}")


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "acceptance(criterion): acceptance-gate test for one criterion"
    )
