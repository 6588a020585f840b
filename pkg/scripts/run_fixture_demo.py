#!/usr/bin/env python3
"""Hermetic end-to-end demo: no network, no external tools.

Builds a three-task corpus and a scripted model in memory, runs two
refinement strategies (analyzer-report feedback and the solution-branching
loop) with the built-in heuristic scanner, and prints the resulting main
table plus CWE histograms. Artifacts land in ./demo_out.

Usage: python scripts/run_fixture_demo.py
"""

from __future__ import annotations

import json
import os
import tempfile
from collections import deque
from pathlib import Path

from secpatch.core import AnalyzerId, StrategyId, load_records
from secpatch.harness import DatasetSpec, RunConfig, records_path, run_benchmark
from secpatch.llm import ProviderConfig, BackendKind, ScriptRule, ScriptedBackend
from secpatch.metrics import (
    HistogramPhase,
    build_main_table,
    cwe_histogram,
    render,
    render_to_file,
)
from secpatch.strategies import StrategyConfig

CLEAN = "def add(a, b):\n    return a + b"

SQL_VULN = (
    "import sqlite3\n\n"
    "def count_rows(db, table):\n"
    "    conn = sqlite3.connect(db)\n"
    "    cur = conn.cursor()\n"
    '    cur.execute("SELECT COUNT(*) FROM {}".format(table))\n'
    "    return cur.fetchone()[0]"
)

SQL_FIXED = (
    "import sqlite3\n\n"
    'ALLOWED = {"users", "orders"}\n\n'
    "def count_rows(db, table):\n"
    "    if table not in ALLOWED:\n"
    '        raise ValueError("unknown table")\n'
    "    conn = sqlite3.connect(db)\n"
    "    cur = conn.cursor()\n"
    '    cur.execute("SELECT COUNT(*) FROM users")\n'
    "    return cur.fetchone()[0]"
)

PW_VULN = (
    'ADMIN_PASSWORD = "hunter2"\n\n'
    "def check_login(user, attempt):\n"
    '    return user == "admin" and attempt == ADMIN_PASSWORD'
)

PW_FIXED = (
    "import hmac\n"
    "import os\n\n"
    "def check_login(user, attempt):\n"
    '    secret = os.environ["ADMIN_PASSWORD"]\n'
    '    return user == "admin" and hmac.compare_digest(attempt, secret)'
)

SOLUTIONS = (
    "1) Use Safe Lookups: keep secrets and identifiers out of the source text.\n"
    "2) Validate Inputs: only allow known-safe values through.\n"
    "3) Use Library Helpers: delegate the risky operation to a vetted API."
)


def fenced(code: str, prose: str = "Here is the code:") -> str:
    return f"{prose}\n\n```python\n{code}\n```"


def rule(when, responses, repeat=True) -> ScriptRule:
    return ScriptRule(when=tuple(when), responses=deque(responses), repeat_last=repeat)


def build_script() -> list[ScriptRule]:
    return [
        # generation, keyed on the prompt text
        rule(["adds two numbers"], [fenced(CLEAN)]),
        rule(["rows in a SQLite table"], [fenced(SQL_VULN)]),
        rule(["admin login"], [fenced(PW_VULN)]),
        # analyzer-report feedback fixes ("Fix the reported security issues")
        rule(["Fix the reported security issues", "COUNT(*) FROM {}"], [fenced(SQL_FIXED)]),
        rule(["Fix the reported security issues", "ADMIN_PASSWORD"], [fenced(PW_VULN, "Unchanged:")]),
        # solution generation
        rule(["numbered strategies"], [SOLUTIONS]),
        # branch refinement ("mitigation strategy")
        rule(["mitigation strategy", "COUNT(*) FROM {}"], [fenced(SQL_FIXED)]),
        rule(["mitigation strategy", "ADMIN_PASSWORD"],
             [fenced(PW_VULN, "Try 1:"), fenced(PW_FIXED, "Try 2:")]),
    ]


def main() -> None:
    os.environ.setdefault("SECPATCH_FIXED_CLOCK", "2024-01-01T00:00:00Z")
    out_dir = Path("demo_out")
    out_dir.mkdir(exist_ok=True)

    dataset_path = Path(tempfile.mkdtemp(prefix="secpatch-demo-")) / "prompts.jsonl"
    prompts = [
        {"id": "d1", "prompt": "Write a Python function that adds two numbers."},
        {"id": "d2", "prompt": "Write a Python function that counts rows in a SQLite table."},
        {"id": "d3", "prompt": "Write a Python function that checks an admin login."},
    ]
    dataset_path.write_text("\n".join(json.dumps(p) for p in prompts) + "\n")

    records = []
    for strategy in (StrategyId.BANDIT_FEEDBACK, StrategyId.FDSP):
        cfg = RunConfig(
            dataset=DatasetSpec.infer(dataset_path, name="demo"),
            model_id="scripted-demo",
            provider=ProviderConfig(backend=BackendKind.SCRIPTED, script_path="unused"),
            strategy=strategy,
            strategy_cfg=StrategyConfig(solutions_j=3, iterations_k=2),
            analyzer=AnalyzerId.RULESCAN,
            output_dir=str(out_dir),
            resume=False,
        )
        summary = run_benchmark(cfg, llm_backend=ScriptedBackend(build_script()))
        print(f"{strategy.value}: {summary.completed} completed, "
              f"{summary.failed} failed -> {records_path(cfg)}")
        records.extend(load_records(records_path(cfg)))

    table = build_main_table(records, AnalyzerId.RULESCAN)
    print()
    print(render(table, "md"))
    render_to_file(table, "md", out_dir / "main_table.md")
    for phase in (HistogramPhase.GENERATED, HistogramPhase.UNRESOLVED):
        histogram = cwe_histogram(records, phase, AnalyzerId.RULESCAN)
        print(render(histogram, "md"))
        render_to_file(histogram, "csv", out_dir / f"cwe_{phase.value}.csv")
    print(f"artifacts in {out_dir}/")


if __name__ == "__main__":
    main()
