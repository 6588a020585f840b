"""Harness: dataset ingestion, domain classification, batch orchestration."""

from __future__ import annotations

import hashlib
import json

import pytest

from secpatch.core import AnalyzerId, Domain, SourceDataset, StrategyId, load_records
from secpatch.harness import (
    DatasetSpec,
    DuplicateId,
    DatasetError,
    MissingField,
    RunConfig,
    classify_domains,
    config_digest,
    dataset_stats,
    load_dataset,
    records_path,
    resolve_clock,
    run_benchmark,
)
from secpatch.llm import (
    BackendKind,
    CountingBackend,
    ProviderConfig,
    ScriptedBackend,
)
from secpatch.strategies import StrategyConfig

from conftest import FIXTURES

FIXED_CLOCK = "2024-01-01T00:00:00Z"


def scripted_provider() -> ProviderConfig:
    return ProviderConfig(
        backend=BackendKind.SCRIPTED,
        script_path=str(FIXTURES / "scripted_fdsp.json"),
    )


def fixture_config(tmp_path, **overrides) -> RunConfig:
    values = dict(
        dataset=DatasetSpec.infer(FIXTURES / "prompts5.jsonl"),
        model_id="scripted-demo",
        provider=scripted_provider(),
        strategy=StrategyId.FDSP,
        strategy_cfg=StrategyConfig(solutions_j=3, iterations_k=2),
        analyzer=AnalyzerId.RULESCAN,
        output_dir=str(tmp_path / "out"),
    )
    values.update(overrides)
    return RunConfig(**values)


@pytest.fixture
def fixed_clock(monkeypatch):
    monkeypatch.setenv("SECPATCH_FIXED_CLOCK", FIXED_CLOCK)
    return resolve_clock()


class TestLoadDataset:
    def test_full_size_jsonl(self, tmp_path):
        path = tmp_path / "big.jsonl"
        with path.open("w") as handle:
            for i in range(470):
                handle.write(json.dumps({"id": f"p{i}", "prompt": f"Task number {i}."}) + "\n")
        spec = DatasetSpec(path=str(path), format=spec_format("jsonl"), name="PythonSecurityEval")
        tasks = load_dataset(spec)
        assert len(tasks) == 470
        assert tasks[0].source_dataset is SourceDataset.PYTHONSECURITYEVAL
        assert [t.id for t in tasks[:3]] == ["p0", "p1", "p2"]

    def test_empty_file_warns_and_returns_empty(self, tmp_path, caplog):
        path = tmp_path / "empty.jsonl"
        path.write_text("")
        with caplog.at_level("WARNING"):
            tasks = load_dataset(DatasetSpec.infer(path))
        assert tasks == []
        assert any("empty" in r.message for r in caplog.records)

    def test_duplicate_id_reports_both_line_numbers(self, tmp_path):
        path = tmp_path / "dup.jsonl"
        path.write_text(
            '{"id": "t1", "prompt": "a"}\n'
            '{"id": "t2", "prompt": "b"}\n'
            '{"id": "t1", "prompt": "c"}\n'
        )
        with pytest.raises(DuplicateId) as err:
            load_dataset(DatasetSpec.infer(path))
        assert "lines 1 and 3" in str(err.value)

    def test_missing_field(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"id": "t1"}\n')
        with pytest.raises(MissingField):
            load_dataset(DatasetSpec.infer(path))

    def test_malformed_line_number_reported(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"id": "t1", "prompt": "ok"}\nnot json\n')
        with pytest.raises(DatasetError) as err:
            load_dataset(DatasetSpec.infer(path))
        assert ":2:" in str(err.value)

    def test_csv_happy_path(self, tmp_path):
        path = tmp_path / "data.csv"
        path.write_text("id,prompt\nc1,Write a parser.\nc2,Write a server.\n")
        tasks = load_dataset(DatasetSpec.infer(path))
        assert [t.id for t in tasks] == ["c1", "c2"]

    def test_csv_header_required(self, tmp_path):
        path = tmp_path / "data.csv"
        path.write_text("name,text\nc1,whatever\n")
        with pytest.raises(MissingField):
            load_dataset(DatasetSpec.infer(path))

    def test_declared_domains_parsed(self, tmp_path):
        path = tmp_path / "dom.jsonl"
        path.write_text('{"id": "t1", "prompt": "p", "domains": ["Database"]}\n')
        tasks = load_dataset(DatasetSpec.infer(path))
        assert tasks[0].domains == frozenset({Domain.DATABASE})


def spec_format(name):
    from secpatch.harness import DatasetFormat

    return DatasetFormat(name)


class TestClassifyDomains:
    def test_sqlite_is_database(self):
        assert classify_domains("import sqlite3") == {Domain.DATABASE}

    def test_os_is_computation_and_system(self):
        assert classify_domains("import os") == {Domain.COMPUTATION, Domain.SYSTEM}

    def test_no_imports_no_domains(self):
        assert classify_domains("x = 1") == set()

    def test_case_sensitive_flask_vs_web_framework(self):
        assert classify_domains("import flask") == {Domain.NETWORK}
        assert classify_domains("from flask import Flask") == {
            Domain.NETWORK,
            Domain.WEB_FRAMEWORKS,
        }

    def test_prompt_text_matches_too(self):
        assert Domain.WEB_FRAMEWORKS in classify_domains("Build a Flask endpoint.")


# Ten hand-labeled snippets: the expected counts below were tallied by hand.
LABELED_CORPUS = [
    ("import sqlite3", {Domain.DATABASE}),
    ("import os", {Domain.COMPUTATION, Domain.SYSTEM}),
    ("import hashlib", {Domain.CRYPTOGRAPHY}),
    ("import requests", {Domain.NETWORK}),
    ("import re", {Domain.GENERAL}),
    ("from flask import Flask", {Domain.NETWORK, Domain.WEB_FRAMEWORKS}),
    ("import numpy", {Domain.COMPUTATION}),
    ("import json", {Domain.SYSTEM}),
    ("x = 1", set()),
    ("import psycopg2", {Domain.DATABASE}),
]


class TestDatasetStats:
    def test_hand_labeled_corpus_exact_counts(self):
        from secpatch.core import TaskPrompt

        tasks = [TaskPrompt(id=f"s{i}", text="placeholder prompt")
                 for i in range(len(LABELED_CORPUS))]
        codes = {f"s{i}": code for i, (code, _) in enumerate(LABELED_CORPUS)}
        stats = dataset_stats(tasks, codes)
        expected_counts = {domain: 0 for domain in Domain}
        for _, labels in LABELED_CORPUS:
            for domain in labels:
                expected_counts[domain] += 1
        for domain in Domain:
            assert stats.per_domain[domain].count == expected_counts[domain], domain
        assert stats.total == 10
        assert stats.per_domain[Domain.DATABASE].percent == 20.0

    def test_empty_corpus_all_zeros(self):
        stats = dataset_stats([])
        assert stats.total == 0
        assert all(entry.count == 0 and entry.percent == 0.0
                   for entry in stats.per_domain.values())


class TestConfigDigest:
    def test_stable_across_calls(self, tmp_path):
        cfg = fixture_config(tmp_path)
        assert config_digest(cfg) == config_digest(cfg)

    def test_sensitive_to_strategy_parameters(self, tmp_path):
        base = fixture_config(tmp_path)
        ablated = fixture_config(
            tmp_path, strategy_cfg=StrategyConfig(solutions_j=1, iterations_k=2)
        )
        assert config_digest(base) != config_digest(ablated)

    def test_insensitive_to_runtime_knobs(self, tmp_path):
        assert config_digest(fixture_config(tmp_path, workers=1)) == config_digest(
            fixture_config(tmp_path, workers=8)
        )


class TestRunBenchmark:
    def test_five_task_fixture_run(self, tmp_path, fixed_clock):
        cfg = fixture_config(tmp_path)
        summary = run_benchmark(cfg)
        assert summary.completed == 5
        assert summary.failed == 0
        records = load_records(records_path(cfg))
        assert len(records) == 5
        assert all(r.config_digest == config_digest(cfg) for r in records)
        assert [r.task_id for r in records] == ["t1", "t2", "t3", "t4", "t5"]

    def test_resume_is_idempotent_and_makes_no_calls(self, tmp_path, fixed_clock):
        cfg = fixture_config(tmp_path)
        backend = CountingBackend(
            ScriptedBackend.from_file(FIXTURES / "scripted_fdsp.json")
        )
        first = run_benchmark(cfg, llm_backend=backend)
        calls_after_first = backend.calls
        before = records_path(cfg).read_bytes()
        second = run_benchmark(cfg, llm_backend=backend)
        assert first.completed == 5
        assert second.completed == 0
        assert second.skipped == 5
        assert backend.calls == calls_after_first
        assert records_path(cfg).read_bytes() == before

    def test_single_failure_does_not_stop_batch(self, tmp_path, fixed_clock):
        # drop t3's generation rule: its scripted LLM raises, others complete
        script = json.loads((FIXTURES / "scripted_fdsp.json").read_text())
        script["rules"] = [
            rule for rule in script["rules"]
            if "evaluates an arithmetic expression" not in rule["when"]
        ]
        crippled = tmp_path / "crippled.json"
        crippled.write_text(json.dumps(script))
        cfg = fixture_config(
            tmp_path,
            provider=ProviderConfig(backend=BackendKind.SCRIPTED, script_path=str(crippled)),
        )
        summary = run_benchmark(cfg)
        assert summary.failed == 1
        assert summary.completed == 4
        assert summary.failed_tasks[0][0] == "t3"
        assert {r.task_id for r in load_records(records_path(cfg))} == {"t1", "t2", "t4", "t5"}

    def test_worker_count_independence(self, tmp_path, fixed_clock):
        digests = []
        for workers in (1, 8):
            cfg = fixture_config(tmp_path / f"w{workers}", workers=workers)
            run_benchmark(cfg)
            digests.append(hashlib.sha256(records_path(cfg).read_bytes()).hexdigest())
        assert digests[0] == digests[1]

    def test_terminal_distribution_matches_scenario(self, tmp_path, fixed_clock):
        cfg = fixture_config(tmp_path)
        run_benchmark(cfg)
        terminals = [r.trace.terminal.value for r in load_records(records_path(cfg))]
        assert sorted(terminals) == sorted(
            ["fixed_at_generation", "fixed", "fixed", "fixed", "unfixed"]
        )

    def test_inline_eval_reports_attached(self, tmp_path, fixed_clock):
        cfg = fixture_config(tmp_path, eval_analyzers=(AnalyzerId.RULESCAN,))
        # rulescan is also the refinement analyzer: eval set is deduplicated,
        # reports come from the trace itself
        run_benchmark(cfg)
        records = load_records(records_path(cfg))
        assert all("eval_reports" not in r.trace.meta for r in records)

    def test_fatal_config_missing_dataset(self, tmp_path):
        cfg = fixture_config(tmp_path, dataset=DatasetSpec.infer(tmp_path / "missing.jsonl"))
        with pytest.raises(DatasetError):
            run_benchmark(cfg)
