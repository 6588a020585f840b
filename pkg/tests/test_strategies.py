"""Strategy behavior: call accounting, early stop, branching, parsing."""

from __future__ import annotations

import pytest
from hypothesis import given, strategies as st

from secpatch.analysis import RuleScanAnalyzer, rulescan
from secpatch.core import (
    CodeCandidate,
    Origin,
    StrategyId,
    Terminal,
)
from secpatch.llm import LlmClient, LlmError, ScriptedBackend
from secpatch.strategies import (
    BranchSeedMode,
    PreconditionError,
    PromptError,
    StrategyConfig,
    bandit_feedback_refine,
    default_templates,
    direct_refine,
    fdsp_refine,
    generate_initial,
    generate_solutions,
    parse_solutions,
    render_report_feedback,
    run_strategy,
    self_debug_refine,
    verbalization_refine,
    verbalize,
)

from conftest import (
    CLEAN_CODE,
    VULN_EVAL,
    VULN_SQL,
    FailingBackend,
    SpyBackend,
    fenced,
    scripted_client,
    vulnerable_candidate,
)

ANALYZER = RuleScanAnalyzer()


def flagged(code=VULN_SQL):
    candidate = vulnerable_candidate(code)
    return candidate, rulescan(candidate)


def clean_report():
    return rulescan(CodeCandidate(code=CLEAN_CODE))


class TestTemplates:
    def test_all_templates_load(self):
        templates = default_templates()
        rendered = templates.render("direct", code="x = 1")
        assert rendered.startswith(
            "Does the provided function have a security issue? If yes, please fix the issue."
        )
        assert "x = 1" in rendered

    def test_digest_is_stable(self):
        assert default_templates().digest() == default_templates().digest()
        assert len(default_templates().digest()) == 64

    def test_missing_placeholder_raises(self):
        with pytest.raises(PromptError):
            default_templates().render("direct")


class TestRenderReportFeedback:
    def test_figure_shape_rule_id_and_line(self, listing1_code, bandit_listing1_payload):
        from secpatch.analysis import bandit_report_from_payload

        report = bandit_report_from_payload(bandit_listing1_payload)
        feedback = render_report_feedback(report, listing1_code)
        assert "B608" in feedback
        assert "Line 7:" in feedback
        assert "cursor.execute" in feedback
        assert feedback.startswith("Issue: [B608]")


class TestGenerateInitial:
    def test_valid_first_shot(self, sample_task):
        llm = scripted_client([fenced(CLEAN_CODE)])
        result = generate_initial(sample_task, llm)
        assert result.llm_calls == 1
        assert result.candidate.origin is Origin.INITIAL
        assert result.compile_error is None

    def test_broken_then_fixed(self, sample_task):
        llm = scripted_client([fenced("def f(:\n    pass"), fenced(CLEAN_CODE)])
        result = generate_initial(sample_task, llm)
        assert result.llm_calls == 2
        assert result.candidate.origin is Origin.COMPILE_FIXED
        assert result.compile_error is None

    def test_persistent_error_recorded_not_raised(self, sample_task):
        llm = scripted_client([fenced("def f(:")] * 3)
        result = generate_initial(sample_task, llm, cfg=StrategyConfig(max_compile_fix_rounds=2))
        assert result.llm_calls == 3
        assert result.candidate.origin is Origin.INITIAL
        assert result.compile_error is not None

    def test_scripted_checker_can_replace_interpreter(self, sample_task):
        calls = []

        def checker(candidate):
            calls.append(candidate.code)
            return None

        llm = scripted_client([fenced(CLEAN_CODE)])
        generate_initial(sample_task, llm, checker=checker)
        assert len(calls) == 1


class TestDirectRefine:
    def test_fix_that_removes_pattern(self, sample_task):
        candidate, report = flagged()
        llm = scripted_client([fenced(CLEAN_CODE)])
        trace = direct_refine(sample_task, candidate, report, llm, ANALYZER)
        assert trace.terminal is Terminal.FIXED
        assert len(trace.attempts) == 1
        assert trace.total_llm_calls == 1

    def test_identical_code_stays_unfixed(self, sample_task):
        candidate, report = flagged()
        llm = scripted_client([fenced(candidate.code)])
        trace = direct_refine(sample_task, candidate, report, llm, ANALYZER)
        assert trace.terminal is Terminal.UNFIXED
        assert trace.total_llm_calls == 1

    def test_clean_report_violates_precondition(self, sample_task):
        with pytest.raises(PreconditionError):
            direct_refine(
                sample_task, CodeCandidate(code=CLEAN_CODE), clean_report(),
                scripted_client(["x"]), ANALYZER,
            )

    def test_user_message_is_code_preceded_by_exact_instruction(self, sample_task):
        candidate, report = flagged()
        spy = SpyBackend(ScriptedBackend.from_responses([fenced(CLEAN_CODE)]))
        direct_refine(sample_task, candidate, report,
                      LlmClient(backend=spy, model_id="m"), ANALYZER)
        prompt = spy.requests[0].user
        instruction = ("Does the provided function have a security issue? "
                       "If yes, please fix the issue.")
        assert prompt.startswith(instruction)
        assert prompt.index(instruction) < prompt.index(candidate.code)

    def test_llm_error_becomes_error_terminal(self, sample_task):
        candidate, report = flagged()
        llm = LlmClient(backend=FailingBackend([]), model_id="m")
        trace = direct_refine(sample_task, candidate, report, llm, ANALYZER)
        assert trace.terminal is Terminal.ERROR
        assert "error" in trace.meta

    def test_refinement_syntax_break_recorded_not_repaired(self, sample_task):
        candidate, report = flagged()
        llm = scripted_client([fenced("def broken(:\n    pass")])
        trace = direct_refine(sample_task, candidate, report, llm, ANALYZER)
        assert trace.total_llm_calls == 1  # no extra repair call
        assert "syntax_error" in trace.attempts[0].meta
        assert trace.attempts[0].meta["syntax_error"]["line"] == 1


class TestSelfDebugRefine:
    def test_explanation_then_fix(self, sample_task):
        candidate, report = flagged()
        llm = scripted_client(["line 1 does X, line 2 does Y", fenced(CLEAN_CODE)])
        trace = self_debug_refine(sample_task, candidate, report, llm, ANALYZER)
        assert trace.terminal is Terminal.FIXED
        assert trace.total_llm_calls == 2
        assert trace.attempts[0].llm_calls_used == 2

    def test_same_code_unfixed(self, sample_task):
        candidate, report = flagged()
        llm = scripted_client(["explanation", fenced(candidate.code)])
        trace = self_debug_refine(sample_task, candidate, report, llm, ANALYZER)
        assert trace.terminal is Terminal.UNFIXED
        assert trace.total_llm_calls == 2

    def test_explanation_stored_verbatim(self, sample_task):
        candidate, report = flagged()
        explanation = "the execute call interpolates unsanitized input"
        llm = scripted_client([explanation, fenced(CLEAN_CODE)])
        trace = self_debug_refine(sample_task, candidate, report, llm, ANALYZER)
        assert trace.attempts[0].meta["explanation"] == explanation


class TestBanditFeedbackRefine:
    def test_feedback_fix(self, sample_task):
        candidate, report = flagged()
        llm = scripted_client([fenced(CLEAN_CODE)])
        trace = bandit_feedback_refine(sample_task, candidate, report, llm, ANALYZER)
        assert trace.terminal is Terminal.FIXED
        assert trace.total_llm_calls == 1

    def test_prompt_contains_rule_and_line(self, sample_task):
        candidate, report = flagged()
        spy = SpyBackend(ScriptedBackend.from_responses([fenced(CLEAN_CODE)]))
        bandit_feedback_refine(sample_task, candidate, report,
                               LlmClient(backend=spy, model_id="m"), ANALYZER)
        prompt = spy.requests[0].user
        assert "B608" in prompt
        assert "Line 3:" in prompt  # the execute line of the small fixture

    def test_clean_report_guard(self, sample_task):
        with pytest.raises(PreconditionError):
            bandit_feedback_refine(
                sample_task, CodeCandidate(code=CLEAN_CODE), clean_report(),
                scripted_client(["x"]), ANALYZER,
            )


class TestVerbalization:
    def test_verbalize_returns_script_verbatim(self):
        candidate, report = flagged()
        prose = "The query is built by string formatting, enabling injection."
        assert verbalize(report, candidate, scripted_client([prose])) == prose

    def test_refine_uses_two_calls_and_stores_prose(self, sample_task):
        candidate, report = flagged()
        prose = "Detailed prose about the SQL injection risk."
        llm = scripted_client([prose, fenced(CLEAN_CODE)])
        trace = verbalization_refine(sample_task, candidate, report, llm, ANALYZER)
        assert trace.terminal is Terminal.FIXED
        assert trace.total_llm_calls == 2
        assert trace.meta["verbalization"] == prose

    def test_no_op_fix_unfixed(self, sample_task):
        candidate, report = flagged()
        llm = scripted_client(["prose", fenced(candidate.code)])
        trace = verbalization_refine(sample_task, candidate, report, llm, ANALYZER)
        assert trace.terminal is Terminal.UNFIXED

    def test_verbalize_guards_against_clean_reports(self):
        with pytest.raises(PreconditionError):
            verbalize(clean_report(), CodeCandidate(code=CLEAN_CODE), scripted_client(["x"]))


class TestParseSolutions:
    def test_numbered_with_parens(self):
        solutions, shortfall = parse_solutions("1) A\n2) B\n3) C", 3)
        assert [s.body for s in solutions] == ["A", "B", "C"]
        assert [s.index for s in solutions] == [1, 2, 3]
        assert shortfall is False

    def test_numbered_with_dots_and_bold(self):
        text = "**1)** First: do the thing.\n2. Second: other thing.\n3. Third: more."
        solutions, shortfall = parse_solutions(text, 3)
        assert len(solutions) == 3
        assert shortfall is False

    def test_titles_extracted_from_colon_headers(self):
        text = (
            "1) Use Parameterized Queries: placeholders keep input as data.\n"
            "2) Manual Escape and Quote Table Name: whitelist identifiers.\n"
            "3) Use an ORM (Object-Relational Mapping) Library: let it quote."
        )
        solutions, _ = parse_solutions(text, 3)
        assert solutions[0].title == "Use Parameterized Queries"
        assert solutions[1].title == "Manual Escape and Quote Table Name"
        assert solutions[2].title == "Use an ORM (Object-Relational Mapping) Library"

    def test_unnumbered_paragraph_falls_back_to_single_solution(self):
        solutions, shortfall = parse_solutions("Just use an ORM and sanitize inputs.", 3)
        assert len(solutions) == 1
        assert solutions[0].index == 1
        assert shortfall is True

    def test_excess_items_clamped_to_j(self):
        solutions, shortfall = parse_solutions("1) A\n2) B\n3) C\n4) D", 3)
        assert len(solutions) == 3
        assert shortfall is False

    @given(st.text(min_size=1, max_size=300).filter(str.strip), st.integers(1, 5))
    def test_cardinality_always_in_range(self, text, j):
        solutions, shortfall = parse_solutions(text, j)
        assert 1 <= len(solutions) <= j
        assert [s.index for s in solutions] == list(range(1, len(solutions) + 1))
        if shortfall:
            assert len(solutions) == 1


class TestGenerateSolutions:
    def test_three_titled_solutions(self):
        candidate, report = flagged()
        text = (
            "1) Use Parameterized Queries: placeholders.\n"
            "2) Whitelist Table Names: validate.\n"
            "3) Use an ORM: delegate quoting."
        )
        batch = generate_solutions(candidate, report, 3, scripted_client([text]))
        assert len(batch.solutions) == 3
        assert batch.shortfall is False
        assert batch.raw == text

    def test_shortfall_recorded(self):
        candidate, report = flagged()
        batch = generate_solutions(candidate, report, 3, scripted_client(["no numbering here"]))
        assert len(batch.solutions) == 1
        assert batch.shortfall is True


SOLUTIONS_3 = "1) Parameterize: use placeholders.\n2) Whitelist: validate names.\n3) ORM: delegate."


class TestFdspRefine:
    def test_fix_at_first_branch_first_iteration(self, sample_task):
        candidate, report = flagged()
        llm = scripted_client([SOLUTIONS_3, fenced(CLEAN_CODE)])
        trace = fdsp_refine(sample_task, candidate, report, llm, ANALYZER,
                            StrategyConfig(solutions_j=3, iterations_k=2))
        assert trace.terminal is Terminal.FIXED
        assert trace.total_llm_calls == 2  # solution generation + one repair
        assert len(trace.attempts) == 1
        assert trace.attempts[0].candidate.lineage.solution_index == 1

    def test_degenerate_single_solution_single_iteration(self, sample_task):
        candidate, report = flagged()
        llm = scripted_client([SOLUTIONS_3, fenced(candidate.code)])
        trace = fdsp_refine(sample_task, candidate, report, llm, ANALYZER,
                            StrategyConfig(solutions_j=1, iterations_k=1))
        assert trace.total_llm_calls <= 2
        assert trace.terminal is Terminal.UNFIXED

    def test_exhaustive_failure_spends_full_budget(self, sample_task):
        candidate, report = flagged()
        cfg = StrategyConfig(solutions_j=3, iterations_k=2)
        llm = scripted_client([SOLUTIONS_3] + [fenced(candidate.code)] * 6)
        trace = fdsp_refine(sample_task, candidate, report, llm, ANALYZER, cfg)
        assert trace.terminal is Terminal.UNFIXED
        assert trace.total_llm_calls == 1 + cfg.solutions_j * cfg.iterations_k
        assert len(trace.attempts) == 6

    def test_unfixed_final_candidate_has_fewest_findings(self, sample_task):
        # Two findings initially; attempt 2 gets down to one finding.
        two_issues = VULN_SQL + "password = \"x\"\n"
        candidate, report = flagged(two_issues)
        assert len(report.findings) == 2
        one_issue = fenced(VULN_EVAL)
        llm = scripted_client([SOLUTIONS_3, fenced(two_issues), one_issue, fenced(two_issues)])
        trace = fdsp_refine(sample_task, candidate, report, llm, ANALYZER,
                            StrategyConfig(solutions_j=3, iterations_k=1))
        assert trace.terminal is Terminal.UNFIXED
        assert trace.meta["final"] == {"solution_index": 2, "iteration": 1}
        assert len(trace.final_report.findings) == 1

    def test_mid_branch_error_abandons_branch_and_continues(self, sample_task):
        candidate, report = flagged()
        backend = FailingBackend([SOLUTIONS_3], LlmError("boom"))

        class RecoveringBackend:
            def __init__(self):
                self.calls = 0

            def complete(self, request):
                self.calls += 1
                if self.calls == 1:
                    from secpatch.llm import ChatResponse
                    return ChatResponse(text=SOLUTIONS_3)
                if self.calls == 2:
                    raise LlmError("branch one dies")
                from secpatch.llm import ChatResponse
                return ChatResponse(text=fenced(CLEAN_CODE))

        llm = LlmClient(backend=RecoveringBackend(), model_id="m")
        trace = fdsp_refine(sample_task, candidate, report, llm, ANALYZER,
                            StrategyConfig(solutions_j=2, iterations_k=2))
        assert trace.terminal is Terminal.FIXED
        assert trace.attempts[-1].candidate.lineage.solution_index == 2
        assert trace.meta["errors"]

    def test_all_branches_errored_is_terminal_error(self, sample_task):
        candidate, report = flagged()
        llm = LlmClient(backend=FailingBackend([SOLUTIONS_3]), model_id="m")
        trace = fdsp_refine(sample_task, candidate, report, llm, ANALYZER,
                            StrategyConfig(solutions_j=2, iterations_k=2))
        assert trace.terminal is Terminal.ERROR
        assert len(trace.meta["errors"]) == 2

    def test_branches_seed_from_original_by_default(self, sample_task):
        candidate, report = flagged()
        other_vuln = fenced(VULN_EVAL)
        spy = SpyBackend(ScriptedBackend.from_responses(
            [SOLUTIONS_3, other_vuln, other_vuln, other_vuln, other_vuln]
        ))
        llm = LlmClient(backend=spy, model_id="m")
        fdsp_refine(sample_task, candidate, report, llm, ANALYZER,
                    StrategyConfig(solutions_j=2, iterations_k=2))
        # prompts: [solution_gen, b1i1, b1i2, b2i1, b2i2]
        assert candidate.code in spy.requests[1].user        # branch 1 starts at original
        assert VULN_EVAL.strip() in spy.requests[2].user     # round 2 chains on round 1
        assert candidate.code in spy.requests[3].user        # branch 2 restarts at original

    def test_chained_mode_seeds_next_branch_from_previous(self, sample_task):
        candidate, report = flagged()
        other_vuln = fenced(VULN_EVAL)
        spy = SpyBackend(ScriptedBackend.from_responses(
            [SOLUTIONS_3, other_vuln, other_vuln, other_vuln, other_vuln]
        ))
        llm = LlmClient(backend=spy, model_id="m")
        fdsp_refine(sample_task, candidate, report, llm, ANALYZER,
                    StrategyConfig(solutions_j=2, iterations_k=2,
                                   branch_seed_mode=BranchSeedMode.CHAINED))
        assert VULN_EVAL.strip() in spy.requests[3].user     # branch 2 continues the chain
        assert candidate.code not in spy.requests[3].user

    def test_clean_attempt_is_always_last(self, sample_task):
        candidate, report = flagged()
        llm = scripted_client(
            [SOLUTIONS_3, fenced(candidate.code), fenced(CLEAN_CODE)]
        )
        trace = fdsp_refine(sample_task, candidate, report, llm, ANALYZER,
                            StrategyConfig(solutions_j=3, iterations_k=2))
        assert trace.terminal is Terminal.FIXED
        assert [a.report.is_clean for a in trace.attempts] == [False, True]


class TestDispatchAndAccounting:
    CASES = [
        (StrategyId.DIRECT, 1, [fenced(CLEAN_CODE)]),
        (StrategyId.SELF_DEBUG, 2, ["explanation", fenced(CLEAN_CODE)]),
        (StrategyId.BANDIT_FEEDBACK, 1, [fenced(CLEAN_CODE)]),
        (StrategyId.VERBALIZATION, 2, ["prose", fenced(CLEAN_CODE)]),
    ]

    @pytest.mark.parametrize("strategy,expected_calls,responses",
                             CASES, ids=[c[0].value for c in CASES])
    def test_baseline_call_budgets(self, sample_task, strategy, expected_calls, responses):
        candidate, report = flagged()
        trace = run_strategy(strategy, sample_task, candidate, report,
                             scripted_client(responses), ANALYZER)
        assert trace.total_llm_calls == expected_calls
        assert trace.strategy is strategy
