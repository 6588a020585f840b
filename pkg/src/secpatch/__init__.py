"""secpatch: LLM code generation with static-analysis-driven security patching.

Generate a program from a natural-language prompt, scan it with a static
analyzer, and refine flagged code with one of five strategies, up to a
feedback-driven loop that proposes multiple candidate mitigations and
iterates each until the scan comes back clean.
"""

from .core import (
    AnalysisReport,
    AnalyzerId,
    CodeCandidate,
    Domain,
    Finding,
    Lineage,
    Origin,
    RefinementAttempt,
    RefinementTrace,
    RunRecord,
    ScanStatus,
    SecpatchError,
    Solution,
    SourceDataset,
    StrategyId,
    TaskPrompt,
    Terminal,
    extract_code,
    is_secure,
    load_records,
    record_from_json_line,
    record_to_json_line,
)
from .harness import DatasetSpec, RunConfig, load_dataset, run_benchmark
from .llm import ChatRequest, ChatResponse, LlmClient, ProviderConfig
from .strategies import PromptTemplates, StrategyConfig, default_templates

__version__ = "0.1.0"

__all__ = [
    "AnalysisReport",
    "AnalyzerId",
    "ChatRequest",
    "ChatResponse",
    "CodeCandidate",
    "DatasetSpec",
    "Domain",
    "Finding",
    "Lineage",
    "LlmClient",
    "Origin",
    "PromptTemplates",
    "ProviderConfig",
    "RefinementAttempt",
    "RefinementTrace",
    "RunConfig",
    "RunRecord",
    "ScanStatus",
    "SecpatchError",
    "Solution",
    "SourceDataset",
    "StrategyConfig",
    "StrategyId",
    "TaskPrompt",
    "Terminal",
    "default_templates",
    "extract_code",
    "is_secure",
    "load_dataset",
    "load_records",
    "record_from_json_line",
    "record_to_json_line",
    "run_benchmark",
    "__version__",
]
