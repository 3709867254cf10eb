"""Ensemble text-to-SQL over SQLite.

Generates SQL candidates from several schema representations (optionally
narrowed by an LLM schema-linking pass), groups them by execution result,
picks the majority answer when the vote is confident, and escalates to
pairwise LLM comparison when it is not.
"""
from .catalog import (
    CatalogError,
    ColumnDef,
    FilterLevel,
    ForeignKeyDef,
    IntrospectionError,
    MalformedDatabaseError,
    SchemaCatalog,
    TableDef,
    UnreadableDatabaseError,
    apply_filter,
    introspect,
)
from .config import ConfigError, PipelineConfig, SpecEntry
from .formats import (
    FormatError,
    RepresentationFormat,
    canonicalize,
    parse_json_raw,
    render,
    render_all,
)
from .gateway import (
    ChatBackend,
    ChatRequest,
    ChatResponse,
    CostLedger,
    CostReport,
    EmbeddingBackend,
    GatewayError,
    HashEmbeddingBackend,
    HttpChatBackend,
    HttpEmbeddingBackend,
    LlmGateway,
    ModelPrice,
    PriceTable,
    RecordingChatBackend,
    ReplayChatBackend,
    ReplayMissError,
    TokenUsage,
    TransportError,
    UsageRow,
    price,
    request_digest,
)
from .generation import (
    CandidateSpec,
    FewShotExample,
    FewShotStore,
    NoCodeBlockError,
    SqlCandidate,
    build_generation_prompt,
    extract_sql,
    generate_candidates,
    retrieve_fewshots,
)
from .harness import (
    BenchmarkItem,
    BoundsRow,
    ComboResult,
    DatasetError,
    GoldExecutionError,
    PipelineRunner,
    Report,
    RunRecord,
    SweepError,
    VoteBucket,
    aggregate_records,
    bounds_analysis,
    build_fewshot_store,
    ex_by_vote,
    execution_accuracy,
    load_dataset,
    rank_combinations,
    read_records,
    run_benchmark,
    sweep,
    write_records,
)
from .linking import (
    GoldLinking,
    LinkerRun,
    LinkingMetrics,
    LinkingParseError,
    LinkingPrediction,
    LinkingResolutionError,
    build_linking_prompt,
    derive_gold_linking,
    linking_metrics,
    parse_linking_response,
)
from .selection import (
    Confidence,
    Decision,
    ExecStatus,
    ExecutionResult,
    MissingPolicyError,
    PairwiseJudge,
    SelectionMethod,
    SelectionOutcome,
    VoteGroup,
    confidence_policy,
    execute_candidate,
    group_votes,
    normalize_result,
    pairwise_select,
    select,
)

__version__ = "0.1.0"

__all__ = [
    "BenchmarkItem",
    "BoundsRow",
    "CandidateSpec",
    "CatalogError",
    "ChatBackend",
    "ChatRequest",
    "ChatResponse",
    "ColumnDef",
    "ComboResult",
    "Confidence",
    "ConfigError",
    "CostLedger",
    "CostReport",
    "DatasetError",
    "Decision",
    "EmbeddingBackend",
    "ExecStatus",
    "ExecutionResult",
    "FewShotExample",
    "FewShotStore",
    "FilterLevel",
    "ForeignKeyDef",
    "FormatError",
    "GatewayError",
    "GoldExecutionError",
    "GoldLinking",
    "HashEmbeddingBackend",
    "HttpChatBackend",
    "HttpEmbeddingBackend",
    "IntrospectionError",
    "LinkerRun",
    "LinkingMetrics",
    "LinkingParseError",
    "LinkingPrediction",
    "LinkingResolutionError",
    "LlmGateway",
    "MalformedDatabaseError",
    "MissingPolicyError",
    "ModelPrice",
    "NoCodeBlockError",
    "PairwiseJudge",
    "PipelineConfig",
    "PipelineRunner",
    "PriceTable",
    "RecordingChatBackend",
    "ReplayChatBackend",
    "ReplayMissError",
    "Report",
    "RepresentationFormat",
    "RunRecord",
    "SchemaCatalog",
    "SelectionMethod",
    "SelectionOutcome",
    "SpecEntry",
    "SqlCandidate",
    "SweepError",
    "TableDef",
    "TokenUsage",
    "TransportError",
    "UnreadableDatabaseError",
    "UsageRow",
    "VoteBucket",
    "VoteGroup",
    "aggregate_records",
    "apply_filter",
    "bounds_analysis",
    "build_fewshot_store",
    "build_generation_prompt",
    "build_linking_prompt",
    "canonicalize",
    "confidence_policy",
    "derive_gold_linking",
    "ex_by_vote",
    "execute_candidate",
    "execution_accuracy",
    "extract_sql",
    "generate_candidates",
    "group_votes",
    "introspect",
    "linking_metrics",
    "load_dataset",
    "normalize_result",
    "pairwise_select",
    "parse_json_raw",
    "parse_linking_response",
    "price",
    "rank_combinations",
    "read_records",
    "render",
    "render_all",
    "request_digest",
    "retrieve_fewshots",
    "run_benchmark",
    "select",
    "sweep",
    "write_records",
]
