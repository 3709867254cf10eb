"""Pipeline configuration: the candidate slate and engine knobs.

The default configuration is the shipped five-candidate slate: two
commented-tuples slots (unfiltered and fully filtered), two compact-tagged
slots sharing a single linker prediction at the table-only and full levels,
and one fully filtered DDL slot, with one generator model across all slots.
Configs load from JSON and validation happens at startup so a bad slate
fails before any model call.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .catalog import FilterLevel
from .formats import RepresentationFormat
from .generation import CandidateSpec
from .selection import DEFAULT_ESCALATION_RULES, MissingPolicyError, confidence_policy

DEFAULT_GENERATOR_MODEL = "gemini-1.5-flash"
DEFAULT_JUDGE_MODEL = "gemini-1.5-flash"
DEFAULT_LINKER_PRIMARY = "gpt-4o"
DEFAULT_LINKER_SECONDARY = "gemini-1.5-pro"


class ConfigError(Exception):
    """A configuration file or value is unusable."""


@dataclass(frozen=True)
class SpecEntry:
    """One candidate slot: representation, filter level, linker model."""

    format: RepresentationFormat
    filter_level: FilterLevel
    linker_model: str | None = None

    def linker_run_id(self) -> str | None:
        """Identity of the linker call this slot consumes.

        Slots sharing (format, linker model) share one prediction and one
        LLM call; no-filtering slots consume none.
        """
        if self.filter_level is FilterLevel.NO_FILTERING:
            return None
        return f"{self.format.value}:{self.linker_model}"


@dataclass
class PipelineConfig:
    """Everything the benchmark runner and ad-hoc querying need."""

    specs: list[SpecEntry] = field(default_factory=list)
    generator_model: str = DEFAULT_GENERATOR_MODEL
    judge_model: str = DEFAULT_JUDGE_MODEL
    judge_schema_format: RepresentationFormat = RepresentationFormat.INLINE_TABLES
    fewshot_k: int = 3
    sample_k: int = 3
    category_threshold: int = 20
    execution_timeout_s: float = 30.0
    result_precision: int = 6
    max_tokens: int = 2048
    workers: int = 4
    max_in_flight: int = 8
    confidence_rules: dict[int, frozenset[tuple[int, ...]]] = field(default_factory=dict)
    price_table_path: str | None = None
    fewshot_store_path: str | None = None
    descriptions_path: str | None = None
    embedding_model: str | None = None  # None uses offline hash embeddings

    @classmethod
    def default(cls) -> "PipelineConfig":
        config = cls(
            specs=[
                SpecEntry(RepresentationFormat.COMMENTED_TUPLES, FilterLevel.NO_FILTERING),
                SpecEntry(
                    RepresentationFormat.COMMENTED_TUPLES,
                    FilterLevel.FULL_FILTERING,
                    DEFAULT_LINKER_PRIMARY,
                ),
                SpecEntry(
                    RepresentationFormat.COMPACT_TAGGED,
                    FilterLevel.TABLE_ONLY,
                    DEFAULT_LINKER_PRIMARY,
                ),
                SpecEntry(
                    RepresentationFormat.COMPACT_TAGGED,
                    FilterLevel.FULL_FILTERING,
                    DEFAULT_LINKER_PRIMARY,
                ),
                SpecEntry(
                    RepresentationFormat.DDL,
                    FilterLevel.FULL_FILTERING,
                    DEFAULT_LINKER_SECONDARY,
                ),
            ]
        )
        config.validate()
        return config

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        if not isinstance(doc, dict):
            raise ConfigError(f"config must be a JSON object, got {type(doc).__name__}")
        config = cls.default()
        known = set(config.__dict__)
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        try:
            if "specs" in doc:
                config.specs = [_parse_spec_entry(entry) for entry in doc["specs"]]
            for key in (
                "generator_model",
                "judge_model",
                "price_table_path",
                "fewshot_store_path",
                "descriptions_path",
                "embedding_model",
            ):
                if key in doc:
                    setattr(config, key, doc[key])
            if "judge_schema_format" in doc:
                config.judge_schema_format = RepresentationFormat.parse(
                    doc["judge_schema_format"]
                )
            for key in ("fewshot_k", "sample_k", "category_threshold", "max_tokens",
                        "workers", "max_in_flight", "result_precision"):
                if key in doc:
                    setattr(config, key, int(doc[key]))
            if "execution_timeout_s" in doc:
                config.execution_timeout_s = float(doc["execution_timeout_s"])
            if "confidence_rules" in doc:
                config.confidence_rules = _parse_confidence_rules(doc["confidence_rules"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad config value: {exc}") from exc
        config.validate()
        return config

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(doc)

    def validate(self) -> None:
        """Fail fast on an unusable configuration."""
        if not self.specs:
            raise ConfigError("config needs at least one candidate spec")
        for position, entry in enumerate(self.specs):
            filtered = entry.filter_level is not FilterLevel.NO_FILTERING
            if filtered and not entry.linker_model:
                raise ConfigError(
                    f"spec {position}: {entry.filter_level.value} requires a linker model"
                )
            if not filtered and entry.linker_model:
                raise ConfigError(
                    f"spec {position}: no-filtering spec must not set a linker model"
                )
        if not self.generator_model:
            raise ConfigError("generator_model must be set")
        if not self.judge_model:
            raise ConfigError("judge_model must be set")
        if self.fewshot_k < 0:
            raise ConfigError("fewshot_k must be non-negative")
        if self.workers < 1 or self.max_in_flight < 1:
            raise ConfigError("workers and max_in_flight must be positive")
        if self.execution_timeout_s <= 0:
            raise ConfigError("execution_timeout_s must be positive")
        n = len(self.specs)
        if n not in DEFAULT_ESCALATION_RULES and n not in self.confidence_rules:
            raise ConfigError(
                f"no confidence rules for {n} candidates; add a confidence_rules entry"
            )
        try:
            confidence_policy([n], n, self.confidence_rules)
        except MissingPolicyError as exc:
            raise ConfigError(str(exc)) from exc

    def to_candidate_specs(self) -> tuple[list[CandidateSpec], dict[str, tuple[RepresentationFormat, str]]]:
        """Expand config slots into CandidateSpecs plus the linker-call plan.

        The plan maps linker run id -> (format, model) with one entry per
        distinct pair, so slots sharing a prediction share one call.
        """
        specs = []
        plan: dict[str, tuple[RepresentationFormat, str]] = {}
        for position, entry in enumerate(self.specs):
            run_id = entry.linker_run_id()
            if run_id is not None and run_id not in plan:
                plan[run_id] = (entry.format, entry.linker_model or "")
            specs.append(
                CandidateSpec(
                    spec_index=position,
                    format=entry.format,
                    filter_level=entry.filter_level,
                    model=self.generator_model,
                    linker_run=run_id,
                )
            )
        for spec in specs:
            spec.validate()
        return specs, plan


def _parse_spec_entry(entry: dict) -> SpecEntry:
    if not isinstance(entry, dict):
        raise ConfigError(f"spec entry must be an object, got {type(entry).__name__}")
    unknown = set(entry) - {"format", "filter_level", "linker_model"}
    if unknown:
        raise ConfigError(f"unknown spec entry keys: {', '.join(sorted(unknown))}")
    try:
        fmt = RepresentationFormat.parse(entry["format"])
        level = FilterLevel.parse(entry["filter_level"])
    except KeyError as exc:
        raise ConfigError(f"spec entry missing {exc.args[0]}") from exc
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return SpecEntry(fmt, level, entry.get("linker_model"))


def _parse_confidence_rules(doc: dict) -> dict[int, frozenset[tuple[int, ...]]]:
    if not isinstance(doc, dict):
        raise ConfigError("confidence_rules must map candidate counts to distributions")
    rules: dict[int, frozenset[tuple[int, ...]]] = {}
    for key, distributions in doc.items():
        try:
            n = int(key)
        except ValueError as exc:
            raise ConfigError(f"confidence_rules key {key!r} is not an integer") from exc
        table = set()
        for dist in distributions:
            normalized = tuple(sorted((int(d) for d in dist), reverse=True))
            if sum(normalized) != n:
                raise ConfigError(
                    f"confidence_rules[{n}]: distribution {dist} does not sum to {n}"
                )
            table.add(normalized)
        rules[n] = frozenset(table)
    return rules
