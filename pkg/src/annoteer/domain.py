"""Core domain types shared across the engine. No I/O, no LLM calls.

Everything here is an immutable value after construction and safe to share
between threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping

# Sentinel for a completion from which no unique class could be extracted.
# Never a member of a task's classes; flows through sampling but is excluded
# from precision numerators during evaluation.
PARSE_FAILURE = "PARSE_FAILURE"


class DomainError(ValueError):
    """Invalid domain value or violated invariant."""


@dataclass(frozen=True)
class Record:
    """One unlabeled text record, plus evaluation-only metadata columns.

    Construction is permissive; invariants are enforced by validate_corpus,
    which reports violations instead of aborting.
    """

    record_id: str
    text: str
    metadata: Mapping[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class Corpus:
    records: tuple[Record, ...]
    source_name: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "records", tuple(self.records))

    def __len__(self) -> int:
        return len(self.records)

    def get(self, record_id: str) -> Record:
        try:
            return self.by_id()[record_id]
        except KeyError:
            raise DomainError(f"unknown record_id {record_id!r}") from None

    def by_id(self) -> dict[str, Record]:
        return {r.record_id: r for r in self.records}


@dataclass(frozen=True)
class ClassificationTask:
    """The class set and the natural-language instruction to fulfill."""

    classes: tuple[str, ...]
    request: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "classes", tuple(self.classes))
        if len(self.classes) < 2:
            raise DomainError("a task needs at least 2 classes")
        if not self.request.strip():
            raise DomainError("task request must be non-empty")
        seen: set[str] = set()
        for name in self.classes:
            key = name.strip().lower()
            if not key:
                raise DomainError("class names must be non-empty")
            if key == PARSE_FAILURE.lower():
                raise DomainError(f"{PARSE_FAILURE} is reserved and cannot be a class")
            if key in seen:
                raise DomainError(f"duplicate class name {name!r} (case-insensitive)")
            seen.add(key)

    def canonical_class(self, label: str) -> str | None:
        """Map a label to its canonical casing, or None if it is not a class."""
        wanted = label.strip().lower()
        for name in self.classes:
            if name.strip().lower() == wanted:
                return name
        return None


@dataclass(frozen=True)
class PromptVersion:
    """An immutable refined prompt with lineage back to version 0."""

    version_index: int
    text: str
    parent_version: int | None
    fewshot_ids: tuple[str, ...]
    created_at: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "fewshot_ids", tuple(self.fewshot_ids))
        if self.version_index < 0:
            raise DomainError("version_index must be >= 0")
        if self.version_index == 0:
            if self.parent_version is not None:
                raise DomainError("version 0 has no parent")
        elif self.parent_version != self.version_index - 1:
            raise DomainError(
                f"version {self.version_index} must have parent {self.version_index - 1}"
            )


@dataclass(frozen=True)
class ClassificationOutcome:
    """Predicted class for one record, with the completion's token logprobs
    and the geometric-mean confidence derived from them."""

    record_id: str
    predicted_class: str
    token_logprobs: tuple[float, ...]
    confidence: float
    raw_completion: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "token_logprobs", tuple(self.token_logprobs))


@dataclass(frozen=True)
class LabeledExample:
    record_id: str
    expert_label: str
    model_label_at_sampling: str
    confidence_at_sampling: float
    iteration_labeled: int


@dataclass(frozen=True)
class SamplingParams:
    """Per-session sampling constants; changing them mid-session is rejected."""

    sample_fraction: float = 0.10
    per_class_quota: int = 10
    strategy: str = "lowest_confidence"  # or "uniform"

    def __post_init__(self) -> None:
        if not (0.0 < self.sample_fraction <= 1.0):
            raise DomainError("sample_fraction must be in (0, 1]")
        if self.per_class_quota < 1:
            raise DomainError("per_class_quota must be >= 1")
        if self.strategy not in ("lowest_confidence", "uniform"):
            raise DomainError(f"unknown sampling strategy {self.strategy!r}")


class SessionStatus(str, Enum):
    READY_TO_SAMPLE = "ReadyToSample"
    AWAITING_LABELS = "AwaitingLabels"
    FINALIZED = "Finalized"


@dataclass(frozen=True)
class Session:
    """The loop's persistent state. Immutable; transitions produce new values."""

    session_id: str
    corpus: Corpus
    task: ClassificationTask
    prompt_history: tuple[PromptVersion, ...]
    labeled_data: tuple[LabeledExample, ...]
    rng_seed: int
    status: SessionStatus
    sampling_params: SamplingParams

    @property
    def iteration(self) -> int:
        return len(self.prompt_history) - 1

    @property
    def current_prompt(self) -> PromptVersion:
        return self.prompt_history[-1]

    def labeled_ids(self) -> frozenset[str]:
        return frozenset(ex.record_id for ex in self.labeled_data)


@dataclass(frozen=True)
class Violation:
    rule: str
    record_id: str | None
    detail: str


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...]

    @property
    def ok(self) -> bool:
        return not self.violations

    def first(self) -> Violation | None:
        return self.violations[0] if self.violations else None


def validate_corpus(corpus: Corpus) -> ValidationReport:
    """Check corpus invariants. Never raises; reports every violation found."""
    violations: list[Violation] = []
    seen: dict[str, int] = {}
    for pos, record in enumerate(corpus.records):
        if not record.record_id:
            violations.append(
                Violation(
                    rule="non-empty-record-id",
                    record_id=None,
                    detail=f"record at position {pos} has an empty record_id",
                )
            )
        if record.record_id in seen:
            violations.append(
                Violation(
                    rule="unique-record-id",
                    record_id=record.record_id,
                    detail=f"record_id {record.record_id!r} appears at positions "
                    f"{seen[record.record_id]} and {pos}",
                )
            )
        else:
            seen[record.record_id] = pos
        if not record.text.strip():
            violations.append(
                Violation(
                    rule="non-empty-text",
                    record_id=record.record_id,
                    detail=f"record {record.record_id!r} has empty or whitespace-only text",
                )
            )
    if not corpus.records:
        violations.append(
            Violation(rule="non-empty-corpus", record_id=None, detail="corpus has no records")
        )
    return ValidationReport(tuple(violations))
