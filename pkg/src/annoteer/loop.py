"""The iterative expert-labeling loop: draw a random subsample, classify it
with the current prompt, pick the lowest-confidence records per predicted
class for expert review, fold mismatches back into the prompt, repeat.

The engine owns the Session and is event-sourced: every state transition
appends an event carrying its full payload, and replaying the event list
reconstructs the exact state.
"""

from __future__ import annotations

import hashlib
import math
import random
import uuid
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from typing import Callable, Iterable, Mapping, Sequence

from .classify import OutcomeError, classify_all
from .domain import (
    ClassificationOutcome,
    ClassificationTask,
    Corpus,
    DomainError,
    LabeledExample,
    PARSE_FAILURE,
    PromptVersion,
    Record,
    SamplingParams,
    Session,
    SessionStatus,
    validate_corpus,
)
from .gateway import Backend
from .prompts import FewShotExample, MetaPromptTemplates, generate_initial_prompt, update_prompt


class LoopError(Exception):
    """Base class for loop state-machine violations."""


class WrongState(LoopError):
    """Operation not allowed in the session's current status."""


class EmptyPool(LoopError):
    """Every corpus record has already been labeled."""


class UnknownRecordId(LoopError):
    """Submitted labels name a record outside the pending batch."""


class IncompleteBatch(LoopError):
    """Submitted labels do not cover the pending batch exactly."""


class InvalidClassLabel(LoopError):
    """Submitted label is not one of the task's classes."""


@dataclass(frozen=True)
class SampleItem:
    record_id: str
    text: str
    model_label: str
    confidence: float
    class_bucket: str


@dataclass(frozen=True)
class SampleBatch:
    iteration: int
    created_from_prompt: int
    items: tuple[SampleItem, ...]
    strategy: str = "lowest_confidence"

    def record_ids(self) -> frozenset[str]:
        return frozenset(item.record_id for item in self.items)


@dataclass(frozen=True)
class IterationOutcome:
    n_mismatches: int
    few_shots: tuple[FewShotExample, ...]
    new_prompt: PromptVersion
    prompt_text_changed: bool


# --- events -----------------------------------------------------------------


@dataclass(frozen=True)
class SessionStarted:
    kind = "SessionStarted"
    session_id: str
    corpus: Corpus
    task: ClassificationTask
    sampling_params: SamplingParams
    rng_seed: int
    created_at: str


@dataclass(frozen=True)
class PromptAdvanced:
    kind = "PromptAdvanced"
    prompt: PromptVersion
    no_op: bool = False


@dataclass(frozen=True)
class SubsampleResult:
    """Classification of one subsample record, kept for the audit trail."""

    record_id: str
    predicted_class: str
    confidence: float


@dataclass(frozen=True)
class BatchBuilt:
    kind = "BatchBuilt"
    batch: SampleBatch
    draw_index: int
    subsample: tuple[SubsampleResult, ...]
    n_errors: int
    warnings: tuple[str, ...]


@dataclass(frozen=True)
class LabelsSubmitted:
    kind = "LabelsSubmitted"
    labeled: tuple[LabeledExample, ...]
    mismatch_ids: tuple[str, ...]


@dataclass(frozen=True)
class Finalized:
    kind = "Finalized"
    prompt_version: int
    outcomes: tuple[ClassificationOutcome, ...]
    errors: tuple[OutcomeError, ...]


Event = SessionStarted | PromptAdvanced | BatchBuilt | LabelsSubmitted | Finalized


# --- pure selection helpers ---------------------------------------------------


def subsample_size(pool_size: int, fraction: float) -> int:
    return max(1, math.ceil(fraction * pool_size))


def select_lowest_confidence(
    outcomes: Sequence[ClassificationOutcome],
    classes: Sequence[str],
    quota: int,
) -> list[tuple[ClassificationOutcome, str]]:
    """Per predicted class, the quota lowest-confidence outcomes, ties broken
    by ascending record_id. Unparseable outcomes form a pseudo-bucket after
    the real classes, capped at the quota and at whatever headroom the hard
    cap of quota x len(classes) leaves free.
    """
    by_class: dict[str, list[ClassificationOutcome]] = {c: [] for c in classes}
    failures: list[ClassificationOutcome] = []
    for outcome in outcomes:
        if outcome.predicted_class == PARSE_FAILURE:
            failures.append(outcome)
        else:
            by_class[outcome.predicted_class].append(outcome)

    selected: list[tuple[ClassificationOutcome, str]] = []
    for cls in classes:
        bucket = sorted(by_class[cls], key=lambda o: (o.confidence, o.record_id))[:quota]
        selected.extend((o, cls) for o in bucket)

    headroom = quota * len(classes) - len(selected)
    take = min(quota, headroom, len(failures))
    if take > 0:
        bucket = sorted(failures, key=lambda o: (o.confidence, o.record_id))[:take]
        selected.extend((o, PARSE_FAILURE) for o in bucket)
    return selected


def select_uniform(
    outcomes: Sequence[ClassificationOutcome],
    classes: Sequence[str],
    quota: int,
    rng: random.Random,
) -> list[tuple[ClassificationOutcome, str]]:
    """Baseline strategy: uniform draw of the same batch size the
    lowest-confidence selection would have produced on this subsample."""
    target = len(select_lowest_confidence(outcomes, classes, quota))
    picked = rng.sample(list(outcomes), min(target, len(outcomes)))
    return [(o, o.predicted_class) for o in picked]


def mismatched_items(
    batch: SampleBatch, expert_labels: Mapping[str, str]
) -> list[SampleItem]:
    """Batch items whose stored model label disagrees with the expert."""
    return [item for item in batch.items if expert_labels[item.record_id] != item.model_label]


def _derive_seed(*parts: object) -> int:
    blob = "|".join(str(p) for p in parts).encode("utf-8")
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "big")


def _now_iso() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


# --- engine -------------------------------------------------------------------


class SessionEngine:
    """Owns one session: applies events to fold state, runs the loop's
    transitions, and streams every event to an optional sink.

    Single-writer: callers must serialize mutating operations per session
    (the HTTP layer holds a per-session guard; the CLI is sequential).
    """

    def __init__(
        self,
        backend: Backend,
        templates: MetaPromptTemplates | None = None,
        clock: Callable[[], str] = _now_iso,
        event_sink: Callable[[Event], None] | None = None,
        max_in_flight: int = 16,
        token_scope: str = "completion",
    ):
        self.backend = backend
        self.templates = templates or MetaPromptTemplates.builtin()
        self.clock = clock
        self.event_sink = event_sink
        self.max_in_flight = max_in_flight
        self.token_scope = token_scope

        self.session: Session | None = None
        self.pending_batch: SampleBatch | None = None
        self.final_outcomes: tuple[ClassificationOutcome, ...] | None = None
        self.final_errors: tuple[OutcomeError, ...] = ()
        self.events: list[Event] = []
        self._draw_cursor = 0

    # -- construction ----------------------------------------------------------

    @classmethod
    def start(
        cls,
        corpus: Corpus,
        task: ClassificationTask,
        backend: Backend,
        rng_seed: int,
        sampling_params: SamplingParams | None = None,
        session_id: str | None = None,
        templates: MetaPromptTemplates | None = None,
        clock: Callable[[], str] = _now_iso,
        event_sink: Callable[[Event], None] | None = None,
        max_in_flight: int = 16,
    ) -> "SessionEngine":
        """Validate inputs, generate prompt version 0, and open the session."""
        report = validate_corpus(corpus)
        if not report.ok:
            first = report.first()
            raise DomainError(f"corpus failed validation: {first.detail}")
        engine = cls(
            backend,
            templates=templates,
            clock=clock,
            event_sink=event_sink,
            max_in_flight=max_in_flight,
        )
        prompt0 = generate_initial_prompt(
            task, corpus, backend, rng_seed, templates=engine.templates, clock=clock
        )
        engine._record(
            SessionStarted(
                session_id=session_id or uuid.uuid4().hex[:12],
                corpus=corpus,
                task=task,
                sampling_params=sampling_params or SamplingParams(),
                rng_seed=rng_seed,
                created_at=clock(),
            )
        )
        engine._record(PromptAdvanced(prompt=prompt0))
        return engine

    @classmethod
    def from_events(
        cls,
        events: Iterable[Event],
        backend: Backend,
        templates: MetaPromptTemplates | None = None,
        clock: Callable[[], str] = _now_iso,
        event_sink: Callable[[Event], None] | None = None,
        max_in_flight: int = 16,
    ) -> "SessionEngine":
        """Rebuild a session by folding a stored event sequence."""
        engine = cls(
            backend,
            templates=templates,
            clock=clock,
            event_sink=None,
            max_in_flight=max_in_flight,
        )
        for event in events:
            engine._apply(event)
            engine.events.append(event)
        engine.event_sink = event_sink
        return engine

    # -- event plumbing ---------------------------------------------------------

    def _record(self, event: Event) -> None:
        self._apply(event)
        self.events.append(event)
        if self.event_sink is not None:
            self.event_sink(event)

    def _apply(self, event: Event) -> None:
        if isinstance(event, SessionStarted):
            self.session = Session(
                session_id=event.session_id,
                corpus=event.corpus,
                task=event.task,
                prompt_history=(),
                labeled_data=(),
                rng_seed=event.rng_seed,
                status=SessionStatus.READY_TO_SAMPLE,
                sampling_params=event.sampling_params,
            )
        elif isinstance(event, PromptAdvanced):
            s = self._session()
            self.session = _replace(
                s,
                prompt_history=s.prompt_history + (event.prompt,),
                status=SessionStatus.READY_TO_SAMPLE,
            )
            self.pending_batch = None
        elif isinstance(event, BatchBuilt):
            s = self._session()
            overlap = event.batch.record_ids() & s.labeled_ids()
            assert not overlap, f"batch intersects labeled_data: {sorted(overlap)}"
            self.pending_batch = event.batch
            self._draw_cursor = event.draw_index + 1
            self.session = _replace(s, status=SessionStatus.AWAITING_LABELS)
        elif isinstance(event, LabelsSubmitted):
            s = self._session()
            self.session = _replace(s, labeled_data=s.labeled_data + event.labeled)
            self.pending_batch = None
        elif isinstance(event, Finalized):
            s = self._session()
            self.final_outcomes = event.outcomes
            self.final_errors = event.errors
            self.session = _replace(s, status=SessionStatus.FINALIZED)
        else:  # pragma: no cover - exhaustive
            raise TypeError(f"unknown event {event!r}")

    def _session(self) -> Session:
        if self.session is None:
            raise LoopError("session not started")
        return self.session

    # -- the loop ----------------------------------------------------------------

    def draw_subsample(self) -> list[Record]:
        """Uniform draw, without replacement, of ceil(fraction * pool) records
        from the unlabeled pool. Each call advances to a fresh RNG substream;
        a replayed session reproduces the logged sequence."""
        s = self._session()
        if s.status is not SessionStatus.READY_TO_SAMPLE:
            raise WrongState(f"cannot sample while {s.status.value}")
        labeled = s.labeled_ids()
        pool = [r for r in s.corpus.records if r.record_id not in labeled]
        if not pool:
            raise EmptyPool("no unlabeled records remain")
        k = subsample_size(len(pool), s.sampling_params.sample_fraction)
        rng = random.Random(_derive_seed(s.rng_seed, "draw", self._draw_cursor))
        self._draw_cursor += 1
        return rng.sample(pool, k)

    def build_sample_batch(self) -> SampleBatch:
        """Draw, classify with the current prompt, and select records for
        expert review; transitions the session to AwaitingLabels."""
        s = self._session()
        if s.status is not SessionStatus.READY_TO_SAMPLE:
            raise WrongState(f"cannot build a batch while {s.status.value}")
        draw_index = self._draw_cursor
        subsample = self.draw_subsample()
        results = classify_all(
            subsample,
            s.current_prompt,
            s.task,
            self.backend,
            max_in_flight=self.max_in_flight,
            token_scope=self.token_scope,
        )
        outcomes = [r for r in results if isinstance(r, ClassificationOutcome)]
        n_errors = len(results) - len(outcomes)

        quota = s.sampling_params.per_class_quota
        if s.sampling_params.strategy == "uniform":
            rng = random.Random(_derive_seed(s.rng_seed, "uniform-select", draw_index))
            picked = select_uniform(outcomes, s.task.classes, quota, rng)
        else:
            picked = select_lowest_confidence(outcomes, s.task.classes, quota)

        by_id = {r.record_id: r for r in subsample}
        items = tuple(
            SampleItem(
                record_id=o.record_id,
                text=by_id[o.record_id].text,
                model_label=o.predicted_class,
                confidence=o.confidence,
                class_bucket=bucket,
            )
            for o, bucket in picked
        )
        warnings: list[str] = []
        if n_errors:
            warnings.append(f"{n_errors} subsample records failed to classify")
            filled = {bucket for _, bucket in picked}
            for cls in s.task.classes:
                if cls not in filled:
                    warnings.append(f"class bucket {cls!r} is empty after errors")
        batch = SampleBatch(
            iteration=s.iteration,
            created_from_prompt=s.current_prompt.version_index,
            items=items,
            strategy=s.sampling_params.strategy,
        )
        self._record(
            BatchBuilt(
                batch=batch,
                draw_index=draw_index,
                subsample=tuple(
                    SubsampleResult(o.record_id, o.predicted_class, o.confidence)
                    for o in outcomes
                ),
                n_errors=n_errors,
                warnings=tuple(warnings),
            )
        )
        return batch

    def submit_labels(self, labels: Mapping[str, str]) -> IterationOutcome:
        """Fold the expert's labels in: extend labeled_data, extract this
        batch's mismatches as few-shots, and advance the prompt (a no-op
        version when every label agreed). Rejects atomically on any invalid
        or incomplete label."""
        s = self._session()
        if s.status is not SessionStatus.AWAITING_LABELS or self.pending_batch is None:
            raise WrongState(f"no batch awaiting labels (status {s.status.value})")
        batch = self.pending_batch

        batch_ids = batch.record_ids()
        unknown = set(labels) - batch_ids
        if unknown:
            raise UnknownRecordId(f"labels name records outside the batch: {sorted(unknown)}")
        missing = batch_ids - set(labels)
        if missing:
            raise IncompleteBatch(f"labels missing for records: {sorted(missing)}")
        canonical: dict[str, str] = {}
        for record_id, label in labels.items():
            resolved = s.task.canonical_class(label)
            if resolved is None:
                raise InvalidClassLabel(f"label {label!r} for {record_id!r} is not a class")
            canonical[record_id] = resolved

        mismatches = mismatched_items(batch, canonical)
        few_shots = tuple(
            FewShotExample(
                record_id=item.record_id,
                text=item.text,
                wrong_model_label=item.model_label,
                correct_expert_label=canonical[item.record_id],
            )
            for item in mismatches
        )
        previous = s.current_prompt
        if few_shots:
            new_prompt = update_prompt(
                previous, few_shots, s.task, self.backend,
                templates=self.templates, clock=self.clock,
            )
            no_op = False
        else:
            # No corrective signal: record a no-op iteration with the same text.
            new_prompt = PromptVersion(
                version_index=previous.version_index + 1,
                text=previous.text,
                parent_version=previous.version_index,
                fewshot_ids=(),
                created_at=self.clock(),
            )
            no_op = True

        labeled = tuple(
            LabeledExample(
                record_id=item.record_id,
                expert_label=canonical[item.record_id],
                model_label_at_sampling=item.model_label,
                confidence_at_sampling=item.confidence,
                iteration_labeled=batch.iteration,
            )
            for item in batch.items
        )
        self._record(LabelsSubmitted(labeled=labeled, mismatch_ids=tuple(i.record_id for i in mismatches)))
        self._record(PromptAdvanced(prompt=new_prompt, no_op=no_op))
        return IterationOutcome(
            n_mismatches=len(few_shots),
            few_shots=few_shots,
            new_prompt=new_prompt,
            prompt_text_changed=new_prompt.text != previous.text,
        )

    def finalize(self) -> list[ClassificationOutcome | OutcomeError]:
        """Classify the whole corpus with the latest prompt. Idempotent once
        finalized; not allowed while a batch awaits labels."""
        s = self._session()
        if s.status is SessionStatus.AWAITING_LABELS:
            raise WrongState("cannot finalize while a batch awaits labels")
        if s.status is SessionStatus.FINALIZED:
            by_id: dict[str, ClassificationOutcome | OutcomeError] = {
                o.record_id: o for o in self.final_outcomes or ()
            }
            by_id.update({e.record_id: e for e in self.final_errors})
            return [by_id[r.record_id] for r in s.corpus.records if r.record_id in by_id]
        results = classify_all(
            list(s.corpus.records),
            s.current_prompt,
            s.task,
            self.backend,
            max_in_flight=self.max_in_flight,
            token_scope=self.token_scope,
        )
        outcomes = tuple(r for r in results if isinstance(r, ClassificationOutcome))
        errors = tuple(r for r in results if isinstance(r, OutcomeError))
        self._record(
            Finalized(
                prompt_version=s.current_prompt.version_index,
                outcomes=outcomes,
                errors=errors,
            )
        )
        return list(results)


def _replace(session: Session, **changes: object) -> Session:
    return replace(session, **changes)
