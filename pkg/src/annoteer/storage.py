"""Corpus ingestion, the append-only session event log, and results export.

The event log is the session's persistence AND its audit trail: one JSON
object per line, each wrapped in an envelope {"schema_version", "seq",
"type", "payload"}. Replaying the log reconstructs the exact session state.
"""

from __future__ import annotations

import csv
import json
import threading
from dataclasses import asdict
from pathlib import Path
from typing import Iterable, Sequence

from .classify import OutcomeError, compute_confidence
from .domain import (
    ClassificationOutcome,
    ClassificationTask,
    Corpus,
    LabeledExample,
    PromptVersion,
    Record,
    SamplingParams,
)
from .loop import (
    BatchBuilt,
    Event,
    Finalized,
    LabelsSubmitted,
    PromptAdvanced,
    SampleBatch,
    SampleItem,
    SessionStarted,
    SubsampleResult,
)

SCHEMA_VERSION = 1

# Confidence cells are exported at 17 significant digits so the float value
# round-trips exactly.
CONFIDENCE_FORMAT = "{:.16e}"


class StorageError(Exception):
    pass


class MissingColumn(StorageError):
    pass


class EmptyFile(StorageError):
    pass


class DuplicateId(StorageError):
    pass


class RowParseError(StorageError):
    pass


class CorruptLog(StorageError):
    def __init__(self, message: str, line_number: int, salvage: list[Event]):
        super().__init__(message)
        self.line_number = line_number
        self.salvage = salvage


class VersionMismatch(StorageError):
    pass


class IoError(StorageError):
    pass


# --- corpus CSV -----------------------------------------------------------------


def load_corpus_csv(
    path: str | Path,
    text_column: str,
    id_column: str | None = None,
    metadata_columns: Sequence[str] = (),
) -> Corpus:
    """Load one Record per CSV row (RFC 4180, header row required).

    Ids come from id_column when given, else synthesized as zero-padded row
    ordinals ("r000001") for stable joins across sessions. Metadata columns
    are copied verbatim. Any malformed row aborts the load with its row
    number.
    """
    path = Path(path)
    try:
        handle = path.open("r", encoding="utf-8", newline="")
    except OSError as exc:
        raise IoError(f"cannot open {path}: {exc}") from exc
    with handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames is None:
            raise EmptyFile(f"{path} has no header row")
        header = list(reader.fieldnames)
        for needed in [text_column, *([id_column] if id_column else []), *metadata_columns]:
            if needed not in header:
                raise MissingColumn(f"column {needed!r} not in header {header}")
        records: list[Record] = []
        seen_ids: dict[str, int] = {}
        for row_number, row in enumerate(reader, start=2):
            try:
                text = row[text_column]
            except KeyError:
                raise RowParseError(f"row {row_number}: missing cell for {text_column!r}")
            if text is None or not text.strip():
                raise RowParseError(f"row {row_number}: empty text in {text_column!r}")
            if id_column:
                record_id = (row.get(id_column) or "").strip()
                if not record_id:
                    raise RowParseError(f"row {row_number}: empty id in {id_column!r}")
            else:
                record_id = f"r{row_number - 1:06d}"
            if record_id in seen_ids:
                raise DuplicateId(
                    f"id {record_id!r} appears in rows {seen_ids[record_id]} and {row_number}"
                )
            seen_ids[record_id] = row_number
            metadata = {col: (row.get(col) or "") for col in metadata_columns}
            records.append(Record(record_id=record_id, text=text, metadata=metadata))
    if not records:
        raise EmptyFile(f"{path} has a header but no data rows")
    return Corpus(records=tuple(records), source_name=path.name)


# --- event (de)serialization ------------------------------------------------------


def _record_to_dict(record: Record) -> dict:
    return {"record_id": record.record_id, "text": record.text, "metadata": dict(record.metadata)}


def _record_from_dict(data: dict) -> Record:
    return Record(
        record_id=data["record_id"], text=data["text"], metadata=dict(data.get("metadata", {}))
    )


def _prompt_to_dict(prompt: PromptVersion) -> dict:
    return {
        "version_index": prompt.version_index,
        "text": prompt.text,
        "parent_version": prompt.parent_version,
        "fewshot_ids": list(prompt.fewshot_ids),
        "created_at": prompt.created_at,
    }


def _prompt_from_dict(data: dict) -> PromptVersion:
    return PromptVersion(
        version_index=data["version_index"],
        text=data["text"],
        parent_version=data["parent_version"],
        fewshot_ids=tuple(data["fewshot_ids"]),
        created_at=data["created_at"],
    )


def _outcome_to_dict(outcome: ClassificationOutcome) -> dict:
    return {
        "record_id": outcome.record_id,
        "predicted_class": outcome.predicted_class,
        "token_logprobs": list(outcome.token_logprobs),
        "confidence": outcome.confidence,
        "raw_completion": outcome.raw_completion,
    }


def _outcome_from_dict(data: dict) -> ClassificationOutcome:
    return ClassificationOutcome(
        record_id=data["record_id"],
        predicted_class=data["predicted_class"],
        token_logprobs=tuple(data["token_logprobs"]),
        confidence=data["confidence"],
        raw_completion=data["raw_completion"],
    )


def event_to_dict(event: Event) -> dict:
    if isinstance(event, SessionStarted):
        return {
            "session_id": event.session_id,
            "corpus": {
                "source_name": event.corpus.source_name,
                "records": [_record_to_dict(r) for r in event.corpus.records],
            },
            "task": {"classes": list(event.task.classes), "request": event.task.request},
            "sampling_params": asdict(event.sampling_params),
            "rng_seed": event.rng_seed,
            "created_at": event.created_at,
        }
    if isinstance(event, PromptAdvanced):
        return {"prompt": _prompt_to_dict(event.prompt), "no_op": event.no_op}
    if isinstance(event, BatchBuilt):
        return {
            "batch": {
                "iteration": event.batch.iteration,
                "created_from_prompt": event.batch.created_from_prompt,
                "strategy": event.batch.strategy,
                "items": [asdict(item) for item in event.batch.items],
            },
            "draw_index": event.draw_index,
            "subsample": [asdict(s) for s in event.subsample],
            "n_errors": event.n_errors,
            "warnings": list(event.warnings),
        }
    if isinstance(event, LabelsSubmitted):
        return {
            "labeled": [asdict(ex) for ex in event.labeled],
            "mismatch_ids": list(event.mismatch_ids),
        }
    if isinstance(event, Finalized):
        return {
            "prompt_version": event.prompt_version,
            "outcomes": [_outcome_to_dict(o) for o in event.outcomes],
            "errors": [asdict(e) for e in event.errors],
        }
    raise TypeError(f"unknown event type {type(event).__name__}")


def event_from_dict(kind: str, payload: dict) -> Event:
    if kind == "SessionStarted":
        return SessionStarted(
            session_id=payload["session_id"],
            corpus=Corpus(
                records=tuple(_record_from_dict(r) for r in payload["corpus"]["records"]),
                source_name=payload["corpus"]["source_name"],
            ),
            task=ClassificationTask(
                classes=tuple(payload["task"]["classes"]), request=payload["task"]["request"]
            ),
            sampling_params=SamplingParams(**payload["sampling_params"]),
            rng_seed=payload["rng_seed"],
            created_at=payload["created_at"],
        )
    if kind == "PromptAdvanced":
        return PromptAdvanced(prompt=_prompt_from_dict(payload["prompt"]), no_op=payload["no_op"])
    if kind == "BatchBuilt":
        raw = payload["batch"]
        return BatchBuilt(
            batch=SampleBatch(
                iteration=raw["iteration"],
                created_from_prompt=raw["created_from_prompt"],
                strategy=raw.get("strategy", "lowest_confidence"),
                items=tuple(SampleItem(**item) for item in raw["items"]),
            ),
            draw_index=payload["draw_index"],
            subsample=tuple(SubsampleResult(**s) for s in payload["subsample"]),
            n_errors=payload["n_errors"],
            warnings=tuple(payload["warnings"]),
        )
    if kind == "LabelsSubmitted":
        return LabelsSubmitted(
            labeled=tuple(LabeledExample(**ex) for ex in payload["labeled"]),
            mismatch_ids=tuple(payload["mismatch_ids"]),
        )
    if kind == "Finalized":
        return Finalized(
            prompt_version=payload["prompt_version"],
            outcomes=tuple(_outcome_from_dict(o) for o in payload["outcomes"]),
            errors=tuple(OutcomeError(**e) for e in payload["errors"]),
        )
    raise VersionMismatch(f"unknown event type {kind!r} in log")


# --- event log files ---------------------------------------------------------------


def event_line(event: Event, seq: int) -> str:
    envelope = {
        "schema_version": SCHEMA_VERSION,
        "seq": seq,
        "type": event.kind,
        "payload": event_to_dict(event),
    }
    return json.dumps(envelope, ensure_ascii=False, sort_keys=True)


class EventLogWriter:
    """Append-only JSONL writer; flushes per event so readers can tail
    completed lines while a session is live."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._seq = 0
        self._lock = threading.Lock()
        if self.path.exists():
            with self.path.open("r", encoding="utf-8") as handle:
                self._seq = sum(1 for line in handle if line.strip())

    def append(self, event: Event) -> None:
        with self._lock:
            line = event_line(event, self._seq)
            with self.path.open("a", encoding="utf-8") as handle:
                handle.write(line + "\n")
            self._seq += 1


def write_event_log(events: Iterable[Event], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        for seq, event in enumerate(events):
            handle.write(event_line(event, seq) + "\n")


def read_event_log(path: str | Path, salvage: bool = False) -> list[Event]:
    """Parse the JSONL event log back into events.

    A malformed line raises CorruptLog naming the first bad line; in salvage
    mode the events before it are returned instead.
    """
    path = Path(path)
    events: list[Event] = []
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    for line_number, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            envelope = json.loads(line)
            version = envelope["schema_version"]
            if version != SCHEMA_VERSION:
                raise VersionMismatch(
                    f"log schema version {version} unsupported (expected {SCHEMA_VERSION})"
                )
            events.append(event_from_dict(envelope["type"], envelope["payload"]))
        except VersionMismatch:
            raise
        except (ValueError, KeyError, TypeError) as exc:
            if salvage:
                return events
            raise CorruptLog(
                f"line {line_number}: {exc}", line_number=line_number, salvage=events
            ) from exc
    return events


# --- results export ------------------------------------------------------------------


def export_results(
    outcomes: Sequence[ClassificationOutcome],
    labeled_data: Sequence[LabeledExample],
    prompt_history: Sequence[PromptVersion],
    out_dir: str | Path,
    prompt_version: int | None = None,
) -> dict[str, Path]:
    """Write the finalized classification, the prompt lineage, and the
    expert's labels. Re-export produces identical bytes; every confidence is
    re-verified against its stored token logprobs before writing."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {out_dir}: {exc}") from exc
    version = prompt_version if prompt_version is not None else (
        prompt_history[-1].version_index if prompt_history else 0
    )

    results_path = out_dir / "results.csv"
    prompts_path = out_dir / "prompts.json"
    labels_path = out_dir / "labels.csv"
    try:
        with results_path.open("w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["record_id", "predicted_class", "confidence", "prompt_version"])
            for outcome in outcomes:
                if outcome.token_logprobs:
                    recomputed = compute_confidence(outcome.token_logprobs)
                    if abs(recomputed - outcome.confidence) > 1e-12:
                        raise StorageError(
                            f"confidence for {outcome.record_id!r} does not match its "
                            f"token logprobs ({outcome.confidence} vs {recomputed})"
                        )
                writer.writerow(
                    [
                        outcome.record_id,
                        outcome.predicted_class,
                        CONFIDENCE_FORMAT.format(outcome.confidence),
                        version,
                    ]
                )
        with prompts_path.open("w", encoding="utf-8") as handle:
            json.dump(
                [_prompt_to_dict(p) for p in prompt_history],
                handle,
                indent=2,
                ensure_ascii=False,
                sort_keys=True,
            )
            handle.write("\n")
        with labels_path.open("w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(
                [
                    "record_id",
                    "expert_label",
                    "model_label_at_sampling",
                    "confidence_at_sampling",
                    "iteration_labeled",
                ]
            )
            for ex in labeled_data:
                writer.writerow(
                    [
                        ex.record_id,
                        ex.expert_label,
                        ex.model_label_at_sampling,
                        CONFIDENCE_FORMAT.format(ex.confidence_at_sampling),
                        ex.iteration_labeled,
                    ]
                )
    except OSError as exc:
        raise IoError(f"export failed: {exc}") from exc
    return {"results": results_path, "prompts": prompts_path, "labels": labels_path}


# --- session save/load -----------------------------------------------------------------


def save_session(engine, path: str | Path) -> None:
    """Write the engine's full event history as a fresh log file."""
    write_event_log(engine.events, path)


def load_session(path: str | Path, backend, templates=None, clock=None, event_sink=None, **kwargs):
    """Replay an event log into a live SessionEngine."""
    from .loop import SessionEngine, _now_iso

    events = read_event_log(path)
    if not events:
        raise CorruptLog("log is empty", line_number=0, salvage=[])
    return SessionEngine.from_events(
        events,
        backend,
        templates=templates,
        clock=clock or _now_iso,
        event_sink=event_sink,
        **kwargs,
    )
