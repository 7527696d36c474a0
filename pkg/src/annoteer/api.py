"""HTTP facade over the engine for the labeling UI and programmatic clients.

One expert per session; a per-session guard serializes mutations while reads
stay lock-free against the last committed state. Long-running work (batch
builds, finalization) runs in a background thread behind a 202 + poll
contract.
"""

from __future__ import annotations

import difflib
import io
import json
import os
import threading
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from fastapi import Depends, FastAPI, Form, HTTPException, Request, UploadFile
from fastapi.responses import JSONResponse, PlainTextResponse, RedirectResponse
from fastapi.staticfiles import StaticFiles

from .domain import (
    ClassificationTask,
    DomainError,
    SamplingParams,
    SessionStatus,
    validate_corpus,
)
from .gateway import Backend, GatewayError
from .loop import (
    IncompleteBatch,
    InvalidClassLabel,
    LoopError,
    SessionEngine,
    UnknownRecordId,
    WrongState,
)
from .prompts import GenerationRejected, MetaPromptTemplates
from .stats import bias_slices, bootstrap_ci_pooled, evaluate_pairs, macro_metric
from .storage import (
    CONFIDENCE_FORMAT,
    EventLogWriter,
    StorageError,
    load_corpus_csv,
    read_event_log,
)

AUTH_TOKEN_ENV = "ANNOTEER_API_TOKEN"
LISTEN_ENV = "ANNOTEER_LISTEN"


@dataclass
class SessionHandle:
    engine: SessionEngine
    lock: threading.Lock = field(default_factory=threading.Lock)
    busy: Optional[str] = None  # "building_batch" | "finalizing" | None
    last_error: Optional[str] = None


class SessionRegistry:
    """In-process session map persisted through per-session event logs."""

    def __init__(self, data_dir: Path, backend: Backend, templates: MetaPromptTemplates | None):
        self.data_dir = data_dir
        self.backend = backend
        self.templates = templates
        self._sessions: dict[str, SessionHandle] = {}
        self._registry_lock = threading.Lock()

    def log_path(self, session_id: str) -> Path:
        return self.data_dir / f"{session_id}.jsonl"

    def add(self, engine: SessionEngine) -> SessionHandle:
        handle = SessionHandle(engine=engine)
        with self._registry_lock:
            self._sessions[engine.session.session_id] = handle
        return handle

    def get(self, session_id: str) -> SessionHandle:
        with self._registry_lock:
            handle = self._sessions.get(session_id)
        if handle is not None:
            return handle
        path = self.log_path(session_id)
        if not path.exists():
            raise HTTPException(status_code=404, detail=f"unknown session {session_id!r}")
        events = read_event_log(path)
        writer = EventLogWriter(path)
        engine = SessionEngine.from_events(
            events, self.backend, templates=self.templates, event_sink=writer.append
        )
        with self._registry_lock:
            if session_id in self._sessions:
                return self._sessions[session_id]
            handle = SessionHandle(engine=engine)
            self._sessions[session_id] = handle
        return handle


def _session_view(handle: SessionHandle) -> dict:
    engine = handle.engine
    session = engine.session
    batch = engine.pending_batch
    pending = None
    if batch is not None:
        groups: dict[str, list[dict]] = {}
        for item in batch.items:
            groups.setdefault(item.class_bucket, []).append(
                {
                    "record_id": item.record_id,
                    "text": item.text,
                    "model_label": item.model_label,
                    "confidence": item.confidence,
                }
            )
        pending = {
            "iteration": batch.iteration,
            "created_from_prompt": batch.created_from_prompt,
            "strategy": batch.strategy,
            "size": len(batch.items),
            "groups": [
                {"class_bucket": bucket, "items": items} for bucket, items in groups.items()
            ],
        }
    prompts = []
    previous_text = None
    for p in session.prompt_history:
        prompts.append(
            {
                "version_index": p.version_index,
                "created_at": p.created_at,
                "n_fewshots": len(p.fewshot_ids),
                "text_chars": len(p.text),
                "changed": previous_text is None or p.text != previous_text,
            }
        )
        previous_text = p.text
    return {
        "session_id": session.session_id,
        "status": session.status.value,
        "busy": handle.busy,
        "last_error": handle.last_error,
        "iteration": session.iteration,
        "labeled_count": len(session.labeled_data),
        "corpus_size": len(session.corpus),
        "classes": list(session.task.classes),
        "request": session.task.request,
        "sampling_params": {
            "sample_fraction": session.sampling_params.sample_fraction,
            "per_class_quota": session.sampling_params.per_class_quota,
            "strategy": session.sampling_params.strategy,
        },
        "pending_batch": pending,
        "prompts": prompts,
    }


def create_app(
    data_dir: str | Path = "annoteer-data",
    backend: Backend | None = None,
    templates: MetaPromptTemplates | None = None,
    auth_token: str | None = None,
    max_in_flight: int = 16,
    ui_dir: str | Path | None = None,
) -> FastAPI:
    """Build the application. backend serves every session; auth_token (or
    the ANNOTEER_API_TOKEN env var) switches on bearer-token auth."""
    if backend is None:
        raise ValueError("create_app needs a completion backend")
    data_path = Path(data_dir)
    data_path.mkdir(parents=True, exist_ok=True)
    registry = SessionRegistry(data_path, backend, templates)
    token = auth_token if auth_token is not None else os.environ.get(AUTH_TOKEN_ENV, "")

    async def require_auth(request: Request) -> None:
        if not token:
            return
        header = request.headers.get("Authorization", "")
        if header != f"Bearer {token}":
            raise HTTPException(status_code=401, detail="missing or invalid bearer token")

    app = FastAPI(title="annoteer", dependencies=[Depends(require_auth)])

    @app.exception_handler(LoopError)
    async def loop_error_handler(_request: Request, exc: LoopError) -> JSONResponse:
        if isinstance(exc, WrongState):
            return JSONResponse(status_code=409, content={"detail": str(exc)})
        if isinstance(exc, (UnknownRecordId, IncompleteBatch, InvalidClassLabel)):
            return JSONResponse(status_code=400, content={"detail": str(exc)})
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    @app.exception_handler(GatewayError)
    async def gateway_error_handler(_request: Request, exc: GatewayError) -> JSONResponse:
        return JSONResponse(status_code=502, content={"detail": str(exc)})

    @app.post("/sessions", status_code=201)
    async def create_session(
        corpus_file: UploadFile,
        task: str = Form(...),
        params: str = Form("{}"),
    ) -> dict:
        try:
            task_data = json.loads(task)
            params_data = json.loads(params)
        except ValueError as exc:
            raise HTTPException(status_code=400, detail=f"malformed JSON field: {exc}")
        text_column = params_data.get("text_column")
        if not text_column:
            raise HTTPException(status_code=400, detail="params.text_column is required")
        raw = await corpus_file.read()
        tmp_path = data_path / f"upload-{uuid.uuid4().hex}.csv"
        tmp_path.write_bytes(raw)
        try:
            corpus = load_corpus_csv(
                tmp_path,
                text_column,
                id_column=params_data.get("id_column"),
                metadata_columns=tuple(params_data.get("metadata_columns", ())),
            )
        except StorageError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        finally:
            tmp_path.unlink(missing_ok=True)
        report = validate_corpus(corpus)
        if not report.ok:
            raise HTTPException(
                status_code=400,
                detail={
                    "message": "corpus failed validation",
                    "violations": [
                        {"rule": v.rule, "record_id": v.record_id, "detail": v.detail}
                        for v in report.violations
                    ],
                },
            )
        try:
            task_obj = ClassificationTask(
                classes=tuple(task_data.get("classes", ())),
                request=task_data.get("request", ""),
            )
            sampling = SamplingParams(
                sample_fraction=float(params_data.get("sample_fraction", 0.10)),
                per_class_quota=int(params_data.get("per_class_quota", 10)),
                strategy=params_data.get("strategy", "lowest_confidence"),
            )
        except (DomainError, ValueError) as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        session_id = uuid.uuid4().hex[:12]
        writer = EventLogWriter(registry.log_path(session_id))
        try:
            engine = SessionEngine.start(
                corpus,
                task_obj,
                backend,
                rng_seed=int(params_data.get("rng_seed", 0)),
                sampling_params=sampling,
                session_id=session_id,
                templates=templates,
                event_sink=writer.append,
                max_in_flight=max_in_flight,
            )
        except (GatewayError, GenerationRejected) as exc:
            registry.log_path(session_id).unlink(missing_ok=True)
            raise HTTPException(status_code=502, detail=f"initial prompt generation failed: {exc}")
        except DomainError as exc:
            registry.log_path(session_id).unlink(missing_ok=True)
            raise HTTPException(status_code=400, detail=str(exc))
        registry.add(engine)
        return {
            "session_id": session_id,
            "prompt0_text": engine.session.current_prompt.text,
            "status": engine.session.status.value,
        }

    def _start_background(handle: SessionHandle, label: str, work) -> None:
        def runner() -> None:
            try:
                work()
                handle.last_error = None
            except GatewayError as exc:
                handle.last_error = f"gateway failure: {exc}"
            except (LoopError, GenerationRejected) as exc:
                handle.last_error = str(exc)
            except Exception as exc:  # keep the session usable after a crash
                handle.last_error = f"internal error: {exc}"
            finally:
                handle.busy = None
                handle.lock.release()

        handle.busy = label
        threading.Thread(target=runner, daemon=True).start()

    @app.post("/sessions/{session_id}/batches", status_code=202)
    async def build_batch(session_id: str) -> dict:
        handle = registry.get(session_id)
        if not handle.lock.acquire(blocking=False):
            raise HTTPException(status_code=409, detail="another operation is in progress")
        session = handle.engine.session
        if session.status is not SessionStatus.READY_TO_SAMPLE:
            handle.lock.release()
            raise HTTPException(
                status_code=409, detail=f"cannot build a batch while {session.status.value}"
            )
        _start_background(handle, "building_batch", handle.engine.build_sample_batch)
        return {"poll": f"/sessions/{session_id}/batches/current"}

    @app.get("/sessions/{session_id}/batches/current")
    async def current_batch(session_id: str) -> JSONResponse:
        handle = registry.get(session_id)
        if handle.busy == "building_batch":
            return JSONResponse(status_code=202, content={"building": True})
        if handle.last_error:
            return JSONResponse(status_code=502, content={"detail": handle.last_error})
        view = _session_view(handle)
        if view["pending_batch"] is None:
            raise HTTPException(status_code=404, detail="no batch is pending")
        return JSONResponse(status_code=200, content=view["pending_batch"])

    @app.post("/sessions/{session_id}/labels")
    async def submit_labels(session_id: str, body: dict) -> dict:
        handle = registry.get(session_id)
        labels = body.get("labels")
        if not isinstance(labels, dict):
            raise HTTPException(status_code=400, detail='body must be {"labels": {record_id: class}}')
        if not handle.lock.acquire(blocking=False):
            raise HTTPException(status_code=409, detail="another operation is in progress")
        try:
            previous_text = handle.engine.session.current_prompt.text
            outcome = handle.engine.submit_labels(labels)
        finally:
            handle.lock.release()
        diff = ""
        if outcome.prompt_text_changed:
            diff = "\n".join(
                difflib.unified_diff(
                    previous_text.splitlines(),
                    outcome.new_prompt.text.splitlines(),
                    fromfile=f"prompt-v{outcome.new_prompt.version_index - 1}",
                    tofile=f"prompt-v{outcome.new_prompt.version_index}",
                    lineterm="",
                )
            )
        return {
            "n_mismatches": outcome.n_mismatches,
            "new_prompt_version": outcome.new_prompt.version_index,
            "prompt_text_changed": outcome.prompt_text_changed,
            "diff": diff,
        }

    @app.post("/sessions/{session_id}/finalize", status_code=202)
    async def finalize(session_id: str) -> JSONResponse:
        handle = registry.get(session_id)
        if handle.engine.session.status is SessionStatus.FINALIZED:
            return JSONResponse(status_code=200, content={"status": "Finalized"})
        if not handle.lock.acquire(blocking=False):
            raise HTTPException(status_code=409, detail="another operation is in progress")
        session = handle.engine.session
        if session.status is SessionStatus.AWAITING_LABELS:
            handle.lock.release()
            raise HTTPException(status_code=409, detail="cannot finalize while a batch awaits labels")
        _start_background(handle, "finalizing", handle.engine.finalize)
        return JSONResponse(status_code=202, content={"poll": f"/sessions/{session_id}"})

    @app.get("/sessions/{session_id}")
    async def get_session(session_id: str) -> dict:
        return _session_view(registry.get(session_id))

    @app.get("/sessions/{session_id}/prompts")
    async def get_prompts(session_id: str) -> dict:
        handle = registry.get(session_id)
        return {
            "prompts": [
                {
                    "version_index": p.version_index,
                    "parent_version": p.parent_version,
                    "fewshot_ids": list(p.fewshot_ids),
                    "created_at": p.created_at,
                    "text": p.text,
                }
                for p in handle.engine.session.prompt_history
            ]
        }

    @app.get("/sessions/{session_id}/results")
    async def get_results(session_id: str, format: str = "json"):
        handle = registry.get(session_id)
        if handle.busy == "finalizing":
            return JSONResponse(status_code=202, content={"finalizing": True})
        if handle.engine.session.status is not SessionStatus.FINALIZED:
            raise HTTPException(status_code=409, detail="session is not finalized")
        outcomes = handle.engine.final_outcomes or ()
        version = handle.engine.session.current_prompt.version_index
        if format == "csv":
            out = io.StringIO()
            out.write("record_id,predicted_class,confidence,prompt_version\r\n")
            for o in outcomes:
                out.write(
                    f"{o.record_id},{o.predicted_class},"
                    f"{CONFIDENCE_FORMAT.format(o.confidence)},{version}\r\n"
                )
            return PlainTextResponse(out.getvalue(), media_type="text/csv")
        return {
            "prompt_version": version,
            "results": [
                {
                    "record_id": o.record_id,
                    "predicted_class": o.predicted_class,
                    "confidence": o.confidence,
                }
                for o in outcomes
            ],
            "errors": [
                {"record_id": e.record_id, "message": e.message}
                for e in handle.engine.final_errors
            ],
        }

    @app.post("/sessions/{session_id}/evaluate")
    async def evaluate(session_id: str, body: dict) -> dict:
        handle = registry.get(session_id)
        engine = handle.engine
        if engine.session.status is not SessionStatus.FINALIZED:
            raise HTTPException(status_code=409, detail="finalize the session before evaluating")
        truth = body.get("truth")
        if not isinstance(truth, dict) or not truth:
            raise HTTPException(status_code=400, detail='body must be {"truth": {record_id: class}}')
        session = engine.session
        known_ids = {r.record_id for r in session.corpus.records}
        unknown = sorted(set(truth) - known_ids)
        if unknown:
            raise HTTPException(status_code=400, detail=f"truth names unknown records: {unknown[:10]}")
        for record_id, label in truth.items():
            if session.task.canonical_class(str(label)) is None:
                raise HTTPException(
                    status_code=400, detail=f"truth label {label!r} for {record_id!r} is not a class"
                )
        labeled = session.labeled_ids()
        eligible = sorted(set(truth) - labeled)
        n_excluded = len(truth) - len(eligible)
        if not eligible:
            raise HTTPException(status_code=400, detail="no ground-truth records left after excluding expert-labeled ones")
        predictions = {o.record_id: o.predicted_class for o in engine.final_outcomes or ()}
        truths = [session.task.canonical_class(str(truth[i])) for i in eligible]
        preds = [predictions.get(i, "ERROR") for i in eligible]
        classes = session.task.classes
        report = evaluate_pairs(truths, preds, classes)
        cis = {
            name: bootstrap_ci_pooled(
                [(truths, preds)], macro_metric(classes, name), seed=session.rng_seed
            ).to_dict()
            for name in ("precision", "recall", "f1")
        }
        payload: dict = {
            "n_truth": len(truth),
            "n_excluded_labeled": n_excluded,
            "n_evaluated": len(eligible),
            "metrics": report.to_dict(),
            "macro_ci": cis,
        }
        slice_column = body.get("slice_column")
        if slice_column:
            by_id = session.corpus.by_id()
            groups = [by_id[i].metadata.get(slice_column) for i in eligible]
            payload["slices"] = {
                group: gr.to_dict()
                for group, gr in bias_slices(truths, preds, groups, classes).items()
            }
        return payload

    resolved_ui = Path(ui_dir) if ui_dir else Path(__file__).resolve().parents[2] / "frontend" / "dist"
    if resolved_ui.is_dir():
        app.mount("/ui", StaticFiles(directory=resolved_ui, html=True), name="ui")

        @app.get("/", include_in_schema=False)
        async def root() -> RedirectResponse:
            return RedirectResponse(url="/ui/")

    return app
