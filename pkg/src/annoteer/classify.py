"""Classify record sets with a prompt version, in parallel, deriving a
geometric-mean confidence from completion token log-probabilities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from .domain import ClassificationOutcome, ClassificationTask, PARSE_FAILURE, PromptVersion, Record
from .gateway import (
    Backend,
    BatchFailure,
    CompletionRequest,
    CompletionResponse,
    DEFAULT_RETRY,
    RetryPolicy,
    complete_batch,
)
from .prompts import parse_answer, render_classification_messages

DEFAULT_MAX_IN_FLIGHT = 16

REPAIR_SUFFIX = (
    "\n\nYour previous reply could not be parsed. Classify the record above "
    "again and respond with nothing but the single final line, exactly:\n"
    "ANSWER: <class>"
)


class EmptyLogprobsError(ValueError):
    """Confidence needs at least one token logprob."""


class NonFiniteLogprobError(ValueError):
    """Token logprobs must be finite."""


@dataclass(frozen=True)
class OutcomeError:
    """Per-record marker for a classification that failed at the gateway."""

    record_id: str
    message: str


def compute_confidence(token_logprobs: Sequence[float]) -> float:
    """exp of the mean token log-probability: the geometric mean of the
    per-token probabilities, in (0, 1]."""
    if len(token_logprobs) == 0:
        raise EmptyLogprobsError("token_logprobs is empty")
    total = 0.0
    for lp in token_logprobs:
        if not math.isfinite(lp):
            raise NonFiniteLogprobError(f"non-finite logprob {lp!r}")
        if lp > 0.0:
            raise ValueError(f"logprob {lp!r} is positive; log-probabilities are <= 0")
        total += lp
    return math.exp(total / len(token_logprobs))


def _scope_logprobs(response: CompletionResponse, token_scope: str) -> tuple[float, ...]:
    """Select which completion tokens feed the confidence.

    "completion" uses every token. "answer_line" keeps the trailing tokens
    that make up the final non-empty line, when the backend reported token
    texts; otherwise it falls back to the full completion.
    """
    logprobs = response.token_logprobs or ()
    if token_scope == "completion" or response.token_texts is None:
        return tuple(logprobs)
    if token_scope != "answer_line":
        raise ValueError(f"unknown token_scope {token_scope!r}")
    texts = response.token_texts
    full = "".join(texts)
    stripped = full.rstrip()
    if not stripped:
        return tuple(logprobs)
    line_start = stripped.rfind("\n") + 1
    need = len(full) - line_start
    covered = 0
    k = 0
    while k < len(texts) and covered < need:
        k += 1
        covered += len(texts[len(texts) - k])
    if k == 0:
        return tuple(logprobs)
    return tuple(logprobs[len(logprobs) - k :])


def classify_all(
    records: Sequence[Record],
    prompt: PromptVersion,
    task: ClassificationTask,
    backend: Backend,
    max_in_flight: int = DEFAULT_MAX_IN_FLIGHT,
    retry: RetryPolicy = DEFAULT_RETRY,
    token_scope: str = "completion",
) -> list[ClassificationOutcome | OutcomeError]:
    """Classify every record with the given prompt, order-aligned with input.

    A record whose completion cannot be parsed gets one automatic repair
    retry asking for just the ANSWER line; if that also fails to parse, the
    outcome is PARSE_FAILURE with the retry's confidence. Gateway failures
    surface as per-record OutcomeError markers; the operation never aborts
    wholesale.
    """
    if not records:
        raise ValueError("records must be non-empty")
    requests = [render_classification_messages(prompt, r) for r in records]
    responses = complete_batch(backend, requests, max_in_flight=max_in_flight, retry=retry)

    results: list[ClassificationOutcome | OutcomeError | None] = [None] * len(records)
    repair_indices: list[int] = []
    repair_requests: list[CompletionRequest] = []

    for i, (record, response) in enumerate(zip(records, responses)):
        if isinstance(response, BatchFailure):
            results[i] = OutcomeError(
                record_id=record.record_id,
                message=f"{type(response.error).__name__}: {response.error} "
                f"(after {response.attempts} attempts)",
            )
            continue
        predicted = parse_answer(response.text, task)
        if predicted == PARSE_FAILURE:
            repair_indices.append(i)
            repair_requests.append(
                CompletionRequest(
                    system_text=requests[i].system_text,
                    user_text=record.text + REPAIR_SUFFIX,
                    temperature=requests[i].temperature,
                    top_p=requests[i].top_p,
                    want_logprobs=True,
                    max_tokens=requests[i].max_tokens,
                )
            )
            continue
        results[i] = _outcome(record, predicted, response, token_scope)

    if repair_requests:
        repair_responses = complete_batch(
            backend, repair_requests, max_in_flight=max_in_flight, retry=retry
        )
        for i, response in zip(repair_indices, repair_responses):
            record = records[i]
            if isinstance(response, BatchFailure):
                results[i] = OutcomeError(
                    record_id=record.record_id,
                    message=f"repair retry failed: {type(response.error).__name__}: "
                    f"{response.error}",
                )
                continue
            predicted = parse_answer(response.text, task)
            results[i] = _outcome(record, predicted, response, token_scope)

    final: list[ClassificationOutcome | OutcomeError] = []
    for r in results:
        assert r is not None, "every slot must be resolved"
        final.append(r)
    return final


def _outcome(
    record: Record,
    predicted: str,
    response: CompletionResponse,
    token_scope: str,
) -> ClassificationOutcome | OutcomeError:
    logprobs = _scope_logprobs(response, token_scope)
    if not logprobs:
        return OutcomeError(record_id=record.record_id, message="completion has no token logprobs")
    try:
        confidence = compute_confidence(logprobs)
    except ValueError as exc:
        return OutcomeError(record_id=record.record_id, message=str(exc))
    return ClassificationOutcome(
        record_id=record.record_id,
        predicted_class=predicted,
        token_logprobs=logprobs,
        confidence=confidence,
        raw_completion=response.text,
    )
