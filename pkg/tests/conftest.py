"""Shared fixtures and scripted-backend helpers."""

from __future__ import annotations

import math

import pytest

from annoteer.domain import ClassificationTask, Corpus, Record
from annoteer.gateway import MockBackend, MockScript, ScriptedAnswer, text_key

HELMET_CLASSES = ("Helmet", "No Helmet", "Not mentioned")


def make_corpus(n: int = 10, prefix: str = "n", text_fn=None) -> Corpus:
    records = []
    for i in range(n):
        text = text_fn(i) if text_fn else f"Patient {i} fell off a scooter near the park entrance."
        records.append(Record(record_id=f"{prefix}{i}", text=text, metadata={}))
    return Corpus(records=tuple(records), source_name="test")


def meta_prompt_for(classes=HELMET_CLASSES) -> str:
    lines = ["You extract helmet status from one narrative at a time."]
    lines += [f"- {c}" for c in classes]
    lines += ["Think step by step, then finish with:", "ANSWER: <class>"]
    return "\n".join(lines)


def script_for(
    corpus: Corpus,
    labels: dict[str, str],
    logprobs: dict[str, tuple[float, ...]] | None = None,
    classes=HELMET_CLASSES,
    meta_responses: list[str] | None = None,
    completions: dict[str, str] | None = None,
) -> MockScript:
    """Script a mock so each corpus record answers with its assigned label."""
    logprobs = logprobs or {}
    completions = completions or {}
    answers = {}
    for record in corpus.records:
        rid = record.record_id
        if rid not in labels and rid not in completions:
            continue
        answers[text_key(record.text)] = ScriptedAnswer(
            label=labels.get(rid),
            logprobs=tuple(logprobs.get(rid, (math.log(0.9),))),
            text=completions.get(rid),
        )
    if meta_responses is None:
        base = meta_prompt_for(classes)
        meta_responses = [base] + [f"{base}\nRevision {i}." for i in range(1, 8)]
    return MockScript(answers=answers, meta_responses=meta_responses, classes=tuple(classes))


class RecordingBackend:
    """Wraps a backend and keeps every request for assertions."""

    def __init__(self, inner):
        self.inner = inner
        self.requests = []

    def capabilities(self):
        return self.inner.capabilities()

    def complete(self, request):
        self.requests.append(request)
        return self.inner.complete(request)


@pytest.fixture
def helmet_task() -> ClassificationTask:
    return ClassificationTask(classes=HELMET_CLASSES, request="Extract helmet usage status.")
