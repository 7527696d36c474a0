"""Prompt lifecycle: generate the first classification prompt, refine it from
expert-corrected mistakes, render per-record classification requests, and
parse model answers back into classes.
"""

from __future__ import annotations

import hashlib
import random
import re
from dataclasses import dataclass
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path
from typing import Callable, Sequence

from .domain import (
    ClassificationTask,
    Corpus,
    DomainError,
    PARSE_FAILURE,
    PromptVersion,
    Record,
)
from .gateway import (
    Backend,
    CompletionRequest,
    DEFAULT_CLASSIFY_MAX_TOKENS,
    DEFAULT_META_MAX_TOKENS,
    complete_with_retry,
)

META_SYSTEM_TEXT = "You write and refine prompts for language models. Follow the instructions exactly."

INITIAL_SAMPLE_SIZE = 5
FEWSHOT_TRUNCATE_CHARS = 1500
TRUNCATION_MARKER = " [...truncated]"

ANSWER_LINE_RE = re.compile(r"^\s*answer\s*:\s*(.*?)\s*$", re.IGNORECASE)


class GenerationRejected(Exception):
    """The meta-call's response failed the structural check."""


@dataclass(frozen=True)
class FewShotExample:
    """A record the prompt got wrong relative to the expert."""

    record_id: str
    text: str
    wrong_model_label: str
    correct_expert_label: str

    def __post_init__(self) -> None:
        if self.wrong_model_label == self.correct_expert_label:
            raise DomainError(
                f"few-shot for {self.record_id!r} has matching labels; it only "
                "exists because model and expert disagreed"
            )


@dataclass(frozen=True)
class MetaPromptTemplates:
    """The two meta-prompt templates, with {{slot}} placeholders.

    initial_generation expects slots {classes, request, corpus_sample};
    update expects {previous_prompt, fewshot_block}. Each slot must appear
    exactly once.
    """

    initial_generation: str
    update: str

    def __post_init__(self) -> None:
        _check_slots(self.initial_generation, ("classes", "request", "corpus_sample"), "initial")
        _check_slots(self.update, ("previous_prompt", "fewshot_block"), "update")

    @classmethod
    def builtin(cls) -> "MetaPromptTemplates":
        pkg = resources.files("annoteer.templates")
        return cls(
            initial_generation=(pkg / "initial_prompt.txt").read_text(encoding="utf-8"),
            update=(pkg / "update_prompt.txt").read_text(encoding="utf-8"),
        )

    @classmethod
    def from_files(cls, initial_path: str | Path, update_path: str | Path) -> "MetaPromptTemplates":
        return cls(
            initial_generation=Path(initial_path).read_text(encoding="utf-8"),
            update=Path(update_path).read_text(encoding="utf-8"),
        )


def _check_slots(template: str, slots: Sequence[str], name: str) -> None:
    for slot in slots:
        n = template.count("{{" + slot + "}}")
        if n != 1:
            raise DomainError(
                f"{name} template must contain {{{{{slot}}}}} exactly once, found {n}"
            )


def _fill(template: str, values: dict[str, str]) -> str:
    out = template
    for slot, value in values.items():
        out = out.replace("{{" + slot + "}}", value)
    return out


def _structural_check(prompt_text: str, task: ClassificationTask) -> None:
    """Generated prompts must mention every class name and the answer-line cue."""
    if not prompt_text.strip():
        raise GenerationRejected("generated prompt is empty")
    lowered = prompt_text.lower()
    for name in task.classes:
        if name.lower() not in lowered:
            raise GenerationRejected(f"generated prompt does not mention class {name!r}")
    if "answer:" not in lowered:
        raise GenerationRejected("generated prompt does not require the ANSWER line")


def _now_iso() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _seed_from(*parts: object) -> int:
    blob = "|".join(str(p) for p in parts).encode("utf-8")
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "big")


def sample_for_initial_prompt(corpus: Corpus, rng_seed: int, k: int = INITIAL_SAMPLE_SIZE) -> list[Record]:
    """Seeded sample of corpus records embedded in the initial meta-call."""
    rng = random.Random(_seed_from(rng_seed, "initial-prompt-sample"))
    k = min(k, len(corpus.records))
    return rng.sample(list(corpus.records), k)


def generate_initial_prompt(
    task: ClassificationTask,
    corpus: Corpus,
    backend: Backend,
    rng_seed: int,
    templates: MetaPromptTemplates | None = None,
    clock: Callable[[], str] = _now_iso,
) -> PromptVersion:
    """Create prompt version 0 through a meta-call that sees the task request,
    the class list, and a seeded sample of corpus texts."""
    if not corpus.records:
        raise DomainError("cannot generate an initial prompt for an empty corpus")
    templates = templates or MetaPromptTemplates.builtin()
    sampled = sample_for_initial_prompt(corpus, rng_seed)
    corpus_sample = "\n\n".join(
        f"Example record {i + 1}:\n{_truncate(r.text)}" for i, r in enumerate(sampled)
    )
    user_text = _fill(
        templates.initial_generation,
        {
            "classes": "\n".join(f"- {c}" for c in task.classes),
            "request": task.request,
            "corpus_sample": corpus_sample,
        },
    )
    response = complete_with_retry(
        backend,
        CompletionRequest(
            system_text=META_SYSTEM_TEXT,
            user_text=user_text,
            want_logprobs=False,
            max_tokens=DEFAULT_META_MAX_TOKENS,
        ),
    )
    _structural_check(response.text, task)
    return PromptVersion(
        version_index=0,
        text=response.text.strip(),
        parent_version=None,
        fewshot_ids=(),
        created_at=clock(),
    )


def render_fewshot_block(few_shots: Sequence[FewShotExample]) -> str:
    parts = []
    for i, shot in enumerate(few_shots):
        parts.append(
            f"Record {i + 1}:\n"
            f"{_truncate(shot.text)}\n"
            f"Model's (incorrect) label: {shot.wrong_model_label}\n"
            f"Expert's correct label: {shot.correct_expert_label}"
        )
    return "\n\n".join(parts)


def _truncate(text: str) -> str:
    if len(text) > FEWSHOT_TRUNCATE_CHARS:
        return text[:FEWSHOT_TRUNCATE_CHARS] + TRUNCATION_MARKER
    return text


def update_prompt(
    previous: PromptVersion,
    few_shots: Sequence[FewShotExample],
    task: ClassificationTask,
    backend: Backend,
    templates: MetaPromptTemplates | None = None,
    clock: Callable[[], str] = _now_iso,
) -> PromptVersion:
    """Refine the previous prompt from this iteration's expert mismatches.

    Callers skip the meta-call entirely when few_shots is empty (a no-op
    iteration keeps the previous text); calling this with none is an error.
    """
    if not few_shots:
        raise DomainError("update_prompt requires at least one few-shot example")
    templates = templates or MetaPromptTemplates.builtin()
    user_text = _fill(
        templates.update,
        {
            "previous_prompt": previous.text,
            "fewshot_block": render_fewshot_block(few_shots),
        },
    )
    response = complete_with_retry(
        backend,
        CompletionRequest(
            system_text=META_SYSTEM_TEXT,
            user_text=user_text,
            want_logprobs=False,
            max_tokens=DEFAULT_META_MAX_TOKENS,
        ),
    )
    _structural_check(response.text, task)
    return PromptVersion(
        version_index=previous.version_index + 1,
        text=response.text.strip(),
        parent_version=previous.version_index,
        fewshot_ids=tuple(shot.record_id for shot in few_shots),
        created_at=clock(),
    )


def render_classification_messages(prompt: PromptVersion, record: Record) -> CompletionRequest:
    """The per-record classification call: prompt as system, record text
    verbatim as user, deterministic decoding, logprobs on."""
    return CompletionRequest(
        system_text=prompt.text,
        user_text=record.text,
        temperature=0.0,
        top_p=1.0,
        want_logprobs=True,
        max_tokens=DEFAULT_CLASSIFY_MAX_TOKENS,
    )


def parse_answer(completion_text: str, task: ClassificationTask) -> str:
    """Extract the predicted class from a completion.

    The last line of the form "ANSWER: <x>" wins; <x> must equal a class name
    (case-insensitive, trimmed) as a whole field, so a class that is a
    substring of another can never be misparsed. Without any ANSWER line, a
    whole-text search succeeds only if exactly one class name appears.
    """
    answer_payload: str | None = None
    for line in completion_text.splitlines():
        match = ANSWER_LINE_RE.match(line)
        if match:
            answer_payload = match.group(1)
    if answer_payload is not None:
        canonical = task.canonical_class(answer_payload)
        return canonical if canonical is not None else PARSE_FAILURE

    lowered = completion_text.lower()
    found = [c for c in task.classes if c.lower() in lowered]
    if len(found) == 1:
        return found[0]
    return PARSE_FAILURE
