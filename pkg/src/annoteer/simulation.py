"""A self-contained synthetic world for offline experiments: a generated
corpus with latent per-record difficulty, plus a deterministic backend whose
error rate falls as expert-corrected examples from the same difficulty
cluster accumulate in the prompt.

Records live in clusters that share a difficulty level. The backend's
confidence for a record is 1 - difficulty + noise, and its error probability
shrinks geometrically with the number of corrected examples from the
record's cluster. Selecting low-confidence records therefore concentrates
expert effort on the clusters carrying the most error mass, which is exactly
the signal uncertainty-based sampling is supposed to exploit.

Prompts produced by the simulated meta-calls carry the learned record set in
an "[adapted:...]" marker line, so a prompt version fully determines the
backend's behavior and identical requests always get identical responses.
"""

from __future__ import annotations

import hashlib
import json
import math
import random
import re
from dataclasses import dataclass
from pathlib import Path

from .domain import Corpus, Record
from .gateway import BackendCapabilities, CompletionRequest, CompletionResponse, GatewayError, Usage

ADAPTED_RE = re.compile(r"\[adapted:([0-9,]*)\]")
REPORT_TAG_RE = re.compile(r"Report (\d{5}):")

SCENARIOS = (
    "a fall from a standing scooter on a wet ramp",
    "a collision at a crossing during the evening commute",
    "a swerve to avoid a pedestrian near the market",
    "losing balance on gravel at the trail entrance",
    "clipping a curb while turning onto the main road",
    "a sudden stop when the front wheel locked",
    "being knocked over by an opening car door",
    "sliding out on a painted lane marking in the rain",
)

DETAILS = (
    "complained of wrist pain and swelling",
    "presented with abrasions to the left knee",
    "reported brief dizziness but no loss of consciousness",
    "had a laceration above the eyebrow",
    "arrived with shoulder tenderness and bruising",
    "described neck stiffness since the incident",
)

SEXES = ("Male", "Female")
RACES = ("White", "Black/African American", "Asian", "Other", "Not Specified")


def _rng_for(*parts: object) -> random.Random:
    blob = "|".join(str(p) for p in parts).encode("utf-8")
    return random.Random(int.from_bytes(hashlib.sha256(blob).digest()[:8], "big"))


@dataclass(frozen=True)
class SimSpec:
    """Parameters of the synthetic world.

    Classes are imbalanced (each class is half as common as the previous
    one) and difficulty rises with class rarity, so the rare classes carry
    most of the error mass, the way a hard minority class does in real
    corpora. Within a class, records fall into clusters_per_class subgroups;
    base_error scales a record's error probability at difficulty 1 with no
    corrections, and adapt_factor is the multiplicative drop per corrected
    example from the same subgroup. noise_sd blurs the confidence signal.
    """

    n_records: int = 400
    n_classes: int = 3
    clusters_per_class: int = 4
    seed: int = 0
    base_error: float = 0.9
    adapt_factor: float = 0.35
    noise_sd: float = 0.05
    class_names: tuple[str, ...] = ()

    def resolved_class_names(self) -> tuple[str, ...]:
        if self.class_names:
            return self.class_names
        return tuple(f"Category {i + 1}" for i in range(self.n_classes))

    @classmethod
    def parse(cls, text: str) -> "SimSpec":
        """Parse a spec string like "n=400,classes=3,clusters=4,seed=5"."""
        if text.endswith(".json"):
            data = json.loads(Path(text).read_text(encoding="utf-8"))
            return cls(**data)
        keys = {
            "n": "n_records",
            "classes": "n_classes",
            "clusters": "clusters_per_class",
            "seed": "seed",
            "base_error": "base_error",
            "adapt": "adapt_factor",
            "noise": "noise_sd",
        }
        kwargs: dict = {}
        for part in filter(None, (p.strip() for p in text.split(","))):
            key, _, value = part.partition("=")
            if key not in keys:
                raise ValueError(f"unknown simulation parameter {key!r}")
            name = keys[key]
            kwargs[name] = float(value) if name in ("base_error", "adapt_factor", "noise_sd") else int(value)
        return cls(**kwargs)


@dataclass(frozen=True)
class SimRecord:
    index: int
    record_id: str
    text: str
    truth: str
    wrong_label: str
    cluster: int
    difficulty: float
    confidence: float
    error_threshold: float
    n_tokens: int


class SimWorld:
    """The generated corpus, its ground truth, and the simulated backend."""

    def __init__(self, spec: SimSpec):
        self.spec = spec
        self.classes = spec.resolved_class_names()
        if len(self.classes) < 2:
            raise ValueError("simulation needs at least 2 classes")
        n_classes = len(self.classes)
        per_class = max(1, spec.clusters_per_class)
        # Each class is half as common as the previous and harder: rare
        # classes carry most of the error mass.
        class_weights = [2 ** (n_classes - 1 - j) for j in range(n_classes)]
        class_difficulty = [
            0.12 + 0.68 * (j / (n_classes - 1)) if n_classes > 1 else 0.5
            for j in range(n_classes)
        ]
        subgroup_rng = _rng_for(spec.seed, "subgroups")
        subgroup_difficulty = {
            (j, g): min(0.97, max(0.03, class_difficulty[j] + subgroup_rng.uniform(-0.08, 0.08)))
            for j in range(n_classes)
            for g in range(per_class)
        }

        self.sim_records: list[SimRecord] = []
        for i in range(spec.n_records):
            rng = _rng_for(spec.seed, "record", i)
            class_index = rng.choices(range(n_classes), weights=class_weights)[0]
            subgroup = rng.randrange(per_class)
            cluster = class_index * per_class + subgroup
            difficulty = min(
                1.0,
                max(0.0, subgroup_difficulty[(class_index, subgroup)] + rng.uniform(-0.04, 0.04)),
            )
            truth = self.classes[class_index]
            wrong = rng.choice([c for c in self.classes if c != truth])
            confidence = min(0.998, max(0.02, 1.0 - difficulty + rng.gauss(0.0, spec.noise_sd)))
            record_id = f"s{i:05d}"
            text = (
                f"Report {i:05d}: patient presented after "
                f"{SCENARIOS[rng.randrange(len(SCENARIOS))]}; "
                f"{DETAILS[rng.randrange(len(DETAILS))]}."
            )
            self.sim_records.append(
                SimRecord(
                    index=i,
                    record_id=record_id,
                    text=text,
                    truth=truth,
                    wrong_label=wrong,
                    cluster=cluster,
                    difficulty=difficulty,
                    confidence=confidence,
                    error_threshold=rng.random(),
                    n_tokens=rng.randint(4, 12),
                )
            )
        self._by_index = {r.index: r for r in self.sim_records}

    def corpus(self) -> Corpus:
        records = tuple(
            Record(
                record_id=r.record_id,
                text=r.text,
                metadata={"Sex": SEXES[r.index % 2], "Race": RACES[r.index % len(RACES)]},
            )
            for r in self.sim_records
        )
        return Corpus(records=records, source_name=f"sim-{self.spec.seed}")

    def truth_labels(self) -> dict[str, str]:
        return {r.record_id: r.truth for r in self.sim_records}

    def backend(self) -> "SimBackend":
        return SimBackend(self)

    # -- the world model ---------------------------------------------------------

    def error_probability(self, record: SimRecord, learned: frozenset[int]) -> float:
        k_same = sum(1 for idx in learned if self._by_index[idx].cluster == record.cluster)
        return min(0.95, self.spec.base_error * record.difficulty) * (
            self.spec.adapt_factor**k_same
        )

    def predicted_label(self, record: SimRecord, learned: frozenset[int]) -> str:
        # Fixed per-record threshold: shrinking error probability can only
        # flip predictions from wrong to correct, never the other way.
        if record.error_threshold < self.error_probability(record, learned):
            return record.wrong_label
        return record.truth


class SimBackend:
    """Backend over a SimWorld. Meta requests (no logprobs wanted) produce
    prompts carrying the accumulated learned set; classification requests
    answer from the world model."""

    def __init__(self, world: SimWorld):
        self.world = world
        self._caps = BackendCapabilities(supports_logprobs=True, max_parallel_requests=64)

    def capabilities(self) -> BackendCapabilities:
        return self._caps

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        if request.want_logprobs:
            return self._classify(request)
        return self._meta(request)

    def _meta(self, request: CompletionRequest) -> CompletionResponse:
        marker = ADAPTED_RE.search(request.user_text)
        if marker is None:
            learned: set[int] = set()
        else:
            learned = _parse_learned(marker.group(1))
            for tag in REPORT_TAG_RE.findall(request.user_text):
                learned.add(int(tag))
        return CompletionResponse(
            text=self._prompt_text(frozenset(learned)),
            token_logprobs=None,
            model_id="sim",
        )

    def _prompt_text(self, learned: frozenset[int]) -> str:
        names = ", ".join(self.world.classes)
        ids = ",".join(str(i) for i in sorted(learned))
        lines = [
            "You label synthetic incident reports with exactly one class.",
            f"Classes: {names}.",
        ]
        lines += [f"- {c}: use when the report fits {c}." for c in self.world.classes]
        lines += [
            "Reason step by step about the report, then finish with a single line:",
            "ANSWER: <class>",
            f"[adapted:{ids}]",
        ]
        return "\n".join(lines)

    def _classify(self, request: CompletionRequest) -> CompletionResponse:
        tag = REPORT_TAG_RE.search(request.user_text)
        if tag is None:
            raise GatewayError("simulated backend received an unknown record")
        index = int(tag.group(1))
        record = self.world._by_index.get(index)
        if record is None:
            raise GatewayError(f"simulated backend has no record {index}")
        marker = ADAPTED_RE.search(request.system_text)
        learned = frozenset(_parse_learned(marker.group(1))) if marker else frozenset()
        label = self.world.predicted_label(record, learned)
        logprob = math.log(record.confidence)
        logprobs = tuple([logprob] * record.n_tokens)
        text = f"The report's pattern is most consistent with {label}.\nANSWER: {label}"
        return CompletionResponse(
            text=text,
            token_logprobs=logprobs,
            model_id="sim",
            usage=Usage(completion_tokens=record.n_tokens),
            token_texts=None,
        )


def _parse_learned(blob: str) -> set[int]:
    return {int(part) for part in blob.split(",") if part}
