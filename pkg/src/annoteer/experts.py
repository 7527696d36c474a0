"""Expert implementations for headless runs: a terminal prompt for a real
person, a scripted map for tests, and a ground-truth oracle for experiments.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Mapping, Protocol, TextIO

from .domain import ClassificationTask
from .loop import SampleBatch


class ExpertError(Exception):
    pass


class Expert(Protocol):
    def label_batch(self, batch: SampleBatch, task: ClassificationTask) -> dict[str, str]: ...


class MappingExpert:
    """Answers from a fixed record_id -> label map (scripted or oracle)."""

    def __init__(self, labels: Mapping[str, str], name: str = "scripted"):
        self.labels = dict(labels)
        self.name = name

    def label_batch(self, batch: SampleBatch, task: ClassificationTask) -> dict[str, str]:
        out: dict[str, str] = {}
        for item in batch.items:
            label = self.labels.get(item.record_id)
            if label is None:
                raise ExpertError(f"{self.name} expert has no label for {item.record_id!r}")
            if task.canonical_class(label) is None:
                raise ExpertError(
                    f"{self.name} expert label {label!r} for {item.record_id!r} is not a class"
                )
            out[item.record_id] = label
        return out


class TerminalExpert:
    """Interactive labeling at a terminal: shows each queued record with the
    model's label and confidence, accepts a class name or its number, and
    re-prompts until the answer is valid."""

    def __init__(self, input_fn=input, output: TextIO | None = None):
        self.input_fn = input_fn
        import sys

        self.output = output or sys.stdout

    def label_batch(self, batch: SampleBatch, task: ClassificationTask) -> dict[str, str]:
        print(f"\n=== Labeling queue: {len(batch.items)} records ===", file=self.output)
        print("Classes:", file=self.output)
        for i, cls in enumerate(task.classes, start=1):
            print(f"  {i}. {cls}", file=self.output)
        labels: dict[str, str] = {}
        for n, item in enumerate(batch.items, start=1):
            print(
                f"\n[{n}/{len(batch.items)}] {item.record_id} "
                f"(model: {item.model_label}, confidence {item.confidence:.1%})",
                file=self.output,
            )
            print(item.text, file=self.output)
            while True:
                raw = self.input_fn("label> ").strip()
                chosen = None
                if raw.isdigit() and 1 <= int(raw) <= len(task.classes):
                    chosen = task.classes[int(raw) - 1]
                else:
                    chosen = task.canonical_class(raw)
                if chosen is not None:
                    labels[item.record_id] = chosen
                    break
                print(f"  not a class; enter a name or 1-{len(task.classes)}", file=self.output)
        return labels


def load_truth_file(path: str | Path, id_column: str = "record_id", label_column: str = "label") -> dict[str, str]:
    """Read a record_id -> label map from a JSON object or a CSV file with
    id and label columns."""
    path = Path(path)
    if path.suffix.lower() == ".json":
        data = json.loads(path.read_text(encoding="utf-8"))
        if not isinstance(data, dict):
            raise ExpertError(f"{path} must contain a JSON object of id -> label")
        return {str(k): str(v) for k, v in data.items()}
    with path.open("r", encoding="utf-8", newline="") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames is None or id_column not in reader.fieldnames:
            raise ExpertError(f"{path} needs an {id_column!r} column")
        if label_column not in reader.fieldnames:
            raise ExpertError(f"{path} needs a {label_column!r} column")
        return {row[id_column]: row[label_column] for row in reader}
