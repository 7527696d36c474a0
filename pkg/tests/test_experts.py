from __future__ import annotations

import io
import json

import pytest

from annoteer.experts import ExpertError, MappingExpert, TerminalExpert, load_truth_file
from annoteer.loop import SampleBatch, SampleItem


def batch_of(items) -> SampleBatch:
    return SampleBatch(iteration=0, created_from_prompt=0, items=tuple(items))


def item(rid: str, label: str = "Helmet", confidence: float = 0.4) -> SampleItem:
    return SampleItem(
        record_id=rid, text=f"narrative {rid}", model_label=label,
        confidence=confidence, class_bucket=label,
    )


class TestMappingExpert:
    def test_answers_from_map(self, helmet_task):
        expert = MappingExpert({"a": "No Helmet", "b": "Helmet"})
        labels = expert.label_batch(batch_of([item("a"), item("b")]), helmet_task)
        assert labels == {"a": "No Helmet", "b": "Helmet"}

    def test_missing_id_raises(self, helmet_task):
        expert = MappingExpert({"a": "Helmet"})
        with pytest.raises(ExpertError, match="no label"):
            expert.label_batch(batch_of([item("zz")]), helmet_task)

    def test_label_outside_classes_raises(self, helmet_task):
        expert = MappingExpert({"a": "bicycle"})
        with pytest.raises(ExpertError, match="not a class"):
            expert.label_batch(batch_of([item("a")]), helmet_task)


class TestTerminalExpert:
    def test_renders_item_and_reprompts_until_valid(self, helmet_task):
        answers = iter(["bogus", "", "no helmet"])
        output = io.StringIO()
        expert = TerminalExpert(input_fn=lambda _prompt: next(answers), output=output)
        labels = expert.label_batch(batch_of([item("a", "Helmet", 0.42)]), helmet_task)
        assert labels == {"a": "No Helmet"}
        shown = output.getvalue()
        assert "narrative a" in shown
        assert "model: Helmet" in shown
        assert "42.0%" in shown
        assert shown.count("not a class") == 2  # two invalid entries re-prompted

    def test_accepts_numeric_choice(self, helmet_task):
        answers = iter(["9", "2"])  # out-of-range, then class number 2
        expert = TerminalExpert(input_fn=lambda _prompt: next(answers), output=io.StringIO())
        labels = expert.label_batch(batch_of([item("a")]), helmet_task)
        assert labels == {"a": "No Helmet"}


class TestTruthFile:
    def test_json_map(self, tmp_path):
        path = tmp_path / "truth.json"
        path.write_text(json.dumps({"a": "Helmet"}), encoding="utf-8")
        assert load_truth_file(path) == {"a": "Helmet"}

    def test_csv_columns(self, tmp_path):
        path = tmp_path / "truth.csv"
        path.write_text("record_id,label\na,Helmet\nb,No Helmet\n", encoding="utf-8")
        assert load_truth_file(path) == {"a": "Helmet", "b": "No Helmet"}

    def test_missing_column_raises(self, tmp_path):
        path = tmp_path / "truth.csv"
        path.write_text("id,verdict\na,Helmet\n", encoding="utf-8")
        with pytest.raises(ExpertError):
            load_truth_file(path)
