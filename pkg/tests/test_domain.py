from __future__ import annotations

import pytest

from annoteer.domain import (
    ClassificationTask,
    Corpus,
    DomainError,
    PARSE_FAILURE,
    PromptVersion,
    Record,
    SamplingParams,
    validate_corpus,
)
from conftest import make_corpus


class TestValidateCorpus:
    def test_duplicate_id_reported(self):
        records = (
            Record("n7", "first text"),
            Record("n8", "second text"),
            Record("n7", "third text"),
        )
        report = validate_corpus(Corpus(records=records))
        assert not report.ok
        assert any(v.rule == "unique-record-id" and v.record_id == "n7" for v in report.violations)

    def test_valid_corpus_empty_report(self):
        report = validate_corpus(make_corpus(3))
        assert report.ok
        assert report.violations == ()

    def test_whitespace_only_text_reported(self):
        records = (Record("a", "fine"), Record("b", "   \t\n"))
        report = validate_corpus(Corpus(records=records))
        assert [v.rule for v in report.violations] == ["non-empty-text"]
        assert report.violations[0].record_id == "b"

    def test_empty_record_id_reported(self):
        report = validate_corpus(Corpus(records=(Record("", "text"),)))
        assert any(v.rule == "non-empty-record-id" for v in report.violations)

    def test_empty_corpus_reported(self):
        report = validate_corpus(Corpus(records=()))
        assert any(v.rule == "non-empty-corpus" for v in report.violations)


class TestClassificationTask:
    def test_needs_two_classes(self):
        with pytest.raises(DomainError):
            ClassificationTask(classes=("Only",), request="classify")

    def test_case_insensitive_duplicates_rejected(self):
        with pytest.raises(DomainError, match="duplicate"):
            ClassificationTask(classes=("Helmet", "helmet"), request="classify")

    def test_parse_failure_reserved(self):
        with pytest.raises(DomainError, match="reserved"):
            ClassificationTask(classes=("A", PARSE_FAILURE), request="classify")

    def test_empty_request_rejected(self):
        with pytest.raises(DomainError):
            ClassificationTask(classes=("A", "B"), request="  ")

    def test_canonical_class_casing(self, helmet_task):
        assert helmet_task.canonical_class("no helmet") == "No Helmet"
        assert helmet_task.canonical_class("  NOT MENTIONED ") == "Not mentioned"
        assert helmet_task.canonical_class("bicycle") is None


class TestPromptVersion:
    def test_version_zero_has_no_parent(self):
        with pytest.raises(DomainError):
            PromptVersion(0, "text", parent_version=1, fewshot_ids=(), created_at="t")

    def test_later_versions_chain(self):
        with pytest.raises(DomainError):
            PromptVersion(2, "text", parent_version=0, fewshot_ids=(), created_at="t")
        v = PromptVersion(2, "text", parent_version=1, fewshot_ids=("a",), created_at="t")
        assert v.parent_version == 1


class TestSamplingParams:
    def test_fraction_bounds(self):
        with pytest.raises(DomainError):
            SamplingParams(sample_fraction=0.0)
        with pytest.raises(DomainError):
            SamplingParams(sample_fraction=1.5)

    def test_strategy_names(self):
        with pytest.raises(DomainError):
            SamplingParams(strategy="genetic")
        assert SamplingParams(strategy="uniform").strategy == "uniform"


def test_corpus_lookup(helmet_task):
    corpus = make_corpus(3)
    assert corpus.get("n1").record_id == "n1"
    with pytest.raises(DomainError):
        corpus.get("missing")
