"""Expert-in-the-loop LLM classification of unstructured text corpora."""

__version__ = "0.1.0"

from .domain import (  # noqa: F401
    ClassificationOutcome,
    ClassificationTask,
    Corpus,
    LabeledExample,
    PARSE_FAILURE,
    PromptVersion,
    Record,
    SamplingParams,
    Session,
    SessionStatus,
    validate_corpus,
)
from .loop import SampleBatch, SessionEngine  # noqa: F401
