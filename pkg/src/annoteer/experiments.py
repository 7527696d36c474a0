"""Headless experiment harnesses: multi-run prompt refinement, and the
uncertainty-vs-random sampling comparison, both evaluated on held-out ground
truth with the statistics module.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

from .classify import classify_all
from .domain import (
    ClassificationOutcome,
    ClassificationTask,
    Corpus,
    SamplingParams,
)
from .experts import Expert, MappingExpert
from .gateway import Backend
from .loop import EmptyPool, SessionEngine
from .stats import (
    MannWhitneyResult,
    PermutationResult,
    evaluate_pairs,
    macro_metric,
    mann_whitney_u,
    permutation_test_paired,
)


@dataclass(frozen=True)
class ExperimentSetup:
    """Everything an offline experiment needs: the corpus, the task, ground
    truth for held-out evaluation, and a factory for fresh backends."""

    corpus: Corpus
    task: ClassificationTask
    truth: Mapping[str, str]
    backend_factory: Callable[[], Backend]


def _derive_seed(*parts: object) -> int:
    blob = "|".join(str(p) for p in parts).encode("utf-8")
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "big")


def run_loop_session(
    corpus: Corpus,
    task: ClassificationTask,
    backend: Backend,
    expert: Expert,
    iterations: int,
    rng_seed: int,
    sampling_params: SamplingParams | None = None,
    session_id: str | None = None,
    clock: Callable[[], str] | None = None,
    event_sink=None,
    max_in_flight: int = 16,
    finalize: bool = True,
) -> SessionEngine:
    """Drive a full session: start, then batch -> labels for the requested
    number of iterations (stopping early if the pool empties), then finalize."""
    kwargs = {} if clock is None else {"clock": clock}
    engine = SessionEngine.start(
        corpus,
        task,
        backend,
        rng_seed=rng_seed,
        sampling_params=sampling_params,
        session_id=session_id,
        event_sink=event_sink,
        max_in_flight=max_in_flight,
        **kwargs,
    )
    for _ in range(iterations):
        try:
            batch = engine.build_sample_batch()
        except EmptyPool:
            break
        labels = expert.label_batch(batch, task)
        engine.submit_labels(labels)
    if finalize:
        engine.finalize()
    return engine


@dataclass(frozen=True)
class VersionScore:
    version_index: int
    macro_f1: float
    macro_precision: float
    macro_recall: float
    accuracy: float


@dataclass(frozen=True)
class RefinementRun:
    run_index: int
    rng_seed: int
    n_labeled: int
    n_held_out: int
    scores: tuple[VersionScore, ...]

    @property
    def non_decreasing_f1(self) -> bool:
        f1s = [s.macro_f1 for s in self.scores]
        return all(b >= a for a, b in zip(f1s, f1s[1:]))


@dataclass(frozen=True)
class RefinementReport:
    runs: tuple[RefinementRun, ...]
    permutation: PermutationResult
    mean_first: float
    mean_last: float

    def to_dict(self) -> dict:
        return {
            "runs": [
                {
                    "run_index": r.run_index,
                    "rng_seed": r.rng_seed,
                    "n_labeled": r.n_labeled,
                    "n_held_out": r.n_held_out,
                    "non_decreasing_f1": r.non_decreasing_f1,
                    "scores": [vars(s) for s in r.scores],
                }
                for r in self.runs
            ],
            "mean_macro_f1_first_version": self.mean_first,
            "mean_macro_f1_last_version": self.mean_last,
            "permutation_last_vs_first": self.permutation.to_dict(),
        }


def prompt_refinement_experiment(
    setup: ExperimentSetup,
    runs: int = 6,
    iterations: int = 2,
    seed: int = 0,
    sampling_params: SamplingParams | None = None,
    max_in_flight: int = 16,
) -> RefinementReport:
    """Repeat the refinement loop independently and score every prompt
    version on the records the run never labeled. The paired permutation
    test compares per-record correctness of the last version against the
    first, pooled across runs."""
    run_reports: list[RefinementRun] = []
    correct_first: list[int] = []
    correct_last: list[int] = []
    f1_of = macro_metric(setup.task.classes, "f1")
    per_version_f1s: dict[int, list[float]] = {}

    for run_index in range(runs):
        run_seed = _derive_seed(seed, "refinement", run_index)
        backend = setup.backend_factory()
        engine = run_loop_session(
            setup.corpus,
            setup.task,
            backend,
            MappingExpert(setup.truth, name="oracle"),
            iterations=iterations,
            rng_seed=run_seed,
            sampling_params=sampling_params,
            max_in_flight=max_in_flight,
            finalize=False,
        )
        session = engine.session
        held_out = [
            r for r in setup.corpus.records if r.record_id not in session.labeled_ids()
        ]
        truths = [setup.truth[r.record_id] for r in held_out]
        scores: list[VersionScore] = []
        predictions_by_version: dict[int, list[str]] = {}
        for version in session.prompt_history:
            results = classify_all(
                held_out, version, setup.task, backend, max_in_flight=max_in_flight
            )
            preds = [
                r.predicted_class if isinstance(r, ClassificationOutcome) else "ERROR"
                for r in results
            ]
            predictions_by_version[version.version_index] = preds
            report = evaluate_pairs(truths, preds, setup.task.classes)
            scores.append(
                VersionScore(
                    version_index=version.version_index,
                    macro_f1=report.macro.f1,
                    macro_precision=report.macro.precision,
                    macro_recall=report.macro.recall,
                    accuracy=report.accuracy,
                )
            )
            per_version_f1s.setdefault(version.version_index, []).append(report.macro.f1)
        first_preds = predictions_by_version[0]
        last_preds = predictions_by_version[session.current_prompt.version_index]
        correct_first.extend(int(p == t) for p, t in zip(first_preds, truths))
        correct_last.extend(int(p == t) for p, t in zip(last_preds, truths))
        run_reports.append(
            RefinementRun(
                run_index=run_index,
                rng_seed=run_seed,
                n_labeled=len(session.labeled_data),
                n_held_out=len(held_out),
                scores=tuple(scores),
            )
        )

    permutation = permutation_test_paired(correct_first, correct_last, seed=_derive_seed(seed, "perm"))
    first_f1s = per_version_f1s.get(0, [0.0])
    last_version = max(per_version_f1s)
    last_f1s = per_version_f1s[last_version]
    return RefinementReport(
        runs=tuple(run_reports),
        permutation=permutation,
        mean_first=sum(first_f1s) / len(first_f1s),
        mean_last=sum(last_f1s) / len(last_f1s),
    )


@dataclass(frozen=True)
class StrategyRun:
    run_index: int
    rng_seed: int
    macro_f1: float
    macro_precision: float
    macro_recall: float
    n_labeled: int


@dataclass(frozen=True)
class SamplingComparisonReport:
    strategies: tuple[str, ...]
    runs: Mapping[str, tuple[StrategyRun, ...]]
    medians: Mapping[str, Mapping[str, float]]
    tests: Mapping[str, MannWhitneyResult]

    def to_dict(self) -> dict:
        return {
            "strategies": list(self.strategies),
            "runs": {
                name: [vars(r) for r in runs] for name, runs in self.runs.items()
            },
            "medians": {k: dict(v) for k, v in self.medians.items()},
            "tests": {k: v.to_dict() for k, v in self.tests.items()},
        }


def _median(values: Sequence[float]) -> float:
    ordered = sorted(values)
    n = len(ordered)
    mid = n // 2
    if n % 2:
        return ordered[mid]
    return (ordered[mid - 1] + ordered[mid]) / 2


def sampling_comparison_experiment(
    setup: ExperimentSetup,
    strategies: Sequence[str] = ("lowest_confidence", "uniform"),
    runs: int = 6,
    seed: int = 0,
    sample_fraction: float = 0.10,
    per_class_quota: int = 10,
    max_in_flight: int = 16,
) -> SamplingComparisonReport:
    """Compare selection strategies over independent single-iteration runs.

    Run r of every strategy shares one session seed, so both strategies see
    the same subsample and differ only in which records the expert labels.
    Reports per-run macro metrics on the held-out records, per-strategy
    medians, and Mann-Whitney tests when exactly two strategies are given.
    """
    all_runs: dict[str, tuple[StrategyRun, ...]] = {}
    for strategy in strategies:
        strategy_runs: list[StrategyRun] = []
        for run_index in range(runs):
            run_seed = _derive_seed(seed, "sampling-run", run_index)
            backend = setup.backend_factory()
            engine = run_loop_session(
                setup.corpus,
                setup.task,
                backend,
                MappingExpert(setup.truth, name="oracle"),
                iterations=1,
                rng_seed=run_seed,
                sampling_params=SamplingParams(
                    sample_fraction=sample_fraction,
                    per_class_quota=per_class_quota,
                    strategy=strategy,
                ),
                max_in_flight=max_in_flight,
                finalize=True,
            )
            session = engine.session
            labeled = session.labeled_ids()
            predictions = {
                o.record_id: o.predicted_class for o in engine.final_outcomes or ()
            }
            held_out = [r.record_id for r in setup.corpus.records if r.record_id not in labeled]
            truths = [setup.truth[rid] for rid in held_out]
            preds = [predictions.get(rid, "ERROR") for rid in held_out]
            report = evaluate_pairs(truths, preds, setup.task.classes)
            strategy_runs.append(
                StrategyRun(
                    run_index=run_index,
                    rng_seed=run_seed,
                    macro_f1=report.macro.f1,
                    macro_precision=report.macro.precision,
                    macro_recall=report.macro.recall,
                    n_labeled=len(labeled),
                )
            )
        all_runs[strategy] = tuple(strategy_runs)

    medians = {
        name: {
            "macro_f1": _median([r.macro_f1 for r in runs_]),
            "macro_precision": _median([r.macro_precision for r in runs_]),
            "macro_recall": _median([r.macro_recall for r in runs_]),
        }
        for name, runs_ in all_runs.items()
    }
    tests: dict[str, MannWhitneyResult] = {}
    if len(strategies) == 2:
        a, b = strategies
        for metric_name in ("macro_f1", "macro_precision", "macro_recall"):
            tests[metric_name] = mann_whitney_u(
                [getattr(r, metric_name) for r in all_runs[a]],
                [getattr(r, metric_name) for r in all_runs[b]],
            )
    return SamplingComparisonReport(
        strategies=tuple(strategies),
        runs=all_runs,
        medians=medians,
        tests=tests,
    )
