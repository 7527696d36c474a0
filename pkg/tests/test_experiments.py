from __future__ import annotations

import pytest

from annoteer.domain import ClassificationTask, SamplingParams, SessionStatus
from annoteer.experiments import (
    ExperimentSetup,
    prompt_refinement_experiment,
    run_loop_session,
    sampling_comparison_experiment,
)
from annoteer.experts import MappingExpert
from annoteer.simulation import SimSpec, SimWorld


@pytest.fixture(scope="module")
def setup() -> ExperimentSetup:
    world = SimWorld(SimSpec(n_records=150, n_classes=3, seed=23))
    task = ClassificationTask(classes=world.classes, request="Assign the fitting category.")
    return ExperimentSetup(
        corpus=world.corpus(), task=task, truth=world.truth_labels(),
        backend_factory=world.backend,
    )


class TestRunLoopSession:
    def test_drives_requested_iterations(self, setup):
        engine = run_loop_session(
            setup.corpus,
            setup.task,
            setup.backend_factory(),
            MappingExpert(setup.truth, name="oracle"),
            iterations=2,
            rng_seed=5,
            sampling_params=SamplingParams(sample_fraction=0.2, per_class_quota=3),
        )
        assert engine.session.status is SessionStatus.FINALIZED
        assert engine.session.iteration == 2
        assert len(engine.final_outcomes) == 150

    def test_zero_iterations_finalizes_v0(self, setup):
        engine = run_loop_session(
            setup.corpus, setup.task, setup.backend_factory(),
            MappingExpert(setup.truth), iterations=0, rng_seed=5,
        )
        assert engine.session.current_prompt.version_index == 0
        assert engine.session.status is SessionStatus.FINALIZED


class TestRefinementExperiment:
    def test_scores_every_version_and_runs(self, setup):
        report = prompt_refinement_experiment(
            setup, runs=2, iterations=1, seed=3,
            sampling_params=SamplingParams(sample_fraction=0.2, per_class_quota=3),
        )
        assert len(report.runs) == 2
        for run in report.runs:
            assert [s.version_index for s in run.scores] == [0, 1]
            assert run.n_held_out == 150 - run.n_labeled
        assert 0 < report.permutation.p_value <= 1.0

    def test_reproducible(self, setup):
        kwargs = dict(
            runs=2, iterations=1, seed=3,
            sampling_params=SamplingParams(sample_fraction=0.2, per_class_quota=3),
        )
        a = prompt_refinement_experiment(setup, **kwargs)
        b = prompt_refinement_experiment(setup, **kwargs)
        assert a == b


class TestSamplingComparison:
    def test_shared_seed_per_run_isolates_strategy(self, setup):
        report = sampling_comparison_experiment(
            setup, runs=2, seed=4, sample_fraction=0.3, per_class_quota=3
        )
        assert set(report.runs) == {"lowest_confidence", "uniform"}
        for a, b in zip(report.runs["lowest_confidence"], report.runs["uniform"]):
            assert a.rng_seed == b.rng_seed
        assert set(report.medians["uniform"]) == {"macro_f1", "macro_precision", "macro_recall"}
        assert set(report.tests) == {"macro_f1", "macro_precision", "macro_recall"}

    def test_single_strategy_no_tests(self, setup):
        report = sampling_comparison_experiment(
            setup, strategies=("uniform",), runs=2, seed=4,
            sample_fraction=0.3, per_class_quota=3,
        )
        assert report.tests == {}
