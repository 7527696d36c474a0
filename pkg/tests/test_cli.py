from __future__ import annotations

import csv
import json
from pathlib import Path

import pytest
from click.testing import CliRunner

from annoteer.cli import main
from annoteer.gateway import text_key
from conftest import HELMET_CLASSES


@pytest.fixture
def runner() -> CliRunner:
    return CliRunner()


def write_mock_setup(tmp_path: Path, n: int = 18):
    """A corpus CSV, a matching mock script, and a ground-truth CSV."""
    corpus_path = tmp_path / "corpus.csv"
    rows = []
    truth = {}
    for i in range(n):
        rid = f"n{i}"
        text = f"Patient {i} fell near the park entrance."
        label = HELMET_CLASSES[i % 3]
        rows.append((rid, text, "Male" if i % 2 else "Female"))
        truth[rid] = label
    with corpus_path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["record_id", "narrative", "Sex"])
        writer.writerows(rows)

    script = {
        rid: {"label": truth[rid], "logprobs": [-0.1 * (i % 5 + 1)]}
        for i, rid in enumerate(truth)
    }
    script["__classes__"] = list(HELMET_CLASSES)
    base = "\n".join(
        ["You extract helmet status."]
        + [f"- {c}" for c in HELMET_CLASSES]
        + ["Finish with:", "ANSWER: <class>"]
    )
    script["__meta__"] = [base] + [f"{base}\nRevision {i}." for i in range(1, 6)]
    script_path = tmp_path / "script.json"
    script_path.write_text(json.dumps(script), encoding="utf-8")

    truth_path = tmp_path / "truth.csv"
    with truth_path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["record_id", "label", "Sex"])
        for i, (rid, label) in enumerate(truth.items()):
            writer.writerow([rid, label, "Male" if i % 2 else "Female"])
    return corpus_path, script_path, truth_path, truth


def run_args(corpus_path, script_path, truth_path, out_dir, seed=3):
    return [
        "run",
        "--corpus", str(corpus_path),
        "--text-col", "narrative",
        "--id-col", "record_id",
        "--meta-cols", "Sex",
        "--classes", ",".join(HELMET_CLASSES),
        "--request", "Extract helmet usage status.",
        "--backend", f"mock:{script_path}",
        "--expert", f"oracle:{truth_path}",
        "--iterations", "2",
        "--sample-fraction", "0.5",
        "--quota", "2",
        "--seed", str(seed),
        "--out", str(out_dir),
    ]


class TestRun:
    def test_mock_backend_with_oracle_expert(self, runner, tmp_path):
        corpus_path, script_path, truth_path, _ = write_mock_setup(tmp_path)
        out_dir = tmp_path / "out"
        result = runner.invoke(main, run_args(corpus_path, script_path, truth_path, out_dir))
        assert result.exit_code == 0, result.output
        summary = json.loads((out_dir / "run_summary.json").read_text())
        assert summary["status"] == "Finalized"
        assert summary["iterations"] == 2
        assert summary["prompt_versions"] == [0, 1, 2]
        assert (out_dir / "session.jsonl").exists()
        assert (out_dir / "results.csv").exists()
        with (out_dir / "results.csv").open() as handle:
            assert len(list(csv.DictReader(handle))) == 18

    def test_identical_runs_identical_event_logs(self, runner, tmp_path):
        corpus_path, script_path, truth_path, _ = write_mock_setup(tmp_path)
        logs = []
        for name in ("a", "b"):
            out_dir = tmp_path / name
            result = runner.invoke(main, run_args(corpus_path, script_path, truth_path, out_dir))
            assert result.exit_code == 0, result.output
            logs.append((out_dir / "session.jsonl").read_bytes())
        assert logs[0] == logs[1]

    def test_sim_backend_self_contained(self, runner, tmp_path):
        out_dir = tmp_path / "sim-out"
        result = runner.invoke(
            main,
            [
                "run",
                "--backend", "sim:n=60,classes=3,seed=4",
                "--expert", "oracle:sim",
                "--iterations", "1",
                "--quota", "3",
                "--seed", "9",
                "--out", str(out_dir),
            ],
        )
        assert result.exit_code == 0, result.output
        summary = json.loads((out_dir / "run_summary.json").read_text())
        assert summary["classified"] == 60

    def test_iterations_zero_finalizes_under_v0(self, runner, tmp_path):
        out_dir = tmp_path / "zero"
        result = runner.invoke(
            main,
            [
                "run",
                "--backend", "sim:n=30,classes=3,seed=4",
                "--expert", "oracle:sim",
                "--iterations", "0",
                "--out", str(out_dir),
            ],
        )
        assert result.exit_code == 0, result.output
        summary = json.loads((out_dir / "run_summary.json").read_text())
        assert summary["prompt_versions"] == [0]

    def test_config_file_with_flag_override(self, runner, tmp_path):
        corpus_path, script_path, truth_path, _ = write_mock_setup(tmp_path)
        config = {
            "corpus": str(corpus_path),
            "text_col": "narrative",
            "id_col": "record_id",
            "classes": ",".join(HELMET_CLASSES),
            "request": "Extract helmet usage status.",
            "backend": f"mock:{script_path}",
            "expert": f"oracle:{truth_path}",
            "iterations": 5,
            "sample_fraction": 0.5,
            "quota": 2,
            "seed": 3,
            "out": str(tmp_path / "from-config"),
        }
        config_path = tmp_path / "config.json"
        config_path.write_text(json.dumps(config), encoding="utf-8")
        # The flag wins over the config's iterations=5.
        result = runner.invoke(main, ["run", "--config", str(config_path), "--iterations", "1"])
        assert result.exit_code == 0, result.output
        summary = json.loads((tmp_path / "from-config" / "run_summary.json").read_text())
        assert summary["iterations"] == 1

    def test_missing_backend_is_config_error(self, runner, tmp_path):
        result = runner.invoke(main, ["run", "--out", str(tmp_path / "x")])
        assert result.exit_code == 2

    def test_template_flags_must_pair(self, runner, tmp_path):
        corpus_path, script_path, truth_path, _ = write_mock_setup(tmp_path)
        args = run_args(corpus_path, script_path, truth_path, tmp_path / "x")
        args += ["--initial-template", str(script_path)]  # update template missing
        result = runner.invoke(main, args)
        assert result.exit_code == 2
        assert "go together" in result.output

    def test_custom_templates_drive_meta_calls(self, runner, tmp_path):
        corpus_path, script_path, truth_path, _ = write_mock_setup(tmp_path)
        initial = tmp_path / "initial.txt"
        update = tmp_path / "update.txt"
        initial.write_text(
            "My own instructions: {{request}}\n{{classes}}\n{{corpus_sample}}", encoding="utf-8"
        )
        update.write_text("{{previous_prompt}}\n{{fewshot_block}}", encoding="utf-8")
        out_dir = tmp_path / "custom-templates"
        args = run_args(corpus_path, script_path, truth_path, out_dir)
        args += ["--initial-template", str(initial), "--update-template", str(update)]
        result = runner.invoke(main, args)
        assert result.exit_code == 0, result.output

    def test_bad_mock_script_is_config_error(self, runner, tmp_path):
        corpus_path, _, truth_path, _ = write_mock_setup(tmp_path)
        result = runner.invoke(
            main,
            [
                "run",
                "--corpus", str(corpus_path),
                "--text-col", "narrative",
                "--id-col", "record_id",
                "--classes", ",".join(HELMET_CLASSES),
                "--request", "r",
                "--backend", "mock:/nonexistent.json",
                "--expert", f"oracle:{truth_path}",
                "--out", str(tmp_path / "x"),
            ],
        )
        assert result.exit_code == 2


class TestEvaluate:
    def make_results(self, tmp_path, truth, wrong_ids=()):
        results_path = tmp_path / "results.csv"
        with results_path.open("w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(["record_id", "predicted_class", "confidence", "prompt_version"])
            for rid, label in truth.items():
                predicted = label
                if rid in wrong_ids:
                    predicted = next(c for c in HELMET_CLASSES if c != label)
                writer.writerow([rid, predicted, "9.0e-01", "2"])
        return results_path

    def test_perfect_results_exit_zero(self, runner, tmp_path):
        _, _, truth_path, truth = write_mock_setup(tmp_path)
        results_path = self.make_results(tmp_path, truth)
        result = runner.invoke(
            main,
            ["evaluate", "--results", str(results_path), "--truth", str(truth_path),
             "--classes", ",".join(HELMET_CLASSES)],
        )
        assert result.exit_code == 0, result.output
        payload = json.loads(result.output)
        assert payload["metrics"]["macro"]["f1"] == 1.0

    def test_floor_gate_exit_four(self, runner, tmp_path):
        _, _, truth_path, truth = write_mock_setup(tmp_path)
        wrong = set(list(truth)[:6])
        results_path = self.make_results(tmp_path, truth, wrong_ids=wrong)
        result = runner.invoke(
            main,
            ["evaluate", "--results", str(results_path), "--truth", str(truth_path),
             "--classes", ",".join(HELMET_CLASSES), "--floor", "0.99"],
        )
        assert result.exit_code == 4

    def test_slice_columns(self, runner, tmp_path):
        _, _, truth_path, truth = write_mock_setup(tmp_path)
        results_path = self.make_results(tmp_path, truth)
        result = runner.invoke(
            main,
            ["evaluate", "--results", str(results_path), "--truth", str(truth_path),
             "--classes", ",".join(HELMET_CLASSES), "--slice-cols", "Sex"],
        )
        assert result.exit_code == 0, result.output
        payload = json.loads(result.output)
        assert set(payload["slices"]["Sex"]) == {"Male", "Female"}

    def test_id_mismatch_exit_two(self, runner, tmp_path):
        _, _, truth_path, truth = write_mock_setup(tmp_path)
        partial = dict(list(truth.items())[:5])
        results_path = self.make_results(tmp_path, partial)
        result = runner.invoke(
            main,
            ["evaluate", "--results", str(results_path), "--truth", str(truth_path),
             "--classes", ",".join(HELMET_CLASSES)],
        )
        assert result.exit_code == 2
        assert "IdMismatch" in result.output


class TestExperimentCommands:
    def test_experiment_sampling_smoke(self, runner, tmp_path):
        out_path = tmp_path / "cmp.json"
        result = runner.invoke(
            main,
            [
                "experiment-sampling",
                "--backend", "sim:n=120,classes=3,seed=6",
                "--runs", "3",
                "--seed", "2",
                "--sample-fraction", "0.3",
                "--quota", "3",
                "--out", str(out_path),
            ],
        )
        assert result.exit_code == 0, result.output
        payload = json.loads(out_path.read_text())
        assert set(payload["runs"]) == {"lowest_confidence", "uniform"}
        assert len(payload["runs"]["uniform"]) == 3
        assert "macro_f1" in payload["tests"]

    def test_experiment_sampling_single_strategy_omits_tests(self, runner, tmp_path):
        result = runner.invoke(
            main,
            [
                "experiment-sampling",
                "--backend", "sim:n=60,classes=3,seed=6",
                "--strategies", "uniform",
                "--runs", "2",
                "--quota", "2",
            ],
        )
        assert result.exit_code == 0, result.output
        payload = json.loads(result.output)
        assert payload["tests"] == {}

    def test_experiment_refinement_smoke(self, runner, tmp_path):
        result = runner.invoke(
            main,
            [
                "experiment-refinement",
                "--backend", "sim:n=100,classes=3,seed=8",
                "--runs", "2",
                "--iterations", "1",
                "--quota", "3",
            ],
        )
        assert result.exit_code == 0, result.output
        payload = json.loads(result.output)
        assert len(payload["runs"]) == 2
        assert "permutation_last_vs_first" in payload
