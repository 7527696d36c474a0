"""Headless driver: run labeling sessions with a scripted or interactive
expert, reproduce the sampling experiments offline, and evaluate exported
results against ground truth.

Exit codes: 0 success, 2 config error, 3 gateway failure, 4 gate failure.
"""

from __future__ import annotations

import hashlib
import json
import os
import sys
from pathlib import Path

import click

from .domain import ClassificationTask, Corpus, SamplingParams
from .experiments import (
    ExperimentSetup,
    prompt_refinement_experiment,
    run_loop_session,
    sampling_comparison_experiment,
)
from .experts import ExpertError, MappingExpert, TerminalExpert, load_truth_file
from .gateway import GatewayError, MockBackend, OpenAICompatBackend, load_mock_script
from .prompts import MetaPromptTemplates
from .simulation import SimSpec, SimWorld
from .stats import (
    bias_slices,
    bootstrap_ci_pooled,
    evaluate_pairs,
    macro_metric,
)
from .storage import (
    EventLogWriter,
    StorageError,
    export_results,
    load_corpus_csv,
)

EXIT_CONFIG = 2
EXIT_GATEWAY = 3
EXIT_GATE = 4

MODEL_ENV = "ANNOTEER_MODEL"


class ConfigError(Exception):
    pass


def deterministic_clock(start_epoch: str = "2000-01-01T00:00:00+00:00"):
    """Logical timestamps so identical runs write identical event logs."""
    from datetime import datetime, timedelta, timezone

    base = datetime.fromisoformat(start_epoch).astimezone(timezone.utc)
    counter = {"n": 0}

    def clock() -> str:
        stamp = base + timedelta(seconds=counter["n"])
        counter["n"] += 1
        return stamp.isoformat(timespec="seconds")

    return clock


def _derived_session_id(*parts: object) -> str:
    blob = "|".join(str(p) for p in parts).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:12]


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}")
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    return data


def _setting(flag_value, config: dict, key: str, default=None):
    """Flags win over the config file; the config wins over defaults."""
    if flag_value is not None:
        return flag_value
    if key in config:
        return config[key]
    return default


def _parse_task(classes: str | None, request: str | None) -> ClassificationTask:
    if not classes or not request:
        raise ConfigError("--classes and --request are required (or set them in the config)")
    names = tuple(c.strip() for c in classes.split(",") if c.strip())
    try:
        return ClassificationTask(classes=names, request=request)
    except ValueError as exc:
        raise ConfigError(str(exc))


def _build_backend(spec: str, corpus: Corpus | None, model: str | None):
    """Returns (backend, sim_world_or_None)."""
    if spec == "openai-compatible":
        resolved = model or os.environ.get(MODEL_ENV)
        if not resolved:
            raise ConfigError(f"--model (or {MODEL_ENV}) is required for the network backend")
        try:
            return OpenAICompatBackend(model=resolved), None
        except GatewayError as exc:
            raise ConfigError(str(exc))
    if spec.startswith("mock:"):
        path = spec[len("mock:"):]
        id_to_text = {r.record_id: r.text for r in corpus.records} if corpus else None
        try:
            return MockBackend(load_mock_script(path, id_to_text)), None
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot load mock script {path}: {exc}")
    if spec.startswith("sim:"):
        try:
            world = SimWorld(SimSpec.parse(spec[len("sim:"):]))
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"bad simulation spec: {exc}")
        return world.backend(), world
    raise ConfigError(f"unknown backend spec {spec!r}")


def _build_expert(spec: str, world: SimWorld | None):
    if spec == "tty":
        return TerminalExpert()
    if spec.startswith("script:"):
        return MappingExpert(load_truth_file(spec[len("script:"):]), name="scripted")
    if spec.startswith("oracle:"):
        source = spec[len("oracle:"):]
        if source == "sim":
            if world is None:
                raise ConfigError("oracle:sim needs a sim backend")
            return MappingExpert(world.truth_labels(), name="oracle")
        return MappingExpert(load_truth_file(source), name="oracle")
    raise ConfigError(f"unknown expert spec {spec!r}")


def _load_templates(initial: str | None, update: str | None) -> MetaPromptTemplates | None:
    if initial or update:
        if not (initial and update):
            raise ConfigError("--initial-template and --update-template go together")
        return MetaPromptTemplates.from_files(initial, update)
    return None


@click.group()
def main() -> None:
    """Expert-in-the-loop LLM classification."""


def _corpus_options(fn):
    fn = click.option("--corpus", "corpus_path", default=None, help="Corpus CSV path.")(fn)
    fn = click.option("--text-col", default=None, help="Column holding the record text.")(fn)
    fn = click.option("--id-col", default=None, help="Optional id column.")(fn)
    fn = click.option("--meta-cols", default=None, help="Comma-separated metadata columns.")(fn)
    return fn


def _load_corpus_from_flags(corpus_path, text_col, id_col, meta_cols) -> Corpus:
    if not corpus_path or not text_col:
        raise ConfigError("--corpus and --text-col are required for file-based corpora")
    meta = tuple(c.strip() for c in (meta_cols or "").split(",") if c.strip())
    try:
        return load_corpus_csv(corpus_path, text_col, id_column=id_col, metadata_columns=meta)
    except StorageError as exc:
        raise ConfigError(str(exc))


@main.command("run")
@_corpus_options
@click.option("--classes", default=None, help="Comma-separated class names.")
@click.option("--request", default=None, help="Natural-language classification request.")
@click.option("--backend", "backend_spec", default=None, help="openai-compatible | mock:PATH | sim:SPEC")
@click.option("--expert", "expert_spec", default=None, help="tty | script:PATH | oracle:PATH | oracle:sim")
@click.option("--iterations", type=int, default=None, help="Labeling iterations to run.")
@click.option("--sample-fraction", type=float, default=None)
@click.option("--quota", type=int, default=None, help="Per-class selection quota.")
@click.option("--seed", type=int, default=None)
@click.option("--out", "out_dir", default=None, help="Output directory.")
@click.option("--model", default=None, help="Model name for the network backend.")
@click.option("--max-in-flight", type=int, default=None)
@click.option("--initial-template", default=None)
@click.option("--update-template", default=None)
@click.option("--config", "config_path", default=None, help="JSON config mirroring the flags; flags win.")
def cmd_run(
    corpus_path, text_col, id_col, meta_cols, classes, request, backend_spec,
    expert_spec, iterations, sample_fraction, quota, seed, out_dir, model,
    max_in_flight, initial_template, update_template, config_path,
) -> None:
    """Run a full labeling session and export its artifacts."""
    try:
        config = _load_config(config_path)
        corpus_path = _setting(corpus_path, config, "corpus")
        text_col = _setting(text_col, config, "text_col")
        id_col = _setting(id_col, config, "id_col")
        meta_cols = _setting(meta_cols, config, "meta_cols")
        classes = _setting(classes, config, "classes")
        request = _setting(request, config, "request")
        backend_spec = _setting(backend_spec, config, "backend")
        expert_spec = _setting(expert_spec, config, "expert", "tty")
        iterations = _setting(iterations, config, "iterations", 2)
        sample_fraction = _setting(sample_fraction, config, "sample_fraction", 0.10)
        quota = _setting(quota, config, "quota", 10)
        seed = _setting(seed, config, "seed", 0)
        out_dir = _setting(out_dir, config, "out", "annoteer-out")
        model = _setting(model, config, "model")
        max_in_flight = _setting(max_in_flight, config, "max_in_flight", 16)
        templates = _load_templates(
            _setting(initial_template, config, "initial_template"),
            _setting(update_template, config, "update_template"),
        )
        if not backend_spec:
            raise ConfigError("--backend is required")

        world: SimWorld | None = None
        if backend_spec.startswith("sim:") and not corpus_path:
            backend, world = _build_backend(backend_spec, None, model)
            corpus = world.corpus()
            task = _parse_task(
                classes or ",".join(world.classes),
                request or "Assign the category that best fits each report.",
            )
        else:
            corpus = _load_corpus_from_flags(corpus_path, text_col, id_col, meta_cols)
            backend, world = _build_backend(backend_spec, corpus, model)
            task = _parse_task(classes, request)
        expert = _build_expert(expert_spec, world)
        params = SamplingParams(sample_fraction=sample_fraction, per_class_quota=quota)
    except (ConfigError, ExpertError, ValueError) as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "session.jsonl"
    if log_path.exists():
        log_path.unlink()
    writer = EventLogWriter(log_path)
    session_id = _derived_session_id(seed, task.classes, task.request, corpus.source_name, params)
    try:
        engine = run_loop_session(
            corpus,
            task,
            backend,
            expert,
            iterations=iterations,
            rng_seed=seed,
            sampling_params=params,
            session_id=session_id,
            clock=deterministic_clock(),
            event_sink=writer.append,
            max_in_flight=max_in_flight,
        )
    except GatewayError as exc:
        click.echo(f"gateway failure: {exc}", err=True)
        sys.exit(EXIT_GATEWAY)
    except ExpertError as exc:
        click.echo(f"expert failure: {exc}", err=True)
        sys.exit(EXIT_CONFIG)

    session = engine.session
    paths = export_results(
        engine.final_outcomes or (),
        session.labeled_data,
        session.prompt_history,
        out,
        prompt_version=session.current_prompt.version_index,
    )
    summary = {
        "session_id": session.session_id,
        "status": session.status.value,
        "iterations": session.iteration,
        "labeled": len(session.labeled_data),
        "prompt_versions": [p.version_index for p in session.prompt_history],
        "classified": len(engine.final_outcomes or ()),
        "classification_errors": len(engine.final_errors),
        "event_log": str(log_path),
        "exports": {k: str(v) for k, v in paths.items()},
    }
    (out / "run_summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    click.echo(json.dumps(summary, indent=2, sort_keys=True))


@main.command("experiment-sampling")
@click.option("--backend", "backend_spec", required=True, help="Usually sim:SPEC; mock:PATH needs --truth.")
@_corpus_options
@click.option("--classes", default=None)
@click.option("--request", default=None)
@click.option("--truth", "truth_path", default=None, help="Ground truth (CSV/JSON) when not using sim.")
@click.option("--strategies", default="lowest_confidence,uniform", show_default=True)
@click.option("--runs", type=int, default=6, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--sample-fraction", type=float, default=0.10, show_default=True)
@click.option("--quota", type=int, default=10, show_default=True)
@click.option("--out", "out_path", default=None, help="Write the JSON report here.")
def cmd_experiment_sampling(
    backend_spec, corpus_path, text_col, id_col, meta_cols, classes, request,
    truth_path, strategies, runs, seed, sample_fraction, quota, out_path,
) -> None:
    """Compare selection strategies over independent runs on held-out truth."""
    try:
        strategy_names = tuple(s.strip() for s in strategies.split(",") if s.strip())
        for name in strategy_names:
            if name not in ("lowest_confidence", "uniform"):
                raise ConfigError(f"unknown strategy {name!r}")
        if backend_spec.startswith("sim:") and not corpus_path:
            world = SimWorld(SimSpec.parse(backend_spec[len("sim:"):]))
            corpus = world.corpus()
            task = _parse_task(
                classes or ",".join(world.classes),
                request or "Assign the category that best fits each report.",
            )
            truth = world.truth_labels()
            backend_factory = world.backend
        else:
            corpus = _load_corpus_from_flags(corpus_path, text_col, id_col, meta_cols)
            task = _parse_task(classes, request)
            if not truth_path:
                raise ConfigError("--truth is required when the backend is not sim")
            truth = load_truth_file(truth_path)
            missing = [r.record_id for r in corpus.records if r.record_id not in truth]
            if missing:
                raise ConfigError(f"truth file missing ids (first 5): {missing[:5]}")
            backend, _ = _build_backend(backend_spec, corpus, None)
            backend_factory = lambda: backend  # noqa: E731
        setup = ExperimentSetup(
            corpus=corpus, task=task, truth=truth, backend_factory=backend_factory
        )
    except (ConfigError, ExpertError, ValueError) as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)

    try:
        report = sampling_comparison_experiment(
            setup,
            strategies=strategy_names,
            runs=runs,
            seed=seed,
            sample_fraction=sample_fraction,
            per_class_quota=quota,
        )
    except GatewayError as exc:
        click.echo(f"gateway failure: {exc}", err=True)
        sys.exit(EXIT_GATEWAY)

    payload = report.to_dict()
    if out_path:
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        Path(out_path).write_text(
            json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    click.echo(json.dumps(payload, indent=2, sort_keys=True))


@main.command("experiment-refinement")
@click.option("--backend", "backend_spec", required=True, help="Usually sim:SPEC.")
@click.option("--runs", type=int, default=6, show_default=True)
@click.option("--iterations", type=int, default=2, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--sample-fraction", type=float, default=0.10, show_default=True)
@click.option("--quota", type=int, default=10, show_default=True)
@click.option("--out", "out_path", default=None)
def cmd_experiment_refinement(
    backend_spec, runs, iterations, seed, sample_fraction, quota, out_path
) -> None:
    """Score every prompt version on held-out truth across independent runs."""
    try:
        if not backend_spec.startswith("sim:"):
            raise ConfigError("this experiment runs offline; use a sim: backend")
        world = SimWorld(SimSpec.parse(backend_spec[len("sim:"):]))
        task = _parse_task(
            ",".join(world.classes), "Assign the category that best fits each report."
        )
        setup = ExperimentSetup(
            corpus=world.corpus(),
            task=task,
            truth=world.truth_labels(),
            backend_factory=world.backend,
        )
    except (ConfigError, ValueError) as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    report = prompt_refinement_experiment(
        setup,
        runs=runs,
        iterations=iterations,
        seed=seed,
        sampling_params=SamplingParams(sample_fraction=sample_fraction, per_class_quota=quota),
    )
    payload = report.to_dict()
    if out_path:
        Path(out_path).write_text(
            json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    click.echo(json.dumps(payload, indent=2, sort_keys=True))


@main.command("evaluate")
@click.option("--results", "results_path", required=True, help="results.csv from a finalized run.")
@click.option("--truth", "truth_path", required=True, help="Ground truth CSV/JSON.")
@click.option("--truth-id-col", default="record_id", show_default=True)
@click.option("--truth-label-col", default="label", show_default=True)
@click.option("--slice-cols", default=None, help="Truth CSV columns to slice metrics by.")
@click.option("--classes", default=None, help="Comma-separated class names; defaults to truth labels.")
@click.option("--floor", type=float, default=None, help="Exit 4 if any macro metric falls below this.")
@click.option("--bootstrap-seed", type=int, default=0, show_default=True)
@click.option("--out", "out_path", default=None)
def cmd_evaluate(
    results_path, truth_path, truth_id_col, truth_label_col, slice_cols,
    classes, floor, bootstrap_seed, out_path,
) -> None:
    """Full metrics report with bootstrap CIs and optional bias slices."""
    import csv as csv_module

    try:
        predictions: dict[str, str] = {}
        with open(results_path, "r", encoding="utf-8", newline="") as handle:
            reader = csv_module.DictReader(handle)
            if reader.fieldnames is None or "record_id" not in reader.fieldnames:
                raise ConfigError(f"{results_path} needs a record_id column")
            if "predicted_class" not in reader.fieldnames:
                raise ConfigError(f"{results_path} needs a predicted_class column")
            for row in reader:
                predictions[row["record_id"]] = row["predicted_class"]
        truth = load_truth_file(truth_path, id_column=truth_id_col, label_column=truth_label_col)
        if not truth:
            raise ConfigError(f"{truth_path} holds no labels")
        missing = sorted(set(truth) - set(predictions))
        if missing:
            raise ConfigError(f"ids in truth but not in results (IdMismatch): {missing[:10]}")
        slice_columns = tuple(c.strip() for c in (slice_cols or "").split(",") if c.strip())
        slice_values: dict[str, dict[str, str]] = {col: {} for col in slice_columns}
        if slice_columns:
            if Path(truth_path).suffix.lower() == ".json":
                raise ConfigError("slicing needs a CSV truth file carrying the metadata columns")
            with open(truth_path, "r", encoding="utf-8", newline="") as handle:
                reader = csv_module.DictReader(handle)
                for col in slice_columns:
                    if col not in (reader.fieldnames or []):
                        raise ConfigError(f"slice column {col!r} not in {truth_path}")
                for row in reader:
                    for col in slice_columns:
                        slice_values[col][row[truth_id_col]] = row.get(col) or ""
        if classes:
            class_names = tuple(c.strip() for c in classes.split(",") if c.strip())
        else:
            class_names = tuple(sorted(set(truth.values())))
    except (ConfigError, ExpertError, OSError) as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)

    ids = sorted(truth)
    truths = [truth[i] for i in ids]
    preds = [predictions[i] for i in ids]
    report = evaluate_pairs(truths, preds, class_names)
    cis = {
        name: bootstrap_ci_pooled(
            [(truths, preds)], macro_metric(class_names, name), seed=bootstrap_seed
        ).to_dict()
        for name in ("precision", "recall", "f1")
    }
    payload: dict = {"metrics": report.to_dict(), "macro_ci": cis}
    if slice_columns:
        payload["slices"] = {
            col: {
                group: gr.to_dict()
                for group, gr in bias_slices(
                    truths, preds, [slice_values[col].get(i) for i in ids], class_names
                ).items()
            }
            for col in slice_columns
        }
    if out_path:
        Path(out_path).write_text(
            json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    click.echo(json.dumps(payload, indent=2, sort_keys=True))
    if floor is not None:
        macros = (report.macro.precision, report.macro.recall, report.macro.f1)
        if any(m < floor for m in macros):
            click.echo(f"gate failure: a macro metric fell below {floor}", err=True)
            sys.exit(EXIT_GATE)


@main.command("serve")
@click.option("--listen", default=None, help="host:port (default from ANNOTEER_LISTEN or 127.0.0.1:8787).")
@click.option("--data-dir", default="annoteer-data", show_default=True)
@click.option("--backend", "backend_spec", default=None, help="openai-compatible | mock:PATH | sim:SPEC")
@click.option("--model", default=None)
def cmd_serve(listen, data_dir, backend_spec, model) -> None:
    """Start the HTTP API (and the labeling UI if its build is present)."""
    import uvicorn

    from .api import create_app

    listen = listen or os.environ.get("ANNOTEER_LISTEN", "127.0.0.1:8787")
    host, _, port = listen.partition(":")
    try:
        backend, world = _build_backend(backend_spec or "openai-compatible", None, model)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    app = create_app(data_dir=data_dir, backend=backend)
    uvicorn.run(app, host=host or "127.0.0.1", port=int(port or "8787"))


if __name__ == "__main__":
    main()
