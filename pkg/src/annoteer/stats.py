"""Evaluation statistics: confusion-matrix metrics with macro aggregation,
pooled and stratified bootstrap confidence intervals, a paired permutation
test, the Mann-Whitney U test (exact at small n), and per-group bias slices.

All stochastic operations are bit-reproducible under a fixed seed; resample
RNG substreams are derived from (seed, run index, resample index) so results
are identical at any internal parallelism level.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations
from typing import Callable, Mapping, Sequence

import numpy as np


class StatsError(ValueError):
    pass


class LengthMismatch(StatsError):
    pass


class UnknownTruthLabel(StatsError):
    pass


class EmptyRun(StatsError):
    pass


class MissingClassInRun(StatsError):
    pass


class EmptyGroup(StatsError):
    pass


# --- confusion matrix and point metrics --------------------------------------


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts with rows = true class, columns = predicted class. Predictions
    that parsed to no class are tallied separately per true class: they count
    against every true class's recall but no class's precision."""

    classes: tuple[str, ...]
    counts: tuple[tuple[int, ...], ...]
    parse_failures: tuple[int, ...]

    @property
    def total(self) -> int:
        return sum(sum(row) for row in self.counts) + sum(self.parse_failures)


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass(frozen=True)
class MacroMetrics:
    precision: float
    recall: float
    f1: float


@dataclass(frozen=True)
class MetricsReport:
    per_class: Mapping[str, ClassMetrics]
    macro: MacroMetrics
    accuracy: float
    n_evaluated: int
    n_parse_failures: int
    degenerate_classes: tuple[str, ...]

    def to_dict(self) -> dict:
        return {
            "per_class": {
                c: {
                    "precision": m.precision,
                    "recall": m.recall,
                    "f1": m.f1,
                    "support": m.support,
                }
                for c, m in self.per_class.items()
            },
            "macro": {
                "precision": self.macro.precision,
                "recall": self.macro.recall,
                "f1": self.macro.f1,
            },
            "accuracy": self.accuracy,
            "n_evaluated": self.n_evaluated,
            "n_parse_failures": self.n_parse_failures,
            "degenerate_classes": list(self.degenerate_classes),
        }


def confusion_matrix(
    truths: Sequence[str],
    predictions: Sequence[str],
    classes: Sequence[str],
) -> ConfusionMatrix:
    if len(truths) != len(predictions):
        raise LengthMismatch(f"{len(truths)} truths vs {len(predictions)} predictions")
    index = {c: i for i, c in enumerate(classes)}
    lowered = {c.lower(): i for i, c in enumerate(classes)}
    counts = [[0] * len(classes) for _ in classes]
    failures = [0] * len(classes)
    for truth, pred in zip(truths, predictions):
        ti = index.get(truth)
        if ti is None:
            raise UnknownTruthLabel(f"truth label {truth!r} is not a class")
        pi = lowered.get(str(pred).strip().lower())
        if pi is None:
            failures[ti] += 1
        else:
            counts[ti][pi] += 1
    return ConfusionMatrix(
        classes=tuple(classes),
        counts=tuple(tuple(row) for row in counts),
        parse_failures=tuple(failures),
    )


def metrics(cm: ConfusionMatrix) -> MetricsReport:
    """Per-class precision/recall/F1 and their unweighted macro means.

    A class with an undefined 0/0 ratio scores 0 and is flagged as
    degenerate rather than dropped, so macro values stay comparable between
    runs."""
    k = len(cm.classes)
    per_class: dict[str, ClassMetrics] = {}
    degenerate: list[str] = []
    precisions: list[float] = []
    recalls: list[float] = []
    f1s: list[float] = []
    for i, cls in enumerate(cm.classes):
        tp = cm.counts[i][i]
        predicted = sum(cm.counts[t][i] for t in range(k))
        true_total = sum(cm.counts[i]) + cm.parse_failures[i]
        flagged = False
        if predicted == 0:
            precision = 0.0
            flagged = True
        else:
            precision = tp / predicted
        if true_total == 0:
            recall = 0.0
            flagged = True
        else:
            recall = tp / true_total
        if precision + recall == 0.0:
            f1 = 0.0
        else:
            f1 = (2 * precision * recall) / (precision + recall)
        if flagged:
            degenerate.append(cls)
        per_class[cls] = ClassMetrics(precision=precision, recall=recall, f1=f1, support=true_total)
        precisions.append(precision)
        recalls.append(recall)
        f1s.append(f1)
    total = cm.total
    trace = sum(cm.counts[i][i] for i in range(k))
    return MetricsReport(
        per_class=per_class,
        macro=MacroMetrics(
            precision=sum(precisions) / k,
            recall=sum(recalls) / k,
            f1=sum(f1s) / k,
        ),
        accuracy=(trace / total) if total else 0.0,
        n_evaluated=total,
        n_parse_failures=sum(cm.parse_failures),
        degenerate_classes=tuple(degenerate),
    )


def evaluate_pairs(
    truths: Sequence[str], predictions: Sequence[str], classes: Sequence[str]
) -> MetricsReport:
    return metrics(confusion_matrix(truths, predictions, classes))


# --- metric selectors for resampling ------------------------------------------

MetricFn = Callable[[Sequence[str], Sequence[str]], float]


def macro_metric(classes: Sequence[str], which: str = "f1") -> MetricFn:
    """Selector for a macro-level metric ("precision", "recall", "f1",
    or "accuracy")."""

    def fn(truths: Sequence[str], predictions: Sequence[str]) -> float:
        report = evaluate_pairs(truths, predictions, classes)
        if which == "accuracy":
            return report.accuracy
        return getattr(report.macro, which)

    return fn


def class_metric(classes: Sequence[str], target_class: str, which: str = "f1") -> MetricFn:
    """Selector for one class's precision/recall/F1."""
    if target_class not in classes:
        raise StatsError(f"{target_class!r} is not a class")

    def fn(truths: Sequence[str], predictions: Sequence[str]) -> float:
        report = evaluate_pairs(truths, predictions, classes)
        return getattr(report.per_class[target_class], which)

    return fn


# --- bootstrap -----------------------------------------------------------------


@dataclass(frozen=True)
class CIResult:
    point_estimate: float
    lower_95: float
    upper_95: float
    n_resamples: int
    method: str

    def __post_init__(self) -> None:
        if self.lower_95 > self.upper_95:
            raise StatsError("lower bound above upper bound")

    def to_dict(self) -> dict:
        return {
            "point_estimate": self.point_estimate,
            "lower_95": self.lower_95,
            "upper_95": self.upper_95,
            "n_resamples": self.n_resamples,
            "method": self.method,
        }


RunPairs = tuple[Sequence[str], Sequence[str]]


def _check_runs(per_run_pairs: Sequence[RunPairs]) -> None:
    if not per_run_pairs:
        raise EmptyRun("need at least one run")
    for i, (truths, preds) in enumerate(per_run_pairs):
        if len(truths) == 0:
            raise EmptyRun(f"run {i} is empty")
        if len(truths) != len(preds):
            raise LengthMismatch(f"run {i}: {len(truths)} truths vs {len(preds)} predictions")


def _resample_rng(seed: int, run_index: int, resample_index: int) -> np.random.Generator:
    return np.random.default_rng([seed, run_index, resample_index])


def bootstrap_ci_pooled(
    per_run_pairs: Sequence[RunPairs],
    metric: MetricFn,
    n_resamples: int = 1000,
    seed: int = 0,
) -> CIResult:
    """Percentile bootstrap CI pooled across runs.

    Within each run, draws n_resamples resamples with replacement of the
    (truth, prediction) pairs and computes the metric per resample; the
    bootstrap distributions of all runs are pooled and the CI taken at the
    2.5th/97.5th percentiles. The point estimate is the mean of the per-run
    full-sample metrics.
    """
    _check_runs(per_run_pairs)
    pooled: list[float] = []
    full_values: list[float] = []
    for run_index, (truths, preds) in enumerate(per_run_pairs):
        truths = list(truths)
        preds = list(preds)
        n = len(truths)
        full_values.append(metric(truths, preds))
        for b in range(n_resamples):
            rng = _resample_rng(seed, run_index, b)
            idx = rng.integers(0, n, size=n)
            pooled.append(metric([truths[i] for i in idx], [preds[i] for i in idx]))
    lower, upper = np.percentile(pooled, [2.5, 97.5])
    return CIResult(
        point_estimate=float(np.mean(full_values)),
        lower_95=float(lower),
        upper_95=float(upper),
        n_resamples=n_resamples,
        method="pooled",
    )


def stratified_resample_indices(truths: Sequence[str], rng: np.random.Generator) -> list[int]:
    """One stratified resample: indices drawn with replacement within each
    true-class stratum, preserving every stratum's size exactly."""
    strata: dict[str, list[int]] = {}
    for i, t in enumerate(truths):
        strata.setdefault(t, []).append(i)
    indices: list[int] = []
    for stratum_indices in strata.values():
        picks = rng.integers(0, len(stratum_indices), size=len(stratum_indices))
        indices.extend(stratum_indices[p] for p in picks)
    return indices


def bootstrap_ci_stratified(
    per_run_pairs: Sequence[RunPairs],
    target_class: str,
    classes: Sequence[str],
    which: str = "f1",
    n_resamples: int = 1000,
    seed: int = 0,
) -> CIResult:
    """Stratified percentile bootstrap for a per-class metric: every resample
    draws with replacement within each true-class stratum, so the resampled
    run preserves the original per-class counts exactly.
    """
    _check_runs(per_run_pairs)
    metric = class_metric(classes, target_class, which)
    pooled: list[float] = []
    full_values: list[float] = []
    for run_index, (truths, preds) in enumerate(per_run_pairs):
        truths = list(truths)
        preds = list(preds)
        if target_class not in truths:
            raise MissingClassInRun(f"run {run_index} has no true {target_class!r}")
        full_values.append(metric(truths, preds))
        for b in range(n_resamples):
            rng = _resample_rng(seed, run_index, b)
            indices = stratified_resample_indices(truths, rng)
            pooled.append(metric([truths[i] for i in indices], [preds[i] for i in indices]))
    lower, upper = np.percentile(pooled, [2.5, 97.5])
    return CIResult(
        point_estimate=float(np.mean(full_values)),
        lower_95=float(lower),
        upper_95=float(upper),
        n_resamples=n_resamples,
        method="stratified",
    )


# --- permutation test ------------------------------------------------------------


@dataclass(frozen=True)
class PermutationResult:
    statistic: float
    p_value: float
    n_perms: int

    def to_dict(self) -> dict:
        return {"statistic": self.statistic, "p_value": self.p_value, "n_perms": self.n_perms}


def permutation_test_paired(
    correct_a: Sequence[int],
    correct_b: Sequence[int],
    n_perms: int = 10000,
    seed: int = 0,
) -> PermutationResult:
    """Paired sign-flip permutation test on per-record correctness.

    The statistic is mean(correct_b) - mean(correct_a). The null swaps each
    record's (a, b) pair independently with probability 1/2 per permutation;
    the two-sided p-value is the smoothed proportion of null statistics at
    least as extreme as the observed one: (count + 1) / (n_perms + 1).
    """
    if len(correct_a) != len(correct_b):
        raise LengthMismatch(f"{len(correct_a)} vs {len(correct_b)} records")
    n = len(correct_a)
    if n == 0:
        raise EmptyRun("no records")
    a = np.asarray(correct_a, dtype=np.int64)
    b = np.asarray(correct_b, dtype=np.int64)
    diffs = b - a
    observed_sum = int(diffs.sum())

    count = 0
    chunk = 2000
    done = 0
    while done < n_perms:
        take = min(chunk, n_perms - done)
        rng = np.random.default_rng([seed, done])
        signs = rng.integers(0, 2, size=(take, n), dtype=np.int64) * 2 - 1
        null_sums = signs @ diffs
        count += int(np.count_nonzero(np.abs(null_sums) >= abs(observed_sum)))
        done += take
    p = (count + 1) / (n_perms + 1)
    return PermutationResult(statistic=observed_sum / n, p_value=p, n_perms=n_perms)


# --- Mann-Whitney U ---------------------------------------------------------------

EXACT_ENUMERATION_LIMIT = 16


@dataclass(frozen=True)
class MannWhitneyResult:
    u: float
    p_two_sided: float
    method: str

    def to_dict(self) -> dict:
        return {"U": self.u, "p_two_sided": self.p_two_sided, "method": self.method}


def _midranks(values: Sequence[float]) -> list[float]:
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        mean_rank = (i + j) / 2 + 1
        for k in range(i, j + 1):
            ranks[order[k]] = mean_rank
        i = j + 1
    return ranks


def mann_whitney_u(group_a: Sequence[float], group_b: Sequence[float]) -> MannWhitneyResult:
    """Mann-Whitney U with midrank tie handling.

    Returns U for group_a (rank-sum form). The two-sided p-value is exact by
    full enumeration of the C(n_a + n_b, n_a) group assignments whenever the
    pooled size is at most 16, counting assignments whose U deviates from the
    null mean n_a*n_b/2 at least as much as the observed U; larger samples
    use the normal approximation with tie and continuity corrections.
    """
    n_a, n_b = len(group_a), len(group_b)
    if n_a == 0 or n_b == 0:
        raise EmptyGroup("both groups must be non-empty")
    pooled = list(group_a) + list(group_b)
    ranks = _midranks(pooled)
    rank_sum_a = sum(ranks[:n_a])
    u_a = rank_sum_a - n_a * (n_a + 1) / 2

    if n_a + n_b <= EXACT_ENUMERATION_LIMIT:
        # Work in doubled ranks so midranks stay integral and comparisons exact.
        ranks2 = [round(2 * r) for r in ranks]
        target = round(abs(2 * u_a - n_a * n_b))
        offset = n_a * (n_a + 1)
        hits = 0
        total = 0
        for combo in combinations(range(n_a + n_b), n_a):
            u2 = sum(ranks2[i] for i in combo) - offset
            if abs(u2 - n_a * n_b) >= target:
                hits += 1
            total += 1
        return MannWhitneyResult(u=u_a, p_two_sided=hits / total, method="exact")

    mu = n_a * n_b / 2
    n = n_a + n_b
    tie_counts: dict[float, int] = {}
    for v in pooled:
        tie_counts[v] = tie_counts.get(v, 0) + 1
    tie_term = sum(t**3 - t for t in tie_counts.values())
    sigma_sq = (n_a * n_b / 12) * ((n + 1) - tie_term / (n * (n - 1)))
    if sigma_sq <= 0:
        return MannWhitneyResult(u=u_a, p_two_sided=1.0, method="normal")
    diff = u_a - mu
    if diff == 0:
        z = 0.0
    else:
        z = (diff - 0.5 * math.copysign(1, diff)) / math.sqrt(sigma_sq)
    p = 2 * 0.5 * math.erfc(abs(z) / math.sqrt(2))
    return MannWhitneyResult(u=u_a, p_two_sided=min(1.0, p), method="normal")


# --- bias slices -----------------------------------------------------------------

NOT_SPECIFIED = "Not Specified"
DEFAULT_MIN_GROUP_SIZE = 10


@dataclass(frozen=True)
class GroupReport:
    group: str
    report: MetricsReport
    n: int
    low_n: bool

    def to_dict(self) -> dict:
        return {"group": self.group, "n": self.n, "low_n": self.low_n, **self.report.to_dict()}


def bias_slices(
    truths: Sequence[str],
    predictions: Sequence[str],
    group_values: Sequence[str | None],
    classes: Sequence[str],
    min_group_size: int = DEFAULT_MIN_GROUP_SIZE,
) -> dict[str, GroupReport]:
    """Metrics per demographic group. Records with a missing or empty group
    value fall into the "Not Specified" group; groups below min_group_size
    are flagged low-n rather than dropped."""
    if not (len(truths) == len(predictions) == len(group_values)):
        raise LengthMismatch("truths, predictions and group_values must align")
    grouped: dict[str, list[int]] = {}
    for i, value in enumerate(group_values):
        name = str(value).strip() if value is not None and str(value).strip() else NOT_SPECIFIED
        grouped.setdefault(name, []).append(i)
    out: dict[str, GroupReport] = {}
    for name in sorted(grouped):
        idx = grouped[name]
        report = evaluate_pairs([truths[i] for i in idx], [predictions[i] for i in idx], classes)
        out[name] = GroupReport(
            group=name, report=report, n=len(idx), low_n=len(idx) < min_group_size
        )
    return out
