"""Match accuracy, tau-accuracy, zero-count stratification and report tables."""

from __future__ import annotations

import logging
from collections import defaultdict
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd

from models.entities import (
    EmbeddingKind,
    GapReport,
    MetricsReport,
    ProblemSpec,
    StratumStats,
)
from modules.analysis import zero_free_probability
from modules.sampling import Dataset, zero_counts
from modules.transformer import TransformerModel
from utils.error_handling import ConfigMismatchError, ShapeMismatchError, SpecValidationError

logger = logging.getLogger(__name__)

DEFAULT_TAUS = (0.05, 0.1)


def tau_key(tau: float) -> str:
    return f"{tau:g}"


def wrap_distance(a: np.ndarray | float, b: np.ndarray | float, q: int) -> np.ndarray | float:
    """Circular distance min(|a - b|, q - |a - b|) on [0, q)."""

    a_arr = np.asarray(a, dtype=np.float64)
    b_arr = np.asarray(b, dtype=np.float64)
    for name, arr in (("a", a_arr), ("b", b_arr)):
        if ((arr < 0) | (arr >= q)).any():
            raise SpecValidationError(f"wrap_distance: {name} must lie in [0, {q})")
    gap = np.abs(a_arr - b_arr)
    distance = np.minimum(gap, q - gap)
    return float(distance) if distance.ndim == 0 else distance


def _same_length(*arrays: np.ndarray) -> None:
    lengths = {len(a) for a in arrays}
    if len(lengths) > 1:
        raise ShapeMismatchError(f"length mismatch: {sorted(lengths)}")


def tau_accuracy(preds: np.ndarray, labels: np.ndarray, q: int, tau: float) -> float:
    """Fraction of predictions within circular distance tau*q of the label."""

    if tau < 0:
        raise SpecValidationError(f"tau must be non-negative, got {tau}")
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels)
    _same_length(preds, labels)
    if not len(preds):
        return 0.0
    return float(np.mean(wrap_distance(preds, labels, q) <= tau * q))


def match_accuracy(preds: np.ndarray, labels: np.ndarray) -> float:
    preds, labels = np.asarray(preds), np.asarray(labels)
    _same_length(preds, labels)
    if not len(preds):
        return 0.0
    return float(np.mean(preds == labels))


def stratified_accuracy(
    preds: np.ndarray, labels: np.ndarray, inputs: np.ndarray
) -> Dict[int, StratumStats]:
    """Exact (count, correct) per zero count n0(x); empty buckets are absent."""

    preds, labels, inputs = np.asarray(preds), np.asarray(labels), np.asarray(inputs)
    _same_length(preds, labels, inputs)
    n0 = zero_counts(inputs)
    hits = preds == labels
    counts = np.bincount(n0, minlength=inputs.shape[1] + 1 if inputs.ndim == 2 else 1)
    correct = np.bincount(n0, weights=hits, minlength=len(counts)).astype(np.int64)
    return {
        int(bucket): StratumStats(count=int(counts[bucket]), correct=int(correct[bucket]))
        for bucket in np.flatnonzero(counts)
    }


def _check_dataset(model: TransformerModel, dataset: Dataset) -> None:
    spec = model.config.spec
    if (dataset.meta.N, dataset.meta.q) != (spec.N, spec.q):
        raise ConfigMismatchError(
            f"checkpoint expects N={spec.N}, q={spec.q} but the test data has "
            f"N={dataset.meta.N}, q={dataset.meta.q}",
            suggestion="Generate the test set with the checkpoint's --n and --q",
        )


def evaluate(
    model: TransformerModel,
    dataset: Dataset,
    taus: Sequence[float] = DEFAULT_TAUS,
    *,
    meta: Optional[Mapping[str, object]] = None,
    batch_size: int = 1024,
) -> MetricsReport:
    """Every metric for ``model`` on ``dataset`` in one pass."""

    _check_dataset(model, dataset)
    q = dataset.meta.q
    preds, continuous = model.predict(dataset.x, batch_size=batch_size).decode(q)
    angular = model.config.embedding_kind is EmbeddingKind.DUAL_ANGULAR
    strata = stratified_accuracy(preds, dataset.y_q, dataset.x)
    report = MetricsReport(
        match_accuracy=match_accuracy(preds, dataset.y_q),
        tau_accuracy={tau_key(t): tau_accuracy(continuous, dataset.y_q, q, t) for t in taus},
        stratified=strata,
        total=len(dataset),
        correct=int(np.sum(preds == dataset.y_q)),
        tau_source="angular_s_hat" if angular else "integer_decode",
        meta={
            "spec": model.config.spec.model_dump(),
            "model_config_hash": model.config_hash,
            "embedding": model.config.embedding_kind.value,
            "test_distribution": dataset.meta.distribution.value,
            "test_seed": dataset.meta.seed,
            "test_samples": len(dataset),
            **dict(meta or {}),
        },
    )
    logger.info(
        "Evaluated %d examples: match %.4f, %s",
        report.total,
        report.match_accuracy,
        ", ".join(f"tau={k}: {v:.4f}" for k, v in report.tau_accuracy.items()),
    )
    return report


def gap_from_predictions(
    train_correct: np.ndarray,
    test_correct: np.ndarray,
    test_inputs: np.ndarray,
    q: int,
) -> GapReport:
    """Zero-free decomposition of the train/test 0-1 risks."""

    train_correct = np.asarray(train_correct, dtype=bool)
    test_correct = np.asarray(test_correct, dtype=bool)
    _same_length(test_correct, test_inputs)
    N = int(np.asarray(test_inputs).shape[1])
    train_risk = float(1.0 - train_correct.mean()) if len(train_correct) else 0.0
    test_wrong = int((~test_correct).sum())
    test_risk = test_wrong / len(test_correct) if len(test_correct) else 0.0

    zero_free = zero_counts(test_inputs) == 0
    stratum = int(zero_free.sum())
    weight = stratum / len(test_correct) if len(test_correct) else 0.0
    prefactor = float(zero_free_probability(N, q))
    if stratum == 0:
        return GapReport(
            train_risk=train_risk,
            test_risk=test_risk,
            zero_free_error=None,
            zero_free_weight=weight,
            prefactor=prefactor,
        )
    stratum_wrong = int((~test_correct[zero_free]).sum())
    epsilon = stratum_wrong / stratum
    return GapReport(
        train_risk=train_risk,
        test_risk=test_risk,
        zero_free_error=epsilon,
        zero_free_weight=weight,
        prefactor=prefactor,
        predicted_lower_bound=prefactor * epsilon - train_risk,
        # test_risk >= weight * epsilon, compared on integer counts
        bound_check=test_wrong >= stratum_wrong,
    )


def empirical_gap(
    model: TransformerModel, train_set: Dataset, test_set: Dataset, spec: ProblemSpec
) -> GapReport:
    for dataset in (train_set, test_set):
        _check_dataset(model, dataset)
    train_preds, _ = model.predict(train_set.x).decode(spec.q)
    test_preds, _ = model.predict(test_set.x).decode(spec.q)
    return gap_from_predictions(
        train_preds == train_set.y_q, test_preds == test_set.y_q, test_set.x, spec.q
    )


def strata_frame(report: MetricsReport) -> pd.DataFrame:
    rows = [
        {"n0": n0, "count": s.count, "correct": s.correct, "accuracy": s.accuracy}
        for n0, s in sorted(report.stratified.items())
    ]
    return pd.DataFrame(rows, columns=["n0", "count", "correct", "accuracy"])


def summary_frame(report: MetricsReport) -> pd.DataFrame:
    row: Dict[str, object] = {"match_accuracy": report.match_accuracy, "total": report.total}
    row.update({f"tau_{k}": v for k, v in report.tau_accuracy.items()})
    row["tau_source"] = report.tau_source
    return pd.DataFrame([row])


def _long_frame(reports: Iterable[MetricsReport]) -> pd.DataFrame:
    rows: List[Dict[str, object]] = []
    for report in reports:
        spec = report.meta.get("spec", {})
        row = {
            "method": report.meta.get("method", "aux"),
            "train_samples": report.meta.get("train_samples"),
            "N": spec.get("N"),
            "q": spec.get("q"),
            "K": spec.get("K"),
            "r": spec.get("r"),
            "match_accuracy": 100.0 * report.match_accuracy,
        }
        row.update({f"tau_{k}": 100.0 * v for k, v in report.tau_accuracy.items()})
        rows.append(row)
    return pd.DataFrame(rows)


def comparison_table(
    reports: Sequence[MetricsReport], metric: str = "match_accuracy"
) -> pd.DataFrame:
    """
    Method x training-sample-size columns against (N, q) rows, in percent.

    Cells that were run more than once (several seeds) show the mean.
    """

    frame = _long_frame(reports)
    if frame.empty:
        return frame
    if metric not in frame.columns:
        raise SpecValidationError(f"no metric {metric!r} in the reports")
    table = frame.pivot_table(
        index=["N", "q"], columns=["method", "train_samples"], values=metric, aggfunc="mean"
    )
    return table.round(1)


def sensitivity_summary(
    reports: Sequence[MetricsReport],
    baseline: Optional[Sequence[MetricsReport]] = None,
) -> pd.DataFrame:
    """Min / Avg / Max match accuracy across a (K, r) grid, per (N, q)."""

    frame = _long_frame(reports)
    if frame.empty:
        return pd.DataFrame(columns=["N", "q", "min", "avg", "max", "cells"])
    summary = (
        frame.groupby(["N", "q"])["match_accuracy"]
        .agg(["min", "mean", "max", "count"])
        .rename(columns={"mean": "avg", "count": "cells"})
        .reset_index()
    )
    best = frame.loc[frame.groupby(["N", "q"])["match_accuracy"].idxmax(), ["N", "q", "K", "r"]]
    summary = summary.merge(
        best.rename(columns={"K": "best_K", "r": "best_r"}), on=["N", "q"], how="left"
    )
    if baseline:
        base = defaultdict(list)
        for report in baseline:
            spec = report.meta.get("spec", {})
            base[(spec.get("N"), spec.get("q"))].append(100.0 * report.match_accuracy)
        summary["baseline"] = [
            float(np.mean(base[(n, q)])) if base.get((n, q)) else np.nan
            for n, q in zip(summary["N"], summary["q"])
        ]
        for column in ("min", "avg", "max"):
            summary[f"gain_{column}"] = summary[column] - summary["baseline"]
    return summary


__all__ = [
    "DEFAULT_TAUS",
    "comparison_table",
    "empirical_gap",
    "evaluate",
    "gap_from_predictions",
    "match_accuracy",
    "sensitivity_summary",
    "strata_frame",
    "stratified_accuracy",
    "summary_frame",
    "tau_accuracy",
    "tau_key",
    "wrap_distance",
]
