from __future__ import annotations

from fractions import Fraction

import numpy as np
import pytest

from models.entities import MetricsReport, ProblemSpec, StratumStats
from modules.analysis import zero_free_probability
from modules.evaluator import (
    comparison_table,
    empirical_gap,
    evaluate,
    gap_from_predictions,
    match_accuracy,
    sensitivity_summary,
    strata_frame,
    stratified_accuracy,
    summary_frame,
    tau_accuracy,
    tau_key,
    wrap_distance,
)
from modules.sampling import generate_dataset
from modules.transformer import build_model
from utils.error_handling import ConfigMismatchError, ShapeMismatchError, SpecValidationError
from utils.rng import Stream, make_rng


def test_wrap_distance_examples():
    assert wrap_distance(0, 96, 97) == 1
    assert wrap_distance(42, 42, 97) == 0
    assert wrap_distance(10.3, 50.3, 97) == pytest.approx(40.0)


def test_wrap_distance_properties():
    rng = make_rng(0, Stream.MONTE_CARLO)
    a = rng.random(1_000) * 31
    b = rng.random(1_000) * 31
    assert np.array_equal(wrap_distance(a, b, 31), wrap_distance(b, a, 31))
    assert np.all(wrap_distance(a, b, 31) <= 31 / 2)
    ints = np.arange(31)
    assert np.all(wrap_distance(ints[:, None], ints[None, :], 31)[~np.eye(31, dtype=bool)] >= 1)


def test_wrap_distance_rejects_out_of_range():
    with pytest.raises(SpecValidationError):
        wrap_distance(97, 0, 97)
    with pytest.raises(SpecValidationError):
        wrap_distance(-0.1, 0, 97)


def test_tau_accuracy_examples():
    labels = np.array([0, 5, 50])
    preds = np.array([96.5, 20.0, 10.0])
    assert tau_accuracy(preds, labels, 97, 0.5) == 1.0
    assert tau_accuracy(np.array([96.5]), np.array([0]), 97, 0.05) == 1.0
    assert tau_accuracy(labels.astype(float), labels, 97, 0.0) == 1.0


def test_tau_accuracy_is_monotone_in_tau():
    rng = make_rng(1, Stream.MONTE_CARLO)
    preds = rng.random(2_000) * 97
    labels = rng.integers(0, 97, 2_000)
    values = [tau_accuracy(preds, labels, 97, tau) for tau in np.linspace(0, 0.5, 21)]
    assert values == sorted(values)
    assert values[-1] == 1.0


def test_tau_accuracy_equals_match_accuracy_for_integer_predictions():
    rng = make_rng(2, Stream.MONTE_CARLO)
    labels = rng.integers(0, 31, 500)
    preds = np.where(rng.random(500) < 0.6, labels, rng.integers(0, 31, 500))
    assert tau_accuracy(preds.astype(float), labels, 31, 0.49 / 31) == match_accuracy(preds, labels)


def test_tau_accuracy_rejects_negative_tau():
    with pytest.raises(SpecValidationError):
        tau_accuracy(np.zeros(2), np.zeros(2), 5, -0.1)


def test_match_accuracy_examples():
    labels = np.arange(10)
    assert match_accuracy(labels, labels) == 1.0
    assert match_accuracy(labels + 1, labels) == 0.0
    assert match_accuracy(np.where(labels < 5, labels, 0), labels) == 0.5
    with pytest.raises(ShapeMismatchError):
        match_accuracy(labels[:3], labels)


def test_stratified_accuracy_buckets():
    inputs = np.array([[0, 0, 0], [1, 2, 3], [0, 1, 1], [4, 4, 4]])
    labels = np.array([0, 6, 2, 5])
    preds = np.array([0, 6, 1, 5])
    strata = stratified_accuracy(preds, labels, inputs)
    assert strata == {
        0: StratumStats(count=2, correct=2),
        1: StratumStats(count=1, correct=0),
        3: StratumStats(count=1, correct=1),
    }
    assert 2 not in strata


def test_uniform_zero_free_bucket_weight():
    data = generate_dataset(ProblemSpec(N=8, q=31), "uniform", 100_000, seed=3)
    strata = stratified_accuracy(data.y_q, data.y_q, data.x)
    weight = strata[0].count / len(data)
    expected = float(zero_free_probability(8, 31))
    assert expected == pytest.approx(0.769, abs=1e-3)
    assert abs(weight - expected) <= 4 * np.sqrt(expected * (1 - expected) / len(data))


def test_report_decomposition_is_exact(tiny_token_config, tiny_spec):
    data = generate_dataset(tiny_spec, "uniform", 300, seed=4)
    report = evaluate(build_model(tiny_token_config, seed=1), data, taus=(0.05, 0.1, 0.5))
    assert sum(s.count for s in report.stratified.values()) == 300
    assert report.overall_from_strata() == Fraction(report.correct, report.total)
    assert report.match_accuracy == report.correct / report.total
    assert set(report.tau_accuracy) == {"0.05", "0.1", "0.5"}
    assert report.tau_accuracy["0.5"] == 1.0
    assert report.tau_source == "integer_decode"
    assert report.meta["test_samples"] == 300
    assert report.meta["model_config_hash"] == build_model(tiny_token_config).config_hash


def test_evaluate_angular_model_uses_continuous_decode(tiny_angular_config, tiny_spec):
    data = generate_dataset(tiny_spec, "sparse", 100, seed=5)
    report = evaluate(build_model(tiny_angular_config, seed=1), data, meta={"method": "sparse"})
    assert report.tau_source == "angular_s_hat"
    assert report.meta["method"] == "sparse"
    assert report.meta["test_distribution"] == "sparse"


def test_evaluate_rejects_mismatched_modulus(tiny_token_config):
    data = generate_dataset(ProblemSpec(N=4, q=11), "uniform", 10, seed=0)
    with pytest.raises(ConfigMismatchError):
        evaluate(build_model(tiny_token_config), data)


def test_report_json_round_trip_keeps_integer_strata(tiny_token_config, tiny_spec):
    data = generate_dataset(tiny_spec, "uniform", 50, seed=6)
    report = evaluate(build_model(tiny_token_config), data)
    restored = MetricsReport.model_validate_json(report.model_dump_json())
    assert restored.stratified == report.stratified
    assert all(isinstance(k, int) for k in restored.stratified)


def test_report_frames(tiny_token_config, tiny_spec):
    data = generate_dataset(tiny_spec, "uniform", 50, seed=6)
    report = evaluate(build_model(tiny_token_config), data, taus=(0.05, 0.1))
    summary = summary_frame(report)
    assert list(summary.columns) == ["match_accuracy", "total", "tau_0.05", "tau_0.1", "tau_source"]
    strata = strata_frame(report)
    assert strata["count"].sum() == 50
    assert list(strata["n0"]) == sorted(strata["n0"])


# ------------------------------------------------------------------ gap


def test_gap_perfect_model():
    rng = make_rng(3, Stream.DATA)
    inputs = rng.integers(0, 7, size=(200, 4))
    gap = gap_from_predictions(np.ones(50, bool), np.ones(200, bool), inputs, 7)
    assert (gap.train_risk, gap.test_risk, gap.zero_free_error) == (0.0, 0.0, 0.0)
    assert gap.bound_check
    assert gap.prefactor == pytest.approx((6 / 7) ** 4)


def test_gap_wrong_only_on_zero_free_inputs():
    inputs = np.array([[1, 2, 3], [0, 1, 2], [4, 5, 6], [0, 0, 1], [3, 3, 3]])
    correct = (inputs == 0).any(axis=1)
    gap = gap_from_predictions(np.ones(10, bool), correct, inputs, 7)
    assert gap.zero_free_error == 1.0
    assert gap.zero_free_weight == pytest.approx(3 / 5)
    assert gap.test_risk == pytest.approx(gap.zero_free_weight * 1.0)
    assert gap.predicted_lower_bound == pytest.approx((6 / 7) ** 3)
    assert gap.bound_check


def test_gap_without_zero_free_inputs_reports_absence():
    inputs = np.zeros((5, 3), dtype=int)
    gap = gap_from_predictions(np.ones(5, bool), np.zeros(5, bool), inputs, 7)
    assert gap.zero_free_error is None
    assert gap.bound_check is None
    assert gap.test_risk == 1.0


def test_empirical_gap_on_model(tiny_token_config, tiny_spec):
    model = build_model(tiny_token_config, seed=2)
    train_set = generate_dataset(tiny_spec, "sparse", 100, seed=1)
    test_set = generate_dataset(tiny_spec, "uniform", 200, seed=2)
    gap = empirical_gap(model, train_set, test_set, tiny_spec)
    assert 0.0 <= gap.train_risk <= 1.0
    assert gap.bound_check in (True, None)


# --------------------------------------------------------------- tables


def _report(method: str, samples: int, N: int, q: int, K: int, r: float, accuracy: float) -> MetricsReport:
    total = 1_000
    return MetricsReport(
        match_accuracy=accuracy,
        tau_accuracy={"0.05": min(1.0, accuracy + 0.1)},
        total=total,
        correct=round(accuracy * total),
        meta={"method": method, "train_samples": samples, "spec": {"N": N, "q": q, "K": K, "r": r}},
    )


def test_comparison_table_layout():
    reports = [
        _report("aux", 100_000, 8, 31, 5, 0.2, 0.891),
        _report("aux", 100_000, 8, 31, 5, 0.2, 0.871),
        _report("sparse", 100_000, 8, 31, 1, 0.0, 0.032),
        _report("aux", 1_000_000, 16, 97, 4, 0.4, 0.5),
    ]
    table = comparison_table(reports)
    assert table.loc[(8, 31), ("aux", 100_000)] == pytest.approx(88.1)
    assert table.loc[(8, 31), ("sparse", 100_000)] == pytest.approx(3.2)
    assert np.isnan(table.loc[(16, 97), ("sparse", 100_000)])
    assert comparison_table(reports, "tau_0.05").loc[(16, 97), ("aux", 1_000_000)] == pytest.approx(60.0)
    with pytest.raises(SpecValidationError):
        comparison_table(reports, "tau_0.2")


def test_sensitivity_summary_min_avg_max():
    grid = [
        _report("aux", 100_000, 8, 31, K, r, acc)
        for (K, r), acc in {(4, 0.1): 0.4, (5, 0.2): 0.9, (6, 0.3): 0.5}.items()
    ]
    baseline = [_report("sparse", 100_000, 8, 31, 1, 0.0, 0.05)]
    summary = sensitivity_summary(grid, baseline)
    row = summary.iloc[0]
    assert (row["min"], row["max"]) == pytest.approx((40.0, 90.0))
    assert row["avg"] == pytest.approx(60.0)
    assert row["cells"] == 3
    assert (row["best_K"], row["best_r"]) == (5, 0.2)
    assert row["gain_max"] == pytest.approx(85.0)


def test_sensitivity_summary_of_nothing():
    assert sensitivity_summary([]).empty


def test_tau_key_formatting():
    assert [tau_key(t) for t in (0.05, 0.1, 0.01)] == ["0.05", "0.1", "0.01"]
