import json
from dataclasses import replace

import numpy as np
import numpy.testing as npt
import pandas as pd
import pytest

from gzsl_lab.errors import ContractError
from gzsl_lab.evaluator import (
    EvalReport,
    Evaluator,
    affinity_frames,
    attribute_predictions,
    calibrated_predict,
    calibrated_predictions,
    default_gammas,
    distribution_summary,
    export_affinities,
    export_attribute_predictions,
    export_distributions,
    harmonic_mean,
    per_class_accuracy,
)
from gzsl_lab.trainer import prepare_model

from conftest import perturb_parameters, tiny_run_config


@pytest.fixture
def evaluator(tiny_dataset):
    _, model = prepare_model(tiny_run_config(), tiny_dataset)
    perturb_parameters(model, seed=11)
    return Evaluator(model, tiny_dataset)


class TestMetrics:

    def test_harmonic_mean_reference_row(self):
        assert 100 * harmonic_mean(0.736, 0.773) == pytest.approx(75.40, abs=0.01)

    def test_harmonic_mean_of_zeros(self):
        assert harmonic_mean(0.0, 0.0) == 0.0

    def test_gamma_zero_is_argmax(self, rng):
        scores = rng.standard_normal((50, 6))
        seen = np.array([True, True, True, False, False, False])
        npt.assert_array_equal(calibrated_predictions(scores, seen, 0.0), np.argmax(scores, axis=1))

    def test_large_gamma_predicts_no_seen_class(self, rng):
        tau = 20.0
        scores = rng.uniform(-tau, tau, size=(50, 6))
        seen = np.array([True, True, True, False, False, False])
        predictions = calibrated_predictions(scores, seen, 2 * tau + 1e-9)
        assert not seen[predictions].any()

    def test_calibration_flips_a_close_call(self):
        seen = np.array([True, False])
        assert calibrated_predict(np.array([0.9, 0.85]), 0.0, seen) == 0
        assert calibrated_predict(np.array([0.9, 0.85]), 0.1, seen) == 1

    def test_ties_go_to_lowest_class(self):
        assert calibrated_predict(np.array([1.0, 3.0, 3.0]), 0.0, np.array([True, False, False])) == 1

    def test_per_class_accuracy(self):
        table = per_class_accuracy(np.array([0, 0, 1, 2]), np.array([0, 1, 1, 1]))
        assert table == {0: 1.0, 1: pytest.approx(1 / 3)}

    def test_default_gammas_span_tau(self):
        gammas = default_gammas(20.0, steps=5)
        npt.assert_allclose(gammas, [0.0, 5.0, 10.0, 15.0, 20.0])


class TestEvaluator:

    def test_report_fields(self, evaluator):
        report = evaluator.evaluate(0.0)
        assert 0.0 <= report.U <= 1.0 and 0.0 <= report.S <= 1.0
        assert report.H == pytest.approx(harmonic_mean(report.U, report.S))
        assert len(report.records) == (
            evaluator.dataset.split("seen_test").size + evaluator.dataset.split("unseen_test").size
        )

    def test_sweep_is_monotone(self, evaluator):
        result = evaluator.sweep(np.linspace(0.0, 2 * evaluator.tau + 1.0, 25))
        u = [r.U for r in result.reports]
        s = [r.S for r in result.reports]
        assert all(b >= a for a, b in zip(u, u[1:]))
        assert all(b <= a for a, b in zip(s, s[1:]))
        assert s[-1] == 0.0

    def test_single_step_sweep_equals_evaluate(self, evaluator):
        swept = evaluator.sweep([3.0]).best
        direct = evaluator.evaluate(3.0)
        assert (swept.U, swept.S, swept.H) == (direct.U, direct.S, direct.H)

    def test_unsorted_gammas_are_rejected(self, evaluator):
        with pytest.raises(ContractError):
            evaluator.sweep([1.0, 0.5])

    def test_best_prefers_lowest_gamma_on_ties(self, evaluator):
        result = evaluator.sweep([0.0, 0.0, 0.0])
        assert result.best is result.reports[0]

    def test_zsl_predicts_unseen_only(self, evaluator):
        report = evaluator.evaluate_zsl()
        unseen = set(evaluator.dataset.unseen_classes.tolist())
        assert report.mode == "zsl"
        assert all(record["prediction"] in unseen for record in report.records)

    def test_per_sample_averaging(self, evaluator):
        report = evaluator.evaluate(0.0, per_sample=True)
        assert report.averaging == "per-sample"

    def test_report_round_trip(self, evaluator, tmp_path):
        report = evaluator.evaluate(2.0)
        assert EvalReport.load(report.save(tmp_path / "report.json")) == report

    def test_sweep_csv(self, evaluator, tmp_path):
        path = evaluator.sweep(default_gammas(evaluator.tau, 5)).save(tmp_path / "sweep.csv")
        frame = pd.read_csv(path)
        assert list(frame.columns) == ["gamma", "U", "S", "H"]
        assert len(frame) == 5

    def test_seen_train_accuracy_in_range(self, evaluator):
        assert 0.0 <= evaluator.seen_train_accuracy() <= 1.0


class TestExports:

    def test_distribution_summary_math(self):
        frame = pd.DataFrame({
            "seen_mean": [1.0, 3.0],
            "seen_var": [0.5, 1.5],
            "unseen_mean": [0.0, 1.0],
            "unseen_var": [2.0, 2.0],
        })
        summary = distribution_summary(frame)
        assert summary["alpha_s"] == 2.0 and summary["alpha_u"] == 0.5
        assert summary["beta_s"] == 1.0 and summary["beta_u"] == 2.0
        assert summary["mean_gap"] == 1.5
        assert summary["samples"] == 2

    def test_export_distributions(self, evaluator, tmp_path):
        written = export_distributions(evaluator.model, evaluator.dataset, tmp_path, evaluator=evaluator)
        frame = pd.read_csv(written["distributions"])
        summary = json.loads(written["summary"].read_text(encoding="utf-8"))
        assert len(frame) == summary["samples"]
        assert set(frame["split"]) == {"seen_test", "unseen_test"}
        assert (frame["max_seen"] >= frame["seen_mean"]).all()

    def test_affinity_frames(self, evaluator):
        frames = affinity_frames(evaluator.model, evaluator.dataset, 0)
        assert sorted(frames) == ["affinity_z1_r1", "affinity_z1_r2", "affinity_z2_r1", "affinity_z2_r2"]
        assert frames["affinity_z1_r1"].shape == (8, 4)

    def test_affinity_sample_out_of_range(self, evaluator):
        with pytest.raises(ContractError):
            affinity_frames(evaluator.model, evaluator.dataset, evaluator.dataset.num_samples)

    def test_export_affinities(self, evaluator, tmp_path):
        written = export_affinities(evaluator.model, evaluator.dataset, 3, tmp_path)
        assert len(written) == 4
        frame = pd.read_csv(written[0], index_col="attribute")
        assert list(frame.columns) == ["patch_00", "patch_01", "patch_02", "patch_03"]

    def test_attribute_predictions(self, evaluator, tmp_path):
        frame = attribute_predictions(evaluator.model, evaluator.dataset)
        assert {"pred_000", "true_007", "mae", "cosine"} <= set(frame.columns)
        written = export_attribute_predictions(evaluator.model, evaluator.dataset, tmp_path)
        summary = pd.read_csv(written["summary"])
        assert len(summary) == evaluator.dataset.num_classes


class TestReportContents:

    def test_records_carry_scores(self, evaluator):
        report = evaluator.evaluate(1.0)
        num_classes = evaluator.dataset.num_classes
        assert all(len(record["scores"]) == num_classes for record in report.records)
        first = report.records[0]
        npt.assert_array_equal(first["scores"], evaluator.scores([first["sample"]])[0])
        assert report.degenerate_entries == 0
        assert not any(record["degenerate"] for record in report.records)

    def test_zero_prototype_row_is_flagged(self, evaluator, tmp_path):
        evaluator.category[0] = 0.0
        report = evaluator.evaluate(0.0)
        assert report.degenerate_entries == len(report.records)
        assert all(record["degenerate"] and record["scores"][0] == 0.0 for record in report.records)
        saved = json.loads(report.save(tmp_path / "report.json").read_text(encoding="utf-8"))
        assert saved["degenerate_entries"] == len(report.records)

    def test_zsl_records_carry_scores(self, evaluator):
        report = evaluator.evaluate_zsl()
        assert report.degenerate_entries == 0
        assert all(len(record["scores"]) == evaluator.dataset.num_classes for record in report.records)

    def test_sample_order_does_not_change_metrics(self, evaluator, tiny_dataset):
        order = np.random.default_rng(5).permutation(tiny_dataset.num_samples)
        position = np.argsort(order)
        shuffled = replace(
            tiny_dataset,
            features=tiny_dataset.features[order],
            labels=tiny_dataset.labels[order],
            splits={name: np.sort(position[idx]) for name, idx in tiny_dataset.splits.items()},
        )
        other = Evaluator(evaluator.model, shuffled)
        for gamma in (0.0, 2.0):
            a, b = evaluator.evaluate(gamma), other.evaluate(gamma)
            assert (a.U, a.S, a.H) == (b.U, b.S, b.H)
