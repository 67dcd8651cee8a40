from dataclasses import replace

import numpy as np
import numpy.testing as npt
import pandas as pd
import pytest

from gzsl_lab.checkpoint import load_checkpoint
from gzsl_lab.config import TrainConfig
from gzsl_lab.data_generator import DataGenerator
from gzsl_lab.errors import NumericalError
from gzsl_lab.numcore import GradientMap, Parameter
from gzsl_lab.trainer import METRIC_COLUMNS, AdamOptimizer, Trainer, epoch_order, prepare_model

from conftest import tiny_run_config


def _trainer(dataset, tmp_path=None, **train_overrides):
    config = tiny_run_config()
    config = replace(config, train=replace(config.train, **train_overrides))
    config, model = prepare_model(config, dataset)
    return Trainer(model, dataset, config, checkpoint_dir=tmp_path, progress=False)


def _grads(param: Parameter, values) -> GradientMap:
    return GradientMap([param], {id(param): np.asarray(values, dtype=float)})


class TestAdam:

    def test_first_step_moves_by_learning_rate(self):
        w = Parameter(np.array([1.0, -1.0, 0.5]), name="w")
        optimizer = AdamOptimizer([("w", w)], TrainConfig(learning_rate=0.01))
        optimizer.step(_grads(w, [2.0, -3.0, 0.0]))
        # m_hat / sqrt(v_hat) = g / |g| on the first step
        npt.assert_allclose(w.data, [1.0 - 0.01, -1.0 + 0.01, 0.5], rtol=1e-6)

    def test_zero_learning_rate_keeps_parameters(self):
        w = Parameter(np.array([1.0, 2.0]), name="w")
        optimizer = AdamOptimizer([("w", w)], TrainConfig(learning_rate=0.0))
        optimizer.step(_grads(w, [5.0, 5.0]))
        npt.assert_array_equal(w.data, [1.0, 2.0])
        npt.assert_allclose(optimizer.m["w"], [0.5, 0.5])
        assert optimizer.step_count == 1

    def test_missing_gradient_counts_as_zero(self):
        w = Parameter(np.array([1.0]), name="w")
        optimizer = AdamOptimizer([("w", w)], TrainConfig(learning_rate=0.1))
        optimizer.step(GradientMap([], {}))
        npt.assert_array_equal(w.data, [1.0])

    def test_state_dict_round_trip(self):
        w = Parameter(np.array([1.0, 2.0]), name="w")
        optimizer = AdamOptimizer([("w", w)], TrainConfig())
        optimizer.step(_grads(w, [1.0, -1.0]))
        other = AdamOptimizer([("w", w)], TrainConfig())
        other.load_state_dict(optimizer.state_dict(), optimizer.step_count)
        npt.assert_array_equal(other.m["w"], optimizer.m["w"])
        npt.assert_array_equal(other.v["w"], optimizer.v["w"])
        assert other.step_count == 1


class TestTrainer:

    def test_epoch_order_is_seeded(self):
        indices = np.arange(20)
        npt.assert_array_equal(epoch_order(3, 1, indices), epoch_order(3, 1, indices))
        assert not np.array_equal(epoch_order(3, 1, indices), epoch_order(3, 2, indices))

    def test_metrics_frame(self, tiny_dataset):
        result = _trainer(tiny_dataset).run()
        assert list(result.metrics.columns) == METRIC_COLUMNS
        assert result.metrics["epoch"].tolist() == [1, 2]
        assert result.steps == 2 * 4
        assert np.isfinite(result.metrics[["L_cls", "L_sem", "L_deb", "total"]].to_numpy()).all()

    def test_zero_learning_rate_leaves_model_unchanged(self, tiny_dataset):
        trainer = _trainer(tiny_dataset, learning_rate=0.0)
        before = trainer.model.state_dict()
        trainer.run()
        after = trainer.model.state_dict()
        for name in before:
            npt.assert_array_equal(before[name], after[name])

    def test_training_reduces_loss(self, tiny_dataset):
        result = _trainer(tiny_dataset, epochs=15, learning_rate=5e-3).run()
        assert result.metrics["total"].iloc[-1] < result.metrics["total"].iloc[0]

    def test_single_variant_noiseless_data_still_trains(self):
        config = tiny_run_config()
        dataset = DataGenerator(replace(config.data, variants=1, noise=0.0)).generate()
        result = _trainer(dataset, epochs=15, learning_rate=5e-3).run()
        assert np.isfinite(result.metrics["total"]).all()
        assert result.metrics["total"].iloc[-1] < result.metrics["total"].iloc[0]

    def test_seeded_twins_are_identical(self, tiny_dataset, tmp_path):
        first = _trainer(tiny_dataset)
        second = _trainer(tiny_dataset)
        first.run()
        second.run()
        first.save_metrics(tmp_path / "a.csv")
        second.save_metrics(tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_non_finite_loss_names_the_batch(self, tiny_dataset):
        trainer = _trainer(tiny_dataset)
        trainer.model.head.weight.data[...] = np.nan
        with pytest.raises(NumericalError) as info:
            trainer.run()
        assert info.value.batch_index == 0

    def test_resume_matches_uninterrupted_run(self, tiny_dataset, tmp_path):
        reference = _trainer(tiny_dataset, epochs=3)
        reference.run()

        interrupted = _trainer(tiny_dataset, epochs=3)
        interrupted.run(max_steps=6)
        interrupted.save_checkpoint(tmp_path / "partial")

        checkpoint = load_checkpoint(tmp_path / "partial")
        resumed = Trainer(checkpoint.model, tiny_dataset, interrupted.config, progress=False)
        resumed.optimizer.load_state_dict(checkpoint.optimizer_state, checkpoint.step)
        result = resumed.run()

        assert result.steps == 3 * 4
        expected = reference.model.state_dict()
        for name, values in resumed.model.state_dict().items():
            npt.assert_array_equal(values, expected[name])

    def test_periodic_checkpoints(self, tiny_dataset, tmp_path):
        _trainer(tiny_dataset, tmp_path, checkpoint_interval=1).run()
        assert (tmp_path / "epoch_0001" / "manifest.json").exists()
        assert (tmp_path / "epoch_0002" / "manifest.json").exists()

    def test_saved_metrics_parse_back(self, tiny_dataset, tmp_path):
        trainer = _trainer(tiny_dataset)
        trainer.run()
        frame = pd.read_csv(trainer.save_metrics(tmp_path / "metrics.csv"))
        assert frame.shape == (2, len(METRIC_COLUMNS))
