import json

import pandas as pd
import pytest

from gzsl_lab import dataset_io
from gzsl_lab import main as cli
from gzsl_lab.config import RunConfig
from gzsl_lab.main import EXIT_NUMERICAL, EXIT_USAGE, EXIT_VALIDATION, main
from gzsl_lab.oracle import GradCheckReport, ParameterCheck

from conftest import tiny_run_config


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Dataset and two-epoch training run shared by the inference commands."""
    root = tmp_path_factory.mktemp("cli")
    config_path = root / "tiny.json"
    tiny_run_config().save(config_path)
    assert main(["-q", "gen-data", "--config", str(config_path), "--out", str(root / "data")]) == 0
    assert main([
        "-q", "train", "--data", str(root / "data"), "--config", str(config_path), "--out", str(root / "run"),
    ]) == 0
    return root


def _inference(workspace, command, out, *extra):
    return main([
        "-q", command,
        "--checkpoint", str(workspace / "run" / "checkpoint"),
        "--data", str(workspace / "data"),
        "--out", str(out),
        *extra,
    ])


class TestGenData:

    def test_same_seed_same_bytes(self, tmp_path, config_file):
        path = config_file(tiny_run_config())
        for name in ("a", "b"):
            assert main(["-q", "gen-data", "--config", str(path), "--out", str(tmp_path / name)]) == 0
        for name in ("features.f32", "prototypes_A.f32", "prototypes_S.f32"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_seed_flag_overrides_config(self, tmp_path, config_file):
        path = config_file(tiny_run_config())
        main(["-q", "gen-data", "--config", str(path), "--seed", "8", "--out", str(tmp_path / "data")])
        echo = RunConfig.from_file(tmp_path / "data" / "run_config.json")
        assert echo.seed == 8 and echo.data.seed == 8
        assert dataset_io.load(tmp_path / "data").num_samples == 36

    def test_unknown_config_key(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"dsvtm": {"heads": 4}}), encoding="utf-8")
        assert main(["gen-data", "--config", str(path), "--out", str(tmp_path / "data")]) == EXIT_VALIDATION
        assert capsys.readouterr().err.startswith("error:")
        assert not (tmp_path / "data").exists()

    @pytest.mark.parametrize("raw", [
        {"data": {"num_seen": "8"}},
        {"data": {"noise": "0.1"}},
        {"dsvtm": {"loops": True}},
        {"dsvtm": {"use_aca": 1}},
        {"seed": 1.5},
    ])
    def test_wrong_value_type(self, tmp_path, capsys, raw):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(raw), encoding="utf-8")
        assert main(["gen-data", "--config", str(path), "--out", str(tmp_path / "data")]) == EXIT_VALIDATION
        assert "must be" in capsys.readouterr().err
        assert not (tmp_path / "data").exists()

    def test_integer_accepted_for_float(self, tmp_path):
        config = RunConfig.from_dict({"data": {"noise": 0}, "loss": {"tau": 10}})
        assert isinstance(config.data.noise, float) and config.loss.tau == 10.0


class TestUsage:

    def test_unknown_flag(self, tmp_path):
        with pytest.raises(SystemExit) as info:
            main(["gen-data", "--bogus", "--out", str(tmp_path)])
        assert info.value.code == EXIT_USAGE

    def test_missing_command(self):
        with pytest.raises(SystemExit) as info:
            main([])
        assert info.value.code == EXIT_USAGE

    def test_missing_dataset(self, tmp_path):
        out = tmp_path / "run"
        assert main(["-q", "train", "--data", str(tmp_path / "nowhere"), "--out", str(out)]) == EXIT_VALIDATION
        assert not out.exists()

    def test_zero_sweep_steps(self, workspace, tmp_path):
        assert _inference(workspace, "sweep-gamma", tmp_path / "sweep", "--steps", "0") == EXIT_USAGE


class TestTrainAndEvaluate:

    def test_training_outputs(self, workspace):
        run = workspace / "run"
        metrics = pd.read_csv(run / "metrics.csv")
        assert metrics["epoch"].tolist() == [1, 2]
        assert (run / "checkpoint" / "manifest.json").exists()
        assert RunConfig.from_file(run / "run_config.json").dataset_path == str(workspace / "data")

    def test_single_step_sweep_equals_eval(self, workspace, tmp_path):
        assert _inference(workspace, "eval", tmp_path / "eval", "--gamma", "2.5") == 0
        assert _inference(
            workspace, "sweep-gamma", tmp_path / "sweep", "--from", "2.5", "--to", "9", "--steps", "1"
        ) == 0
        report = json.loads((tmp_path / "eval" / "report.json").read_text(encoding="utf-8"))
        best = json.loads((tmp_path / "sweep" / "best_report.json").read_text(encoding="utf-8"))
        assert (best["U"], best["S"], best["H"]) == (report["U"], report["S"], report["H"])
        assert len(pd.read_csv(tmp_path / "sweep" / "sweep.csv")) == 1

    def test_sweep_with_chart(self, workspace, tmp_path):
        assert _inference(workspace, "sweep-gamma", tmp_path / "sweep", "--steps", "5", "--html") == 0
        assert (tmp_path / "sweep" / "sweep.html").exists()
        assert len(pd.read_csv(tmp_path / "sweep" / "sweep.csv")) == 5

    def test_zsl_report(self, workspace, tmp_path):
        assert _inference(workspace, "eval", tmp_path / "zsl", "--zsl") == 0
        report = json.loads((tmp_path / "zsl" / "report.json").read_text(encoding="utf-8"))
        assert report["mode"] == "zsl"

    def test_resume_continues_from_checkpoint(self, workspace, tmp_path):
        assert main([
            "-q", "train", "--data", str(workspace / "data"),
            "--config", str(workspace / "tiny.json"), "--epochs", "3",
            "--resume", str(workspace / "run" / "checkpoint"), "--out", str(tmp_path / "resumed"),
        ]) == 0
        metrics = pd.read_csv(tmp_path / "resumed" / "metrics.csv")
        assert metrics["epoch"].tolist() == [1, 2, 3]
        first = pd.read_csv(workspace / "run" / "metrics.csv")
        pd.testing.assert_frame_equal(metrics.iloc[:2], first)

    def test_resume_with_other_architecture(self, workspace, tmp_path):
        assert main([
            "-q", "train", "--data", str(workspace / "data"),
            "--config", str(workspace / "tiny.json"), "--loops", "3",
            "--resume", str(workspace / "run" / "checkpoint"), "--out", str(tmp_path / "resumed"),
        ]) == EXIT_VALIDATION


class TestExports:

    def test_export_attn(self, workspace, tmp_path):
        assert _inference(workspace, "export-attn", tmp_path / "attn", "--sample", "0", "--html") == 0
        assert (tmp_path / "attn" / "affinity_z2_r2.csv").exists()
        assert (tmp_path / "attn" / "affinities.html").exists()

    def test_export_attn_bad_sample(self, workspace, tmp_path):
        assert _inference(workspace, "export-attn", tmp_path / "attn", "--sample", "999") == EXIT_VALIDATION
        assert not (tmp_path / "attn").exists()

    def test_export_dist(self, workspace, tmp_path):
        assert _inference(workspace, "export-dist", tmp_path / "dist", "--html") == 0
        summary = json.loads((tmp_path / "dist" / "distribution_summary.json").read_text(encoding="utf-8"))
        assert {"alpha_s", "alpha_u", "beta_s", "beta_u"} <= set(summary)
        assert (tmp_path / "dist" / "distributions.html").exists()

    def test_export_attributes(self, workspace, tmp_path):
        assert _inference(workspace, "export-attributes", tmp_path / "attrs") == 0
        assert (tmp_path / "attrs" / "attribute_predictions.csv").exists()


class TestGradcheck:

    def test_passing_check(self, tmp_path):
        assert main(["-q", "gradcheck", "--out", str(tmp_path / "grad")]) == 0
        report = json.loads((tmp_path / "grad" / "gradcheck.json").read_text(encoding="utf-8"))
        assert report["passed"] is True

    def test_failing_check_exits_numerical(self, tmp_path, monkeypatch):
        failing = GradCheckReport(h=1e-5, threshold=1e-4, abs_tol=1e-9, parameters={
            "head.weight": ParameterCheck("head.weight", 0.5, 0.1, [0, 0], 1, False),
        })
        monkeypatch.setattr(cli, "run_gradcheck", lambda *args, **kwargs: failing)
        assert main(["-q", "gradcheck", "--out", str(tmp_path / "grad")]) == EXIT_NUMERICAL
        report = json.loads((tmp_path / "grad" / "gradcheck.json").read_text(encoding="utf-8"))
        assert report["passed"] is False


class TestAblate:

    def test_ablation_tables(self, workspace, tmp_path):
        assert main([
            "-q", "ablate", "--data", str(workspace / "data"), "--config", str(workspace / "tiny.json"),
            "--variants", "baseline,full", "--grid-r", "1", "--grid-z", "1",
            "--epochs", "1", "--gamma-steps", "3", "--out", str(tmp_path / "ablation"),
        ]) == 0
        ablation = pd.read_csv(tmp_path / "ablation" / "ablation.csv")
        assert ablation["variant"].tolist() == ["baseline", "full"]
        progression = pd.read_csv(tmp_path / "ablation" / "progression.csv")
        assert progression[["loops", "modules"]].values.tolist() == [[1, 1]]

    def test_unknown_variant(self, workspace, tmp_path):
        assert main([
            "-q", "ablate", "--data", str(workspace / "data"), "--variants", "nope",
            "--out", str(tmp_path / "ablation"),
        ]) == EXIT_VALIDATION

    def test_loss_weight_table(self, workspace, tmp_path):
        assert main([
            "-q", "ablate", "--data", str(workspace / "data"), "--config", str(workspace / "tiny.json"),
            "--variants", "full", "--grid-lambda-sem", "0,1", "--grid-lambda-deb", "0.01",
            "--epochs", "1", "--gamma-steps", "3", "--out", str(tmp_path / "ablation"),
        ]) == 0
        weights = pd.read_csv(tmp_path / "ablation" / "loss_weights.csv")
        assert list(weights.columns) == ["lambda_sem", "lambda_deb", "U", "S", "H", "gamma"]
        assert weights[["lambda_sem", "lambda_deb"]].values.tolist() == [[0.0, 0.01], [1.0, 0.01]]
        assert not (tmp_path / "ablation" / "progression.csv").exists()

    def test_malformed_loss_weight_grid(self, workspace, tmp_path):
        assert main([
            "-q", "ablate", "--data", str(workspace / "data"), "--grid-lambda-sem", "0,abc",
            "--out", str(tmp_path / "ablation"),
        ]) == EXIT_VALIDATION
        assert not (tmp_path / "ablation").exists()
