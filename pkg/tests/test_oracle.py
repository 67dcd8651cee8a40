import json

import numpy as np
import numpy.testing as npt
import pytest

from gzsl_lab import numcore as nc
from gzsl_lab import oracle
from gzsl_lab.config import BackboneConfig, DsvtmConfig, LossWeights, RunConfig
from gzsl_lab.errors import ContractError
from gzsl_lab.gradcheck import build_problem, gradcheck_config, run_gradcheck
from gzsl_lab.model import GzslModel

from conftest import perturb_parameters

CASES = 50
TOL = dict(rtol=1e-12, atol=1e-10)


def _case_config(seed: int) -> RunConfig:
    """Desk-scale config whose wiring switches vary with the seed."""
    dsvtm = DsvtmConfig(
        num_attributes=6,
        num_patches=4,
        width=8,
        num_groups=2,
        loops=2,
        modules=2,
        attn_scale=seed % 4 == 0,
        share_loop_weights=seed % 2 == 0,
        anchor_to_shared=seed % 3 == 0,
        restart_from_shared=seed % 5 == 0,
        use_aca=seed % 6 != 1,
    )
    return RunConfig(
        dsvtm=dsvtm,
        backbone=BackboneConfig(num_layers=2, mode="identity", side_branch=seed % 7 == 0),
        loss=LossWeights(lambda_sem=0.5, lambda_deb=0.1, tau=20.0),
        seed=seed,
    )


def _case(seed: int):
    config = _case_config(seed)
    model = GzslModel(config)
    perturb_parameters(model, seed)
    rng = np.random.default_rng([seed, 99])
    case = {
        "f": rng.standard_normal((4, 8)),
        "s": rng.standard_normal((6, 8)),
        "params": model.state_dict(),
        "dsvtm": config.dsvtm,
        "modules": config.dsvtm.modules,
        "prototypes": rng.uniform(0.0, 1.0, size=(5, 6)),
        "seen_mask": np.array([True, True, True, False, False]),
        "label": int(rng.integers(0, 3)),
        "tau": config.loss.tau,
        "lambda_sem": config.loss.lambda_sem,
        "lambda_deb": config.loss.lambda_deb,
        "restart_from_shared": config.dsvtm.restart_from_shared,
        "side_branch": config.backbone.side_branch,
    }
    return config, model, case


@pytest.mark.parametrize("seed", range(CASES))
def test_forward_agrees_with_oracle(seed):
    config, model, case = _case(seed)
    naive = oracle.naive_forward_suite(case)
    output = model(case["f"], case["s"])
    breakdown = model.loss(
        case["f"], case["label"], case["s"], case["prototypes"], case["seen_mask"], config.loss
    )

    for state, reference in zip(output.states, naive["modules"]):
        assert len(state.s_hats) == len(reference["s_hats"])
        for ours, theirs in zip(state.s_hats, reference["s_hats"]):
            npt.assert_allclose(ours.data, theirs, **TOL)
        for ours, theirs in zip(state.affinities, reference["affinities"]):
            npt.assert_allclose(ours.data, theirs, **TOL)
        npt.assert_allclose(state.f_hat.data, reference["f_hat"], **TOL)

    smid = model.dsvtm[0].smid
    f_tilde = smid.attention(nc.as_tensor(case["f"]), output.states[0].s_final)
    npt.assert_allclose(f_tilde.data, naive["modules"][0]["f_tilde"], **TOL)
    npt.assert_allclose(smid.patch_mixing(f_tilde).data, naive["modules"][0]["f_bar"], **TOL)

    npt.assert_allclose(output.pred.data, naive["pred"], **TOL)
    npt.assert_allclose(breakdown.scores.scores.data, naive["scores"], **TOL)
    assert abs(breakdown.cls.item() - naive["cls"]) < 1e-10
    assert abs(breakdown.deb.item() - naive["deb"]) < 1e-10
    assert abs(breakdown.sem.item() - sum(naive["sem_terms"])) < 1e-9
    assert abs(breakdown.total.item() - naive["total"]) < 1e-9


class TestPrimitives:

    def test_matmul(self, rng):
        a, b = rng.standard_normal((3, 5)), rng.standard_normal((5, 2))
        npt.assert_allclose(oracle.matmul(a, b), nc.matmul(a, b).data, **TOL)

    def test_layer_norm(self, rng):
        x = rng.standard_normal((4, 6))
        gamma, beta = rng.standard_normal(6), rng.standard_normal(6)
        npt.assert_allclose(oracle.layer_norm(x, gamma, beta), nc.layer_norm(x, gamma, beta).data, **TOL)

    def test_softmax_rows_are_renormalized(self, rng):
        out = oracle.softmax_rows(rng.standard_normal((3, 7)) * 30)
        npt.assert_allclose(out.sum(axis=1), np.ones(3), atol=1e-15)

    def test_activations(self, rng):
        x = rng.standard_normal((3, 4)) * 3
        npt.assert_allclose(oracle.gelu(x), nc.gelu(x).data, **TOL)
        npt.assert_allclose(oracle.sigmoid(x), nc.sigmoid(x).data, **TOL)

    def test_gmp(self, rng):
        x = rng.standard_normal((5, 3))
        npt.assert_array_equal(oracle.gmp(x, axis=0), x.max(axis=0))
        npt.assert_array_equal(oracle.gmp(x, axis=1), x.max(axis=1))

    def test_oracle_is_deterministic(self):
        _, _, case = _case(3)
        first, second = oracle.naive_forward_suite(case), oracle.naive_forward_suite(case)
        npt.assert_array_equal(first["scores"], second["scores"])
        assert first["total"] == second["total"]


class TestFiniteDifferences:

    def test_quadratic_closed_form(self, rng):
        w = rng.uniform(0.5, 1.5, size=(3, 4))
        report = oracle.finite_diff_grad(lambda: float(np.sum(w * w)), [("w", w)], {"w": 2 * w}, threshold=1e-8)
        assert report.passed
        assert report.max_rel_error < 1e-8

    def test_step_size_study(self, rng):
        w = rng.uniform(0.5, 1.5, size=(2, 3))

        def loss():
            return float(np.sum(w ** 3))

        fine = oracle.finite_diff_grad(loss, [("w", w)], {"w": 3 * w ** 2}, h=1e-5, threshold=1e-8)
        coarse = oracle.finite_diff_grad(loss, [("w", w)], {"w": 3 * w ** 2}, h=1e-3, threshold=1e-8)
        assert fine.passed
        assert not coarse.passed
        assert coarse.max_rel_error < 1e-5

    def test_parameters_are_restored(self, rng):
        w = rng.standard_normal((2, 2))
        before = w.copy()
        oracle.finite_diff_grad(lambda: float(np.sum(w)), [("w", w)], {"w": np.ones((2, 2))})
        npt.assert_array_equal(w, before)

    def test_step_out_of_range(self):
        w = np.ones(2)
        with pytest.raises(ContractError):
            oracle.finite_diff_grad(lambda: 0.0, [("w", w)], {}, h=1e-2)

    def test_non_finite_probe_is_a_failure(self):
        w = np.array([1.0, 0.0])

        def loss():
            return float("nan") if w[0] > 1.0 else float(np.sum(w * w))

        report = oracle.finite_diff_grad(loss, [("w", w)], {"w": 2 * w})
        assert not report.passed
        assert report.non_finite == [{"parameter": "w", "index": [0]}]

    def test_wrong_gradient_is_caught(self, rng):
        w = rng.uniform(0.5, 1.5, size=3)
        report = oracle.finite_diff_grad(lambda: float(np.sum(w * w)), [("w", w)], {"w": w})
        assert not report.passed
        assert report.parameters["w"].failures == 3

    def test_tiny_gradients_are_counted_as_tolerated(self):
        w = np.array([0.7, 1.1, 0.9])

        def loss():
            return float(1e-12 * (w[0] + w[1]) + w[2] ** 2)

        analytic = np.array([2e-12, 2e-12, 2 * w[2]])
        report = oracle.finite_diff_grad(loss, [("w", w)], {"w": analytic})
        check = report.parameters["w"]
        assert check.passed and check.failures == 0
        assert check.tolerated == 2
        assert report.to_dict()["tolerated"] == 2

    def test_report_json(self, rng, tmp_path):
        w = rng.uniform(0.5, 1.5, size=2)
        report = oracle.finite_diff_grad(lambda: float(np.sum(w * w)), [("w", w)], {"w": 2 * w})
        saved = json.loads(report.save(tmp_path / "gradcheck.json").read_text(encoding="utf-8"))
        assert saved["passed"] is True
        assert set(saved["parameters"]["w"]) >= {"max_rel_error", "worst_index", "passed", "tolerated"}
        assert saved["tolerated"] == 0


class TestModelGradients:

    def test_problem_shape(self):
        problem = build_problem(gradcheck_config())
        assert problem.model.config.dsvtm.num_attributes == 6
        assert problem.prototypes.shape == (5, 6)
        assert problem.model.backbone.num_parameters() == 0

    def test_full_objective(self):
        report = run_gradcheck(RunConfig())
        assert report.passed, report.worst
        assert report.max_rel_error < 1e-4

    def test_unshared_loops(self):
        config = RunConfig()
        config.dsvtm.share_loop_weights = False
        config.dsvtm.attn_scale = True
        assert run_gradcheck(config, samples=1).passed

    @pytest.mark.slow
    def test_full_objective_with_toy_encoder(self):
        report = run_gradcheck(RunConfig(), full=True)
        assert report.passed, report.worst
