from dataclasses import replace

import numpy as np
import numpy.testing as npt
import pytest

from gzsl_lab.config import DsvtmConfig
from gzsl_lab.dsvtm import DSVTM, semantic_alignment_loss
from gzsl_lab.layers import Linear, zero_parameters
from gzsl_lab.model import GzslModel

from conftest import tiny_run_config


def _dsvtm(config: DsvtmConfig, seed: int = 0) -> DSVTM:
    module = DSVTM(np.random.default_rng(seed), config)
    module.assign_names("dsvtm")
    return module


@pytest.fixture
def dsvtm_config():
    return DsvtmConfig(num_attributes=6, num_patches=4, width=8, num_groups=2, loops=3, modules=1)


@pytest.fixture
def inputs(rng):
    return rng.standard_normal((4, 8)), rng.standard_normal((6, 8))


class TestParameters:

    def test_paths_are_deterministic(self, tiny_config):
        names = [name for name, _ in GzslModel(tiny_config).named_parameters()]
        assert names == [name for name, _ in GzslModel(tiny_config).named_parameters()]
        assert "dsvtm.0.imse.0.q.weight" in names
        assert "dsvtm.1.smid.w_e" in names
        assert "head.weight" in names
        assert "dsvtm.0.imse.1.q.weight" not in names

    def test_unshared_loops_own_parameters(self):
        names = dict(GzslModel(tiny_run_config(share_loop_weights=False)).named_parameters())
        assert "dsvtm.0.imse.1.q.weight" in names

    def test_shapes(self, dsvtm_config):
        params = dict(_dsvtm(dsvtm_config).named_parameters())
        assert params["dsvtm.imse.0.w_p1"].shape == (6, 3)
        assert params["dsvtm.imse.0.w_p2"].shape == (3, 6)
        assert params["dsvtm.smid.w_e"].shape == (4, 8)
        assert params["dsvtm.smid.w_s"].shape == (8, 8)
        assert params["dsvtm.smid.w_n"].shape == (8, 4)

    def test_same_seed_same_values(self, tiny_config):
        a, b = GzslModel(tiny_config).state_dict(), GzslModel(tiny_config).state_dict()
        for name in a:
            npt.assert_array_equal(a[name], b[name])

    def test_load_state_dict_rejects_missing(self, tiny_config):
        model = GzslModel(tiny_config)
        state = model.state_dict()
        state.pop("head.weight")
        with pytest.raises(KeyError):
            model.load_state_dict(state)

    def test_linear_without_bias(self, rng):
        layer = Linear(rng, 3, 2, bias=False)
        assert [name for name, _ in layer.named_parameters()] == ["weight"]


class TestForward:

    def test_output_shapes(self, dsvtm_config, inputs):
        f, s = inputs
        state = _dsvtm(dsvtm_config)(f, s)
        assert state.f_hat.shape == (4, 8)
        assert len(state.s_hats) == 3
        assert len(state.affinities) == 3
        assert all(m.shape == (6, 4) for m in state.affinities)

    def test_zero_weights_closed_form(self, dsvtm_config, inputs):
        f, s = inputs
        module = _dsvtm(dsvtm_config)
        zero_parameters(module)
        state = module(f, s)
        for m in state.affinities:
            npt.assert_array_equal(m.data, np.zeros((6, 4)))
        npt.assert_allclose(state.s_final.data, 2.5 ** 3 * s, rtol=1e-12)
        npt.assert_allclose(state.f_hat.data, f, rtol=1e-12)

    def test_anchored_loops_do_not_compound(self, dsvtm_config, inputs):
        f, s = inputs
        module = _dsvtm(replace(dsvtm_config, anchor_to_shared=True))
        zero_parameters(module)
        npt.assert_allclose(module(f, s).s_final.data, 2.5 * s, rtol=1e-12)

    def test_value_bias_reaches_features(self, dsvtm_config, inputs):
        f, s = inputs
        module = _dsvtm(dsvtm_config)
        zero_parameters(module)
        bias = np.arange(8, dtype=float)
        module.smid.v.bias.assign(bias)
        npt.assert_allclose(module(f, s).f_hat.data, f + bias, rtol=1e-12)

    def test_without_imse_prototypes_pass_through(self, dsvtm_config, inputs):
        f, s = inputs
        state = _dsvtm(replace(dsvtm_config, use_imse=False))(f, s)
        assert state.affinities == []
        assert len(state.s_hats) == 1
        npt.assert_array_equal(state.s_final.data, s)

    def test_all_components_off_is_identity(self, dsvtm_config, inputs):
        f, s = inputs
        config = replace(
            dsvtm_config, use_imse=False, use_aca=False, use_smid_attention=False, use_patch_mixing=False
        )
        npt.assert_array_equal(_dsvtm(config)(f, s).f_hat.data, f)

    def test_loops_refine_prototypes(self, dsvtm_config, inputs):
        f, s = inputs
        state = _dsvtm(dsvtm_config)(f, s)
        assert not np.allclose(state.s_hats[0].data, state.s_hats[1].data)


class TestAlignmentLoss:

    def test_matches_pooled_distance(self):
        m = np.array([[0.2, 0.9], [0.1, -0.3]])
        a_y = np.array([1.0, 0.0])
        expected = (0.9 - 1.0) ** 2 + (0.1 - 0.0) ** 2
        assert semantic_alignment_loss(m, a_y).item() == pytest.approx(expected)

    def test_zero_when_pooled_equals_prototype(self):
        m = np.array([[1.0, 0.5], [-1.0, 0.0]])
        assert semantic_alignment_loss(m, np.array([1.0, 0.0])).item() == 0.0


class TestAttributePermutation:

    def test_within_group_shuffle_is_equivariant(self, dsvtm_config, inputs):
        f, s = inputs
        order = np.array([2, 0, 1, 4, 5, 3])
        module, shuffled = _dsvtm(dsvtm_config), _dsvtm(dsvtm_config)
        for encoder in shuffled.imse:
            encoder.w_p1.assign(encoder.w_p1.data[order])
            encoder.w_p2.assign(encoder.w_p2.data[:, order])
        base, moved = module(f, s), shuffled(f, s[order])
        npt.assert_allclose(moved.s_final.data, base.s_final.data[order], rtol=1e-10, atol=1e-12)
        for m_base, m_moved in zip(base.affinities, moved.affinities):
            npt.assert_allclose(m_moved.data, m_base.data[order], rtol=1e-10, atol=1e-12)
        npt.assert_allclose(moved.f_hat.data, base.f_hat.data, rtol=1e-10, atol=1e-12)
