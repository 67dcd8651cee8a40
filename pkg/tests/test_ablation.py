from dataclasses import replace

import pytest

from gzsl_lab.ablation import (
    ABLATION_COLUMNS,
    ABLATION_VARIANTS,
    LOSS_WEIGHT_COLUMNS,
    PROGRESSION_COLUMNS,
    get_variant_list,
    run_ablation,
    run_loss_weight_sweep,
    run_progression,
    train_and_score,
)
from gzsl_lab.errors import ConfigError

from conftest import tiny_run_config


def _quick_config():
    config = tiny_run_config()
    return replace(config, train=replace(config.train, epochs=1))


def test_registry_order():
    assert get_variant_list() == ["baseline", "sria", "pma", "iasa", "full"]


def test_variants_are_cumulative():
    switches = [
        (v.use_smid_attention, v.use_patch_mixing, v.use_imse, v.use_aca)
        for v in ABLATION_VARIANTS.values()
    ]
    for before, after in zip(switches, switches[1:]):
        assert all(b <= a for b, a in zip(before, after))
        assert sum(after) == sum(before) + 1


def test_apply_only_touches_switches():
    config = tiny_run_config()
    applied = ABLATION_VARIANTS["pma"].apply(config)
    assert not applied.dsvtm.use_imse and applied.dsvtm.use_patch_mixing
    assert applied.dsvtm.loops == config.dsvtm.loops
    assert applied.train == config.train
    assert config.dsvtm.use_imse


def test_run_ablation_rows(tiny_dataset):
    frame = run_ablation(_quick_config(), tiny_dataset, ["baseline", "full"], gamma_steps=3)
    assert list(frame.columns) == ABLATION_COLUMNS
    assert frame["variant"].tolist() == ["baseline", "full"]
    assert frame[["U", "S", "H"]].apply(lambda col: col.between(0.0, 1.0).all()).all()


def test_run_progression_grid(tiny_dataset):
    frame = run_progression(_quick_config(), tiny_dataset, loops=[1, 2], modules=[1, 3], gamma_steps=3)
    assert list(frame.columns) == PROGRESSION_COLUMNS
    assert frame[["loops", "modules"]].values.tolist() == [[1, 1], [1, 3], [2, 1], [2, 3]]


def test_unknown_variant(tiny_dataset):
    with pytest.raises(KeyError):
        run_ablation(_quick_config(), tiny_dataset, ["nope"])


def test_loss_weight_grid(tiny_dataset):
    frame = run_loss_weight_sweep(
        _quick_config(), tiny_dataset, lambda_sem=[0.0, 1.0], lambda_deb=[0.0, 0.01], gamma_steps=3
    )
    assert list(frame.columns) == LOSS_WEIGHT_COLUMNS
    assert frame[["lambda_sem", "lambda_deb"]].values.tolist() == [[0.0, 0.0], [0.0, 0.01], [1.0, 0.0], [1.0, 0.01]]
    assert frame[["U", "S", "H"]].apply(lambda col: col.between(0.0, 1.0).all()).all()


def test_loss_weight_rows_match_single_runs(tiny_dataset):
    config = _quick_config()
    frame = run_loss_weight_sweep(config, tiny_dataset, lambda_sem=[0.25], lambda_deb=[0.0], gamma_steps=3)
    weighted = replace(config, loss=replace(config.loss, lambda_sem=0.25, lambda_deb=0.0))
    single = train_and_score(weighted, tiny_dataset, gamma_steps=3)
    assert frame.iloc[0][["U", "S", "H", "gamma"]].tolist() == [single["U"], single["S"], single["H"], single["gamma"]]


def test_negative_loss_weight_is_rejected(tiny_dataset):
    with pytest.raises(ConfigError):
        run_loss_weight_sweep(_quick_config(), tiny_dataset, lambda_sem=[0.5, -1.0], lambda_deb=[0.0])
