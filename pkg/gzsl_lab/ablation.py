"""
Ablation Studies
================
Component ablation (cumulative DSVTM components from a bare backbone to the
full model) the loop/module progression grid and the loss-weight grid. Every variant is trained
with the same seed and evaluated at its best-H gamma.
"""

import logging
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence

import pandas as pd

from .config import RunConfig
from .data_generator import GzslDataset
from .errors import ConfigError
from .evaluator import Evaluator, default_gammas
from .trainer import prepare_model, train

logger = logging.getLogger(__name__)

ABLATION_COLUMNS = ["variant", "U", "S", "H", "gamma"]
PROGRESSION_COLUMNS = ["loops", "modules", "U", "S", "H", "gamma"]
LOSS_WEIGHT_COLUMNS = ["lambda_sem", "lambda_deb", "U", "S", "H", "gamma"]


@dataclass
class AblationVariant:
    """One row of the component ablation."""
    code: str
    name: str
    description: str
    use_smid_attention: bool
    use_patch_mixing: bool
    use_imse: bool
    use_aca: bool

    def apply(self, config: RunConfig) -> RunConfig:
        dsvtm = replace(
            config.dsvtm,
            use_smid_attention=self.use_smid_attention,
            use_patch_mixing=self.use_patch_mixing,
            use_imse=self.use_imse,
            use_aca=self.use_aca,
        )
        return replace(config, dsvtm=dsvtm)


ABLATION_VARIANTS: Dict[str, AblationVariant] = {

    "baseline": AblationVariant(
        code="baseline",
        name="Baseline",
        description="Head directly on backbone features; DSVTMs pass features through",
        use_smid_attention=False,
        use_patch_mixing=False,
        use_imse=False,
        use_aca=False,
    ),

    "sria": AblationVariant(
        code="sria",
        name="+ instance attention",
        description="Semantic-related instance attention over the shared prototypes",
        use_smid_attention=True,
        use_patch_mixing=False,
        use_imse=False,
        use_aca=False,
    ),

    "pma": AblationVariant(
        code="pma",
        name="+ patch mixing",
        description="Adds patch mixing and activation; prototypes stay frozen at S",
        use_smid_attention=True,
        use_patch_mixing=True,
        use_imse=False,
        use_aca=False,
    ),

    "iasa": AblationVariant(
        code="iasa",
        name="+ semantic attention",
        description="Adds the recurrent instance-aware semantic attention without the group gate",
        use_smid_attention=True,
        use_patch_mixing=True,
        use_imse=True,
        use_aca=False,
    ),

    "full": AblationVariant(
        code="full",
        name="Full model",
        description="Adds attribute communication and activation",
        use_smid_attention=True,
        use_patch_mixing=True,
        use_imse=True,
        use_aca=True,
    ),
}


def get_variant_list() -> List[str]:
    return list(ABLATION_VARIANTS.keys())


def train_and_score(config: RunConfig, dataset: GzslDataset, gamma_steps: int = 41, progress: bool = False) -> Dict:
    """Train one configuration from scratch and report U/S/H at its best gamma."""
    bound, model = prepare_model(config, dataset)
    train(model, dataset, bound, progress=progress)
    evaluator = Evaluator(model, dataset)
    best = evaluator.sweep(default_gammas(evaluator.tau, gamma_steps)).best
    return {"U": best.U, "S": best.S, "H": best.H, "gamma": best.gamma}


def run_ablation(
    config: RunConfig,
    dataset: GzslDataset,
    variants: Optional[Sequence[str]] = None,
    gamma_steps: int = 41,
    progress: bool = False,
) -> pd.DataFrame:
    """
    Train and evaluate each component variant.

    Args:
        config: Base run config; only the component switches change per variant
        dataset: Dataset to train and evaluate on
        variants: Variant codes, defaults to all in registry order
        gamma_steps: Size of the gamma grid over [0, tau]

    Returns:
        DataFrame with columns variant, U, S, H, gamma
    """
    rows = []
    for code in variants or get_variant_list():
        variant = ABLATION_VARIANTS[code]
        logger.info(f"Ablation variant '{code}': {variant.description}")
        row = {"variant": code}
        row.update(train_and_score(variant.apply(config), dataset, gamma_steps, progress))
        rows.append(row)
    return pd.DataFrame(rows, columns=ABLATION_COLUMNS)


def run_progression(
    config: RunConfig,
    dataset: GzslDataset,
    loops: Sequence[int],
    modules: Sequence[int],
    gamma_steps: int = 41,
    progress: bool = False,
) -> pd.DataFrame:
    """Full model over the (R, Z) grid; the backbone is deepened when Z exceeds its layers."""
    rows = []
    for r in loops:
        for z in modules:
            dsvtm = replace(config.dsvtm, loops=int(r), modules=int(z))
            backbone = replace(config.backbone, num_layers=max(config.backbone.num_layers, int(z)))
            variant = replace(config, dsvtm=dsvtm, backbone=backbone)
            logger.info(f"Progression R={r} Z={z}")
            row = {"loops": int(r), "modules": int(z)}
            row.update(train_and_score(variant, dataset, gamma_steps, progress))
            rows.append(row)
    return pd.DataFrame(rows, columns=PROGRESSION_COLUMNS)


def run_loss_weight_sweep(
    config: RunConfig,
    dataset: GzslDataset,
    lambda_sem: Sequence[float],
    lambda_deb: Sequence[float],
    gamma_steps: int = 41,
    progress: bool = False,
) -> pd.DataFrame:
    """
    Full model over the (lambda_sem, lambda_deb) grid.

    Every grid point is validated before the first one trains, so a bad
    weight fails the sweep without partial results.

    Returns:
        DataFrame with columns lambda_sem, lambda_deb, U, S, H, gamma
    """
    grid = []
    for sem in lambda_sem:
        for deb in lambda_deb:
            loss = replace(config.loss, lambda_sem=float(sem), lambda_deb=float(deb))
            problems = loss.validate()
            if problems:
                raise ConfigError("; ".join(problems))
            grid.append(replace(config, loss=loss))

    rows = []
    for variant in grid:
        logger.info(f"Loss weights lambda_sem={variant.loss.lambda_sem:g} lambda_deb={variant.loss.lambda_deb:g}")
        row = {"lambda_sem": variant.loss.lambda_sem, "lambda_deb": variant.loss.lambda_deb}
        row.update(train_and_score(variant, dataset, gamma_steps, progress))
        rows.append(row)
    return pd.DataFrame(rows, columns=LOSS_WEIGHT_COLUMNS)
