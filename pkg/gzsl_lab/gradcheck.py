"""
Gradient Check
==============
Builds the desk-scale gradient-check problem (N_s=6, N_v=4, D=8, Z=2, R=2,
3 seen and 2 unseen classes), records the full training objective on a tape and
compares every parameter gradient with the oracle's central differences.
"""

import logging
from dataclasses import dataclass, replace
from typing import Dict, List, Optional

import numpy as np

from .config import RunConfig
from .head_loss import batch_breakdown
from .model import GzslModel
from .numcore import Tape
from .oracle import GradCheckReport, finite_diff_grad

logger = logging.getLogger(__name__)

TOY_SHAPE = {
    "num_attributes": 6,
    "num_patches": 4,
    "width": 8,
    "num_groups": 2,
    "loops": 2,
    "modules": 2,
}
TOY_SEEN = 3
TOY_UNSEEN = 2


@dataclass
class GradCheckProblem:
    model: GzslModel
    tokens: List[np.ndarray]
    labels: List[int]
    shared: np.ndarray
    prototypes: np.ndarray
    seen_mask: np.ndarray
    config: RunConfig

    def batch_loss(self):
        losses = [
            self.model.loss(t, y, self.shared, self.prototypes, self.seen_mask, self.config.loss)
            for t, y in zip(self.tokens, self.labels)
        ]
        return batch_breakdown(losses).total

    def loss_value(self) -> float:
        return self.batch_loss().item()

    def analytic(self) -> Dict[str, np.ndarray]:
        tape = Tape()
        with tape:
            total = self.batch_loss()
        grads = tape.backward(total)
        return {name: grads[name] for name in grads}


def gradcheck_config(base: Optional[RunConfig] = None, full: bool = False) -> RunConfig:
    """Shrink ``base`` to the gradient-check shape.

    Switches, wiring and loss weights are kept. Without ``full`` the backbone is
    the identity; with it, a two-layer toy encoder is checked as well.
    """
    base = base or RunConfig()
    dsvtm = replace(base.dsvtm, hidden_patches=None, **TOY_SHAPE)
    backbone = replace(
        base.backbone,
        num_layers=TOY_SHAPE["modules"],
        input_width=TOY_SHAPE["width"],
        mode="toy-encoder" if full else "identity",
    )
    return replace(base, dsvtm=dsvtm, backbone=backbone)


def build_problem(config: RunConfig, samples: int = 2, seed: Optional[int] = None) -> GradCheckProblem:
    """Random continuous inputs; max-pooling ties have probability zero."""
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng([seed, 17])
    d = config.dsvtm
    num_classes = TOY_SEEN + TOY_UNSEEN
    seen_mask = np.arange(num_classes) < TOY_SEEN
    return GradCheckProblem(
        model=GzslModel(config, seed=seed),
        tokens=[rng.normal(size=(d.num_patches, d.width)) for _ in range(samples)],
        labels=[int(y) for y in rng.integers(0, TOY_SEEN, size=samples)],
        shared=rng.normal(size=(d.num_attributes, d.width)),
        prototypes=rng.uniform(0.0, 1.0, size=(num_classes, d.num_attributes)),
        seen_mask=seen_mask,
        config=config,
    )


def run_gradcheck(
    config: Optional[RunConfig] = None,
    full: bool = False,
    h: float = 1e-5,
    threshold: float = 1e-4,
    samples: int = 2,
) -> GradCheckReport:
    """
    Check every parameter of the toy model against central differences.

    Args:
        config: Base run config (switches and loss weights are honored)
        full: Include the toy backbone encoder
        h: Finite-difference step
        threshold: Maximum relative error per element
        samples: Batch size of the checked objective

    Returns:
        GradCheckReport
    """
    problem = build_problem(gradcheck_config(config, full), samples=samples)
    analytic = problem.analytic()
    params = [(name, p.data) for name, p in problem.model.named_parameters()]
    logger.info(f"Gradient check over {problem.model.num_parameters()} values in {len(params)} tensors (h={h})")
    report = finite_diff_grad(problem.loss_value, params, analytic, h=h, threshold=threshold)
    worst = report.worst
    if worst is not None:
        logger.info(f"Worst parameter {worst.name}: max relative error {worst.max_rel_error:.3e}")
    if report.tolerated:
        logger.info(f"{report.tolerated} elements passed only through abs_tol={report.abs_tol:g}")
    return report
