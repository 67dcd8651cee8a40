"""
GZSL Model
==========
Backbone, Z cascaded DSVTMs and the attribute head assembled into one
parameter tree, with per-sample scoring and the combined training loss.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from . import numcore as nc
from .backbone import ToyBackbone
from .config import LossWeights, RunConfig
from .dsvtm import DSVTM, DsvtmState, semantic_alignment_loss
from .head_loss import (
    ClassificationHead,
    LossBreakdown,
    ScoreVector,
    classification_loss,
    cosine_scores,
    debias_loss,
    total_loss,
)
from .layers import Linear, Module, ModuleList
from .numcore import Tensor

logger = logging.getLogger(__name__)


@dataclass
class ModelOutput:
    pred: Tensor                   # predicted attribute confidences [N_s]
    f_hat: Tensor                  # final adapted patch features [N_v×D]
    states: List[DsvtmState]

    @property
    def affinities(self) -> List[Tensor]:
        return [m for state in self.states for m in state.affinities]


class GzslModel(Module):
    """Parameter paths: ``backbone.*``, ``adapter.*`` (when D_sem != D),
    ``dsvtm.<z>.imse.<r>.*``, ``dsvtm.<z>.smid.*`` and ``head.weight``."""

    def __init__(self, config: RunConfig, semantic_width: Optional[int] = None, seed: Optional[int] = None):
        super().__init__()
        self.config = config
        seed = config.seed if seed is None else seed
        rng = np.random.default_rng(seed)
        dsvtm_config = config.dsvtm
        self.semantic_width = semantic_width or dsvtm_config.width

        self.backbone = ToyBackbone(rng, config.backbone, dsvtm_config)
        if self.semantic_width != dsvtm_config.width:
            self.adapter = Linear(rng, self.semantic_width, dsvtm_config.width)
        else:
            self.adapter = None
        self.dsvtm = ModuleList(DSVTM(rng, dsvtm_config) for _ in range(dsvtm_config.modules))
        self.head = ClassificationHead(rng, dsvtm_config.width, dsvtm_config.num_attributes)
        self.assign_names()
        logger.debug(f"Built model with {self.num_parameters()} parameters (seed {seed})")

    @property
    def num_alignment_terms(self) -> int:
        return self.config.dsvtm.modules * self.config.dsvtm.affinities_per_module

    def shared_prototypes(self, s_sem) -> Tensor:
        s = nc.as_tensor(s_sem)
        return self.adapter(s) if self.adapter is not None else s

    def forward(self, tokens, s_sem) -> ModelOutput:
        f_hat, states = self.backbone.forward_with_dsvtm(
            nc.as_tensor(tokens), list(self.dsvtm), self.shared_prototypes(s_sem)
        )
        return ModelOutput(pred=self.head(f_hat), f_hat=f_hat, states=states)

    __call__ = forward

    def scores(self, tokens, s_sem, prototypes, seen_mask: np.ndarray, tau: float) -> ScoreVector:
        return cosine_scores(self.forward(tokens, s_sem).pred, prototypes, tau, seen_mask)

    def loss(
        self,
        tokens,
        label: int,
        s_sem,
        prototypes: np.ndarray,
        seen_mask: np.ndarray,
        weights: LossWeights,
    ) -> LossBreakdown:
        """Three-term objective for one seen-class sample."""
        output = self.forward(tokens, s_sem)
        scores = cosine_scores(output.pred, prototypes, weights.tau, seen_mask)
        a_y = np.asarray(prototypes[label], dtype=np.float64)
        sem_terms = [semantic_alignment_loss(m, a_y) for m in output.affinities]
        breakdown = total_loss(
            classification_loss(scores, label),
            sem_terms,
            debias_loss(scores),
            weights,
            expected_terms=self.num_alignment_terms,
        )
        breakdown.scores = scores
        return breakdown
