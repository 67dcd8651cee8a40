"""
Head and Losses
===============
Attribute-space classification head, cosine class scoring and the three
training objectives: classification over seen classes, semantic alignment of
the affinity maps, and seen/unseen score debiasing.
"""

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from . import numcore as nc
from .config import LossWeights
from .errors import ContractError
from .layers import Module, uniform_init
from .numcore import Parameter, Tensor


@dataclass
class ScoreVector:
    """Per-class scores over seen and unseen classes for one sample."""

    scores: Tensor                 # [C], each in [-tau, tau]
    seen_mask: np.ndarray          # [C] bool
    degenerate: np.ndarray         # [C] bool, zero-norm fallbacks scored 0

    @property
    def num_classes(self) -> int:
        return int(self.seen_mask.shape[0])

    @property
    def seen_ids(self) -> np.ndarray:
        return np.flatnonzero(self.seen_mask)

    @property
    def unseen_ids(self) -> np.ndarray:
        return np.flatnonzero(~self.seen_mask)

    @property
    def any_degenerate(self) -> bool:
        return bool(self.degenerate.any())


@dataclass
class LossBreakdown:
    cls: Tensor
    sem: Tensor
    deb: Tensor
    total: Tensor
    scores: Optional[ScoreVector] = None


class ClassificationHead(Module):
    """Projects pooled visual features into attribute space (D → N_s), no bias."""

    def __init__(self, rng: np.random.Generator, width: int, num_attributes: int):
        super().__init__()
        self.weight = Parameter(uniform_init(rng, width, (width, num_attributes)))

    def __call__(self, f_hat: Tensor) -> Tensor:
        return class_head(f_hat, self.weight)


def class_head(f_hat: Tensor, w: Tensor) -> Tensor:
    """Max-pool the patches of F̂[N_v×D] into a D-vector, then multiply by w[D×N_s]."""
    pooled = nc.gmp(f_hat, axis=0)
    return nc.matmul(pooled, w)


def cosine_scores(pred: Tensor, prototypes, tau: float, seen_mask: np.ndarray) -> ScoreVector:
    """tau-scaled cosine similarity of the predicted attribute vector to every class prototype.

    Args:
        pred: Predicted attribute confidences [N_s]
        prototypes: Category prototype matrix A [C×N_s]
        tau: Scaling factor
        seen_mask: Boolean mask [C] marking seen classes

    Returns:
        ScoreVector whose ``degenerate`` mask flags zero-norm fallbacks
    """
    seen_mask = np.asarray(seen_mask, dtype=bool)
    prototypes = nc.as_tensor(prototypes)
    if seen_mask.shape != (prototypes.shape[0],):
        raise ContractError(
            f"seen mask has {seen_mask.shape[0]} entries for {prototypes.shape[0]} classes"
        )
    cos, degenerate = nc.cosine_similarity(pred, prototypes)
    return ScoreVector(scores=nc.mul(cos, float(tau)), seen_mask=seen_mask, degenerate=degenerate)


def classification_loss(scores: ScoreVector, y: int) -> Tensor:
    """Cross-entropy of the softmax taken over seen-class scores only."""
    if not 0 <= y < scores.num_classes or not scores.seen_mask[y]:
        raise ContractError(f"classification loss needs a seen label, got class {y}")
    seen_ids = scores.seen_ids
    seen_scores = nc.select(scores.scores, seen_ids)
    position = int(np.searchsorted(seen_ids, y))
    return nc.sub(nc.logsumexp(seen_scores), nc.pick(seen_scores, position))


def _mean_and_variance(values: Tensor):
    mean = nc.mean_all(values)
    variance = nc.mean_all(nc.square(nc.sub(values, mean)))
    return mean, variance


def debias_loss(scores: ScoreVector) -> Tensor:
    """Squared gap between seen and unseen score means plus squared gap between
    their population variances, for one sample."""
    seen_ids, unseen_ids = scores.seen_ids, scores.unseen_ids
    if seen_ids.size == 0 or unseen_ids.size == 0:
        raise ContractError("debias loss needs at least one seen and one unseen class")
    alpha_s, beta_s = _mean_and_variance(nc.select(scores.scores, seen_ids))
    alpha_u, beta_u = _mean_and_variance(nc.select(scores.scores, unseen_ids))
    return nc.add(nc.square(nc.sub(alpha_s, alpha_u)), nc.square(nc.sub(beta_s, beta_u)))


def total_loss(
    cls: Tensor,
    sem_terms: Sequence[Tensor],
    deb: Tensor,
    weights: LossWeights,
    expected_terms: Optional[int] = None,
) -> LossBreakdown:
    """cls + lambda_sem * sum(sem_terms) + lambda_deb * deb.

    ``expected_terms`` is the Z·R alignment-term count of the model; a list of
    any other length is rejected.
    """
    if expected_terms is not None and len(sem_terms) != expected_terms:
        raise ContractError(
            f"expected {expected_terms} semantic alignment terms, got {len(sem_terms)}"
        )
    sem = nc.add_n(sem_terms) if sem_terms else nc.as_tensor(0.0)
    total = nc.add(
        nc.add(cls, nc.mul(sem, float(weights.lambda_sem))),
        nc.mul(deb, float(weights.lambda_deb)),
    )
    return LossBreakdown(cls=cls, sem=sem, deb=deb, total=total)


def batch_mean(losses: List[Tensor]) -> Tensor:
    if not losses:
        raise ContractError("cannot average an empty batch")
    return nc.mul(nc.add_n(losses), 1.0 / len(losses))


def batch_breakdown(breakdowns: List[LossBreakdown]) -> LossBreakdown:
    """Per-sample breakdowns averaged term by term."""
    return LossBreakdown(
        cls=batch_mean([b.cls for b in breakdowns]),
        sem=batch_mean([b.sem for b in breakdowns]),
        deb=batch_mean([b.deb for b in breakdowns]),
        total=batch_mean([b.total for b in breakdowns]),
    )
