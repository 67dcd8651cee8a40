"""
Trainer
=======
Optimization loop over the seen-train split: deterministic shuffling,
per-sample graphs averaged into a batch loss, Adam updates, per-epoch metrics
and periodic checkpoints.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from .checkpoint import save_checkpoint
from .config import RunConfig, TrainConfig
from .data_generator import GzslDataset
from .errors import ContractError, NumericalError
from .head_loss import batch_breakdown
from .model import GzslModel
from .numcore import GradientMap, Parameter, Tape

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ["epoch", "L_cls", "L_sem", "L_deb", "total", "seen_train_acc"]


class AdamOptimizer:
    """Adam with bias correction; state is keyed by parameter name."""

    def __init__(
        self,
        named_params: List[tuple],
        config: TrainConfig,
        lr_schedule: Optional[Callable[[int], float]] = None,
    ):
        """
        Args:
            named_params: (name, Parameter) pairs in a fixed order
            config: Learning rate and Adam constants
            lr_schedule: Optional multiplier of the learning rate as a function of the step
        """
        self.params: Dict[str, Parameter] = dict(named_params)
        self.config = config
        self.lr_schedule = lr_schedule
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def learning_rate(self) -> float:
        lr = self.config.learning_rate
        if self.lr_schedule is not None:
            lr *= self.lr_schedule(self.step_count)
        return lr

    def step(self, grads: GradientMap) -> None:
        """One update; parameters the pass never reached get a zero gradient."""
        self.step_count += 1
        t = self.step_count
        b1, b2, eps = self.config.beta1, self.config.beta2, self.config.adam_eps
        lr = self.learning_rate()
        for name, param in self.params.items():
            g = grads.for_tensor(param)
            if g is None:
                g = np.zeros_like(param.data)
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            if lr == 0.0:
                continue
            m_hat = self.m[name] / (1.0 - b1 ** t)
            v_hat = self.v[name] / (1.0 - b2 ** t)
            param.data -= lr * m_hat / (np.sqrt(v_hat) + eps)

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {f"m.{name}": m.copy() for name, m in self.m.items()}
        state.update({f"v.{name}": v.copy() for name, v in self.v.items()})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray], step_count: int) -> None:
        for name in self.params:
            self.m[name] = np.array(state[f"m.{name}"], dtype=np.float64)
            self.v[name] = np.array(state[f"v.{name}"], dtype=np.float64)
        self.step_count = int(step_count)


@dataclass
class TrainResult:
    model: GzslModel
    metrics: pd.DataFrame
    steps: int


def epoch_order(seed: int, epoch: int, indices: np.ndarray) -> np.ndarray:
    """Shuffle of the training indices for one epoch (0-based), fixed by (seed, epoch)."""
    return np.random.default_rng([seed, epoch]).permutation(indices)


class Trainer:
    """Trains a GzslModel on the seen-train split of a dataset."""

    def __init__(
        self,
        model: GzslModel,
        dataset: GzslDataset,
        config: RunConfig,
        checkpoint_dir: Optional[Path] = None,
        progress: bool = True,
        lr_schedule: Optional[Callable[[int], float]] = None,
    ):
        self.model = model
        self.dataset = dataset
        self.config = config
        self.checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None
        self.progress = progress
        self.optimizer = AdamOptimizer(list(model.named_parameters()), config.train, lr_schedule)

        self.train_indices = dataset.split("seen_train")
        if self.train_indices.size == 0:
            raise ContractError("dataset has no seen-train samples")
        self.features = dataset.features.astype(np.float64)
        self.shared = dataset.prototypes.shared.astype(np.float64)
        self.category = dataset.prototypes.category.astype(np.float64)
        self.seen_mask = dataset.seen_mask
        self.history: List[Dict[str, float]] = []

    @property
    def batches_per_epoch(self) -> int:
        return math.ceil(self.train_indices.size / self.config.train.batch_size)

    def _batches(self, epoch: int) -> List[np.ndarray]:
        order = epoch_order(self.config.seed, epoch, self.train_indices)
        size = self.config.train.batch_size
        return [order[i:i + size] for i in range(0, order.size, size)]

    def train_step(self, batch: np.ndarray, step_index: int):
        """Forward, backward and update for one batch.

        Returns:
            The batch-mean loss breakdown and the number of samples whose
            top-scoring seen class (before the update) is their label
        """
        tape = Tape()
        with tape:
            per_sample = [
                self.model.loss(
                    self.features[i],
                    int(self.dataset.labels[i]),
                    self.shared,
                    self.category,
                    self.seen_mask,
                    self.config.loss,
                )
                for i in batch
            ]
            breakdown = batch_breakdown(per_sample)
        total = breakdown.total.item()
        if not np.isfinite(total):
            raise NumericalError(f"non-finite training loss {total}", batch_index=step_index)
        grads = tape.backward(breakdown.total)
        for name in grads:
            if not np.all(np.isfinite(grads[name])):
                raise NumericalError(f"non-finite gradient for {name}", batch_index=step_index)
        self.optimizer.step(grads)

        correct = 0
        for sample, i in zip(per_sample, batch):
            seen_scores = np.where(sample.scores.seen_mask, sample.scores.scores.data, -np.inf)
            correct += int(np.argmax(seen_scores) == self.dataset.labels[i])
        return breakdown, correct

    def run(self, max_steps: Optional[int] = None) -> TrainResult:
        """
        Train until the configured epoch count (or ``max_steps`` global steps).

        Resumes from the optimizer's step counter, so a restored optimizer
        continues with the batch an uninterrupted run would take next.

        Returns:
            TrainResult with a metrics frame of one row per (partially) run epoch
        """
        per_epoch = self.batches_per_epoch
        total_steps = self.config.train.epochs * per_epoch
        if max_steps is not None:
            total_steps = min(total_steps, max_steps)
        step = self.optimizer.step_count

        while step < total_steps:
            epoch = step // per_epoch
            batches = self._batches(epoch)
            sums = {"L_cls": 0.0, "L_sem": 0.0, "L_deb": 0.0, "total": 0.0}
            seen, correct = 0, 0
            start = step % per_epoch
            last = min(per_epoch, start + total_steps - step)
            bar = tqdm(
                range(start, last),
                desc=f"Epoch {epoch + 1}/{self.config.train.epochs}",
                leave=False,
                disable=not self.progress,
            )
            for b in bar:
                batch = batches[b]
                breakdown, batch_correct = self.train_step(batch, step)
                n = len(batch)
                sums["L_cls"] += breakdown.cls.item() * n
                sums["L_sem"] += breakdown.sem.item() * n
                sums["L_deb"] += breakdown.deb.item() * n
                sums["total"] += breakdown.total.item() * n
                seen += n
                correct += batch_correct
                step += 1
                bar.set_postfix(loss=f"{breakdown.total.item():.4f}")

            row = {"epoch": epoch + 1}
            row.update({key: value / seen for key, value in sums.items()})
            row["seen_train_acc"] = correct / seen
            self.history.append(row)
            logger.info(
                f"Epoch {epoch + 1}: L_cls={row['L_cls']:.4f} L_sem={row['L_sem']:.4f} "
                f"L_deb={row['L_deb']:.4f} total={row['total']:.4f} "
                f"seen-train acc={row['seen_train_acc']:.3f}"
            )
            interval = self.config.train.checkpoint_interval
            epoch_done = step % per_epoch == 0
            if self.checkpoint_dir and interval and epoch_done and (epoch + 1) % interval == 0:
                self.save_checkpoint(self.checkpoint_dir / f"epoch_{epoch + 1:04d}")

        return TrainResult(model=self.model, metrics=self.metrics_frame(), steps=step)

    def metrics_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.history, columns=METRIC_COLUMNS)

    def save_metrics(self, path) -> Path:
        path = Path(path)
        self.metrics_frame().to_csv(path, index=False, float_format="%.17g")
        return path

    def save_checkpoint(self, path) -> Path:
        return save_checkpoint(self.model, path, optimizer=self.optimizer, history=self.history)


def train(
    model: GzslModel,
    dataset: GzslDataset,
    config: RunConfig,
    checkpoint_dir: Optional[Path] = None,
    progress: bool = True,
) -> TrainResult:
    """Train ``model`` in place and return it with its per-epoch metrics."""
    return Trainer(model, dataset, config, checkpoint_dir=checkpoint_dir, progress=progress).run()


def prepare_model(config: RunConfig, dataset: GzslDataset, seed: Optional[int] = None) -> Tuple[RunConfig, GzslModel]:
    """Bind the model shape to ``dataset``, validate, and build a fresh model."""
    bound = config.with_dataset_shape(
        dataset.num_attributes,
        dataset.num_groups,
        dataset.num_patches,
        dataset.input_width,
    ).check()
    model = GzslModel(bound, semantic_width=dataset.prototypes.semantic_width, seed=seed)
    return bound, model
