"""
Evaluator
=========
GZSL inference with calibrated stacking, macro per-class accuracies and the
harmonic mean, gamma sweeps, and CSV exports of score distributions,
affinity maps and predicted attribute vectors.

File schemas:
    report.json                 mode, gamma, tau, U, S, H, per_class table,
                                degenerate_entries, records with per-class scores
    sweep.csv                   gamma, U, S, H
    distributions.csv           sample, label, split, max_seen, max_unseen,
                                seen_mean, seen_var, unseen_mean, unseen_var
    distribution_summary.json   alpha_s, beta_s, alpha_u, beta_u, mean_gap, samples
    affinity_z{z}_r{r}.csv      rows = attributes, columns = patches
    attribute_predictions.csv   sample, split, label, pred_*, true_*, mae, cosine
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from .data_generator import GzslDataset
from .errors import ContractError, DatasetError
from .head_loss import ScoreVector
from .model import GzslModel

logger = logging.getLogger(__name__)

TEST_SPLITS = ("seen_test", "unseen_test")


def harmonic_mean(u: float, s: float) -> float:
    """H = 2SU / (S + U), defined as 0 when both are 0."""
    if u + s == 0:
        return 0.0
    return 2.0 * s * u / (s + u)


def calibrated_predict(scores: Union[ScoreVector, np.ndarray], gamma: float, seen_mask: Optional[np.ndarray] = None) -> int:
    """Argmax of score - gamma * [class is seen]; ties go to the lowest class id."""
    if isinstance(scores, ScoreVector):
        values, seen_mask = scores.scores.data, scores.seen_mask
    else:
        values = np.asarray(scores, dtype=np.float64)
        if seen_mask is None:
            raise ContractError("calibrated_predict on a raw array needs a seen mask")
    return int(np.argmax(values - gamma * np.asarray(seen_mask, dtype=np.float64)))


def calibrated_predictions(score_matrix: np.ndarray, seen_mask: np.ndarray, gamma: float) -> np.ndarray:
    """Row-wise calibrated_predict over a [n×C] score matrix."""
    return np.argmax(score_matrix - gamma * seen_mask.astype(np.float64)[None, :], axis=1)


def per_class_accuracy(predictions: np.ndarray, labels: np.ndarray) -> Dict[int, float]:
    """Top-1 accuracy of every class present in ``labels``."""
    return {
        int(c): float(np.mean(predictions[labels == c] == c))
        for c in np.unique(labels)
    }


@dataclass
class EvalReport:
    """U, S and H at one gamma, with the per-class table behind them."""

    gamma: float
    tau: float
    U: float
    S: Optional[float]
    H: Optional[float]
    per_class: Dict[str, Dict] = field(default_factory=dict)
    records: List[Dict] = field(default_factory=list)
    degenerate_entries: int = 0     # zero-norm (sample, class) entries scored 0
    mode: str = "gzsl"
    averaging: str = "per-class"

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: Dict) -> "EvalReport":
        return cls(**raw)

    def save(self, path) -> Path:
        path = Path(path)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2)
        return path

    @classmethod
    def load(cls, path) -> "EvalReport":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))

    def summary(self) -> str:
        if self.mode == "zsl":
            return f"gamma={self.gamma:.4f} ZSL acc={100 * self.U:.2f}"
        return f"gamma={self.gamma:.4f} U={100 * self.U:.2f} S={100 * self.S:.2f} H={100 * self.H:.2f}"


@dataclass
class SweepResult:
    reports: List[EvalReport]

    @property
    def best(self) -> EvalReport:
        """Report with the highest H; the lowest gamma wins ties."""
        return max(self.reports, key=lambda r: (r.H, -r.gamma))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [{"gamma": r.gamma, "U": r.U, "S": r.S, "H": r.H} for r in self.reports],
            columns=["gamma", "U", "S", "H"],
        )

    def save(self, path) -> Path:
        path = Path(path)
        self.to_frame().to_csv(path, index=False, float_format="%.17g")
        return path


def default_gammas(tau: float, steps: int = 41) -> np.ndarray:
    return np.linspace(0.0, tau, steps)


class Evaluator:
    """Scores every test sample once, then evaluates any number of gammas."""

    def __init__(
        self,
        model: GzslModel,
        dataset: GzslDataset,
        tau: Optional[float] = None,
        progress: bool = False,
    ):
        self.model = model
        self.dataset = dataset
        self.tau = model.config.loss.tau if tau is None else tau
        self.progress = progress
        self.shared = dataset.prototypes.shared.astype(np.float64)
        self.category = dataset.prototypes.category.astype(np.float64)
        self._cache: Dict[int, np.ndarray] = {}
        self._degenerate: Dict[int, np.ndarray] = {}

    def score_vector(self, index: int) -> ScoreVector:
        return self.model.scores(
            self.dataset.features[index].astype(np.float64),
            self.shared,
            self.category,
            self.dataset.seen_mask,
            self.tau,
        )

    def scores(self, indices: Sequence[int]) -> np.ndarray:
        """Score matrix [len(indices)×C]; computed without a tape and cached."""
        missing = [int(i) for i in indices if int(i) not in self._cache]
        for i in tqdm(missing, desc="Scoring", leave=False, disable=not self.progress):
            vector = self.score_vector(i)
            self._cache[i] = vector.scores.data.copy()
            self._degenerate[i] = np.asarray(vector.degenerate, dtype=bool).copy()
        if not len(indices):
            return np.zeros((0, self.dataset.num_classes))
        return np.stack([self._cache[int(i)] for i in indices])

    def degenerate_entries(self, indices: Sequence[int]) -> int:
        """Zero-norm (sample, class) score entries among already scored samples."""
        return int(sum(self._degenerate[int(i)].sum() for i in indices))

    def _records(self, split: str, indices, labels, predictions, scores) -> List[Dict]:
        return [
            {
                "sample": int(i),
                "label": int(y),
                "split": split,
                "prediction": int(p),
                "degenerate": bool(self._degenerate[int(i)].any()),
                "scores": [float(v) for v in row],
            }
            for i, y, p, row in zip(indices, labels, predictions, scores)
        ]

    def _split_indices(self, name: str) -> np.ndarray:
        indices = self.dataset.split(name)
        if indices.size == 0:
            raise ContractError(f"split '{name}' is empty")
        return indices

    def evaluate(self, gamma: float, per_sample: bool = False) -> EvalReport:
        """
        GZSL evaluation at one calibration gamma.

        Args:
            gamma: Amount subtracted from every seen-class score
            per_sample: Average accuracy over samples instead of classes (diagnostics)

        Returns:
            EvalReport with U over unseen-test, S over seen-test and H
        """
        seen_mask = self.dataset.seen_mask
        accuracies = {}
        per_class: Dict[str, Dict] = {}
        records: List[Dict] = []
        degenerate = 0
        for split in ("unseen_test", "seen_test"):
            indices = self._split_indices(split)
            labels = self.dataset.labels[indices]
            scores = self.scores(indices)
            predictions = calibrated_predictions(scores, seen_mask, gamma)
            degenerate += self.degenerate_entries(indices)
            table = per_class_accuracy(predictions, labels)
            if per_sample:
                accuracies[split] = float(np.mean(predictions == labels))
            else:
                accuracies[split] = float(np.mean(list(table.values())))
            for c, acc in table.items():
                per_class[self.dataset.class_names[c]] = {
                    "class_id": c,
                    "split": split,
                    "accuracy": acc,
                    "samples": int(np.sum(labels == c)),
                }
            records.extend(self._records(split, indices, labels, predictions, scores))
        u, s = accuracies["unseen_test"], accuracies["seen_test"]
        report = EvalReport(
            gamma=float(gamma),
            tau=float(self.tau),
            U=u,
            S=s,
            H=harmonic_mean(u, s),
            per_class=per_class,
            records=records,
            degenerate_entries=degenerate,
            averaging="per-sample" if per_sample else "per-class",
        )
        logger.info(f"Evaluation: {report.summary()}")
        return report

    def evaluate_zsl(self) -> EvalReport:
        """Conventional ZSL: unseen-test samples, prediction restricted to unseen classes."""
        indices = self._split_indices("unseen_test")
        labels = self.dataset.labels[indices]
        unseen = self.dataset.unseen_classes
        scores = self.scores(indices)
        predictions = unseen[np.argmax(scores[:, unseen], axis=1)]
        table = per_class_accuracy(predictions, labels)
        report = EvalReport(
            gamma=0.0,
            tau=float(self.tau),
            U=float(np.mean(list(table.values()))),
            S=None,
            H=None,
            per_class={
                self.dataset.class_names[c]: {
                    "class_id": c, "split": "unseen_test", "accuracy": acc,
                    "samples": int(np.sum(labels == c)),
                }
                for c, acc in table.items()
            },
            records=self._records("unseen_test", indices, labels, predictions, scores),
            degenerate_entries=self.degenerate_entries(indices),
            mode="zsl",
        )
        logger.info(f"Evaluation: {report.summary()}")
        return report

    def sweep(self, gammas: Sequence[float]) -> SweepResult:
        gammas = [float(g) for g in gammas]
        if not gammas:
            raise ContractError("gamma sweep needs at least one gamma")
        if any(b < a for a, b in zip(gammas, gammas[1:])):
            raise ContractError("gammas must be sorted ascending")
        result = SweepResult([self.evaluate(g) for g in gammas])
        best = result.best
        logger.info(f"Best H {100 * best.H:.2f} at gamma={best.gamma:.4f}")
        return result

    def seen_train_accuracy(self) -> float:
        """Top-1 over seen classes on the seen-train split, per sample."""
        indices = self._split_indices("seen_train")
        scores = self.scores(indices)
        masked = np.where(self.dataset.seen_mask[None, :], scores, -np.inf)
        return float(np.mean(np.argmax(masked, axis=1) == self.dataset.labels[indices]))

    # -------------------------------------------------------------------------
    # Exports
    # -------------------------------------------------------------------------

    def distributions(self, splits: Sequence[str] = TEST_SPLITS) -> pd.DataFrame:
        """Per-sample seen/unseen score statistics."""
        seen_mask = self.dataset.seen_mask
        rows = []
        for split in splits:
            indices = self.dataset.split(split)
            scores = self.scores(indices)
            seen_scores, unseen_scores = scores[:, seen_mask], scores[:, ~seen_mask]
            for n, i in enumerate(indices):
                rows.append({
                    "sample": int(i),
                    "label": int(self.dataset.labels[i]),
                    "split": split,
                    "max_seen": float(seen_scores[n].max()),
                    "max_unseen": float(unseen_scores[n].max()),
                    "seen_mean": float(seen_scores[n].mean()),
                    "seen_var": float(seen_scores[n].var()),
                    "unseen_mean": float(unseen_scores[n].mean()),
                    "unseen_var": float(unseen_scores[n].var()),
                })
        return pd.DataFrame(rows)


def distribution_summary(frame: pd.DataFrame) -> Dict[str, float]:
    """alpha/beta aggregates: column means of the per-sample means and variances."""
    alpha_s = float(frame["seen_mean"].mean())
    alpha_u = float(frame["unseen_mean"].mean())
    return {
        "alpha_s": alpha_s,
        "beta_s": float(frame["seen_var"].mean()),
        "alpha_u": alpha_u,
        "beta_u": float(frame["unseen_var"].mean()),
        "mean_gap": abs(alpha_s - alpha_u),
        "samples": int(len(frame)),
    }


def _write(path: Path, writer) -> Path:
    try:
        writer(path)
    except OSError as e:
        raise DatasetError(f"cannot write {path}: {e}") from e
    return path


def export_distributions(
    model: GzslModel,
    dataset: GzslDataset,
    path,
    tau: Optional[float] = None,
    evaluator: Optional[Evaluator] = None,
) -> Dict[str, Path]:
    """
    Write distributions.csv and distribution_summary.json into ``path``.

    Returns:
        Mapping of artifact name to written file
    """
    path = Path(path)
    evaluator = evaluator or Evaluator(model, dataset, tau)
    frame = evaluator.distributions()
    summary = distribution_summary(frame)
    csv_path = _write(path / "distributions.csv",
                      lambda p: frame.to_csv(p, index=False, float_format="%.17g"))
    summary_path = _write(path / "distribution_summary.json",
                          lambda p: p.write_text(json.dumps(summary, indent=2), encoding="utf-8"))
    logger.info(
        f"Score distributions: alpha_s={summary['alpha_s']:.4f} alpha_u={summary['alpha_u']:.4f} "
        f"beta_s={summary['beta_s']:.4f} beta_u={summary['beta_u']:.4f}"
    )
    return {"distributions": csv_path, "summary": summary_path}


def affinity_frames(model: GzslModel, dataset: GzslDataset, sample: int) -> Dict[str, pd.DataFrame]:
    """Affinity matrices of one sample keyed ``affinity_z{z}_r{r}`` (1-based)."""
    if not 0 <= sample < dataset.num_samples:
        raise ContractError(f"sample {sample} out of range [0, {dataset.num_samples})")
    output = model.forward(
        dataset.features[sample].astype(np.float64),
        dataset.prototypes.shared.astype(np.float64),
    )
    attributes = [f"attr_{i:03d}" for i in range(dataset.num_attributes)]
    patches = [f"patch_{j:02d}" for j in range(dataset.num_patches)]
    frames = {}
    for z, state in enumerate(output.states, start=1):
        for r, m in enumerate(state.affinities, start=1):
            frames[f"affinity_z{z}_r{r}"] = pd.DataFrame(m.data, index=attributes, columns=patches)
    return frames


def export_affinities(model: GzslModel, dataset: GzslDataset, sample: int, path) -> List[Path]:
    path = Path(path)
    written = []
    for name, frame in affinity_frames(model, dataset, sample).items():
        written.append(_write(path / f"{name}.csv",
                              lambda p, f=frame: f.to_csv(p, index_label="attribute", float_format="%.17g")))
    logger.info(f"Exported {len(written)} affinity matrices for sample {sample}")
    return written


def attribute_predictions(model: GzslModel, dataset: GzslDataset, splits: Sequence[str] = TEST_SPLITS) -> pd.DataFrame:
    """Head output f_c against the ground-truth prototype a_y, per sample."""
    shared = dataset.prototypes.shared.astype(np.float64)
    category = dataset.prototypes.category.astype(np.float64)
    rows = []
    for split in splits:
        for i in dataset.split(split):
            pred = model.forward(dataset.features[i].astype(np.float64), shared).pred.data
            truth = category[dataset.labels[i]]
            denom = np.linalg.norm(pred) * np.linalg.norm(truth)
            row = {"sample": int(i), "split": split, "label": int(dataset.labels[i])}
            row.update({f"pred_{k:03d}": float(v) for k, v in enumerate(pred)})
            row.update({f"true_{k:03d}": float(v) for k, v in enumerate(truth)})
            row["mae"] = float(np.mean(np.abs(pred - truth)))
            row["cosine"] = float(pred @ truth / denom) if denom > 0 else 0.0
            rows.append(row)
    return pd.DataFrame(rows)


def export_attribute_predictions(model: GzslModel, dataset: GzslDataset, path) -> Dict[str, Path]:
    """Write attribute_predictions.csv and attribute_summary.csv (per class) into ``path``."""
    path = Path(path)
    frame = attribute_predictions(model, dataset)
    summary = (
        frame.groupby(["label", "split"], sort=True)
        .agg(samples=("sample", "count"), mae=("mae", "mean"), cosine=("cosine", "mean"))
        .reset_index()
    )
    summary.insert(1, "class_name", [dataset.class_names[c] for c in summary["label"]])
    return {
        "predictions": _write(path / "attribute_predictions.csv",
                              lambda p: frame.to_csv(p, index=False, float_format="%.17g")),
        "summary": _write(path / "attribute_summary.csv",
                          lambda p: summary.to_csv(p, index=False, float_format="%.17g")),
    }
