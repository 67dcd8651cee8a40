"""
Data Generator
==============
Generates synthetic GZSL benchmarks with planted attribute-appearance
ambiguity: every attribute has several visual "renderers", each class picks
one renderer per active attribute, and samples place those renderers into
random patches of a token grid.
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Set, Tuple

import numpy as np

from .config import GeneratorConfig
from .errors import ConfigError, ContractError

logger = logging.getLogger(__name__)

SPLITS = ("seen_train", "seen_test", "unseen_test")
INACTIVE = -1


@dataclass
class AttributePrototypeSet:
    """Shared attribute vectors S, category prototypes A and the group partition."""
    shared: np.ndarray              # S [N_s×D_sem], float32
    category: np.ndarray            # A [C×N_s], float32 in [0, 1]
    groups: List[List[int]]         # partition of range(N_s)

    @property
    def num_attributes(self) -> int:
        return int(self.category.shape[1])

    @property
    def num_classes(self) -> int:
        return int(self.category.shape[0])

    @property
    def semantic_width(self) -> int:
        return int(self.shared.shape[1])

    def validate(self) -> List[str]:
        problems = []
        members = sorted(i for group in self.groups for i in group)
        if members != list(range(self.num_attributes)):
            problems.append("groups must partition the attributes exactly once each")
        if np.any(np.all(self.category == 0, axis=1)):
            problems.append("a category prototype row is all zero")
        if self.shared.shape[0] != self.num_attributes:
            problems.append(
                f"S has {self.shared.shape[0]} rows for {self.num_attributes} attributes"
            )
        return problems


@dataclass
class GzslDataset:
    """Token grids, labels, split lists and prototypes of one benchmark."""
    features: np.ndarray            # [n, N_v, D_in], float32
    labels: np.ndarray              # [n], int64
    splits: Dict[str, np.ndarray]   # split name -> sample indices
    prototypes: AttributePrototypeSet
    seen_mask: np.ndarray           # [C] bool
    variants: np.ndarray            # [C×N_s] renderer index, -1 when inactive
    class_names: List[str]
    config: Dict = field(default_factory=dict)

    @property
    def num_samples(self) -> int:
        return int(self.labels.shape[0])

    @property
    def num_classes(self) -> int:
        return int(self.seen_mask.shape[0])

    @property
    def num_patches(self) -> int:
        return int(self.features.shape[1])

    @property
    def input_width(self) -> int:
        return int(self.features.shape[2])

    @property
    def num_attributes(self) -> int:
        return self.prototypes.num_attributes

    @property
    def num_groups(self) -> int:
        return len(self.prototypes.groups)

    @property
    def seen_classes(self) -> np.ndarray:
        return np.flatnonzero(self.seen_mask)

    @property
    def unseen_classes(self) -> np.ndarray:
        return np.flatnonzero(~self.seen_mask)

    def split(self, name: str) -> np.ndarray:
        if name not in SPLITS:
            raise ContractError(f"unknown split '{name}' (choose from {', '.join(SPLITS)})")
        return self.splits.get(name, np.zeros(0, dtype=np.int64))

    def identical(self, other: "GzslDataset") -> bool:
        """Bit-exact equality of every array and all metadata."""
        if set(self.splits) != set(other.splits):
            return False
        arrays_equal = (
            _same_bytes(self.features, other.features)
            and _same_bytes(self.labels, other.labels)
            and _same_bytes(self.seen_mask, other.seen_mask)
            and _same_bytes(self.variants, other.variants)
            and _same_bytes(self.prototypes.shared, other.prototypes.shared)
            and _same_bytes(self.prototypes.category, other.prototypes.category)
            and all(_same_bytes(self.splits[k], other.splits[k]) for k in self.splits)
        )
        return (
            arrays_equal
            and self.prototypes.groups == other.prototypes.groups
            and self.class_names == other.class_names
            and self.config == other.config
        )

    def get_statistics(self) -> Dict[str, int]:
        stats = {
            "total_samples": self.num_samples,
            "classes": self.num_classes,
            "seen_classes": int(self.seen_mask.sum()),
            "unseen_classes": int((~self.seen_mask).sum()),
            "attributes": self.num_attributes,
            "groups": self.num_groups,
        }
        stats.update({name: int(self.split(name).size) for name in SPLITS})
        return stats


def _same_bytes(a: np.ndarray, b: np.ndarray) -> bool:
    return a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()


def contiguous_groups(num_attributes: int, num_groups: int) -> List[List[int]]:
    """Equal contiguous blocks; attribute i belongs to group i * N_g // N_s."""
    groups: List[List[int]] = [[] for _ in range(num_groups)]
    for i in range(num_attributes):
        groups[i * num_groups // num_attributes].append(i)
    return groups


class DataGenerator:
    """Generates synthetic GZSL benchmarks."""

    MAX_DRAWS = 1000

    def __init__(self, config: Optional[GeneratorConfig] = None):
        """
        Initialize the data generator.

        Args:
            config: Generation settings; the seed inside it fixes every draw
        """
        self.config = config or GeneratorConfig()
        problems = self.config.validate()
        if problems:
            raise ConfigError("; ".join(problems))
        self.seed = self.config.seed
        self.rng = np.random.default_rng(self.seed)

    def _unit_rows(self, shape: Tuple[int, ...]) -> np.ndarray:
        values = self.rng.standard_normal(shape)
        return values / np.linalg.norm(values, axis=-1, keepdims=True)

    def _draw_class(
        self,
        candidates: np.ndarray,
        allowed_variants: Dict[int, List[int]],
        taken: Set[Tuple[int, ...]],
    ) -> Tuple[np.ndarray, np.ndarray]:
        """Pick a distinct active-attribute set and a renderer for each active attribute."""
        k = self.config.active_count
        if candidates.size < k:
            raise ConfigError(
                f"infeasible: only {candidates.size} attributes are rendered by seen classes, "
                f"{k} needed per class"
            )
        for _ in range(self.MAX_DRAWS):
            active = np.sort(self.rng.choice(candidates, size=k, replace=False))
            key = tuple(int(i) for i in active)
            if key in taken:
                continue
            taken.add(key)
            row = np.full(self.config.num_attributes, INACTIVE, dtype=np.int64)
            for i in active:
                options = allowed_variants[int(i)]
                row[i] = options[int(self.rng.integers(len(options)))]
            return active, row
        raise ConfigError(
            f"could not draw {self.config.num_seen + self.config.num_unseen} distinct class "
            f"prototypes with {k} active attributes out of {self.config.num_attributes}"
        )

    def _assign_classes(self) -> np.ndarray:
        """Renderer choice per (class, attribute); seen classes first."""
        cfg = self.config
        every_variant = {i: list(range(cfg.variants)) for i in range(cfg.num_attributes)}
        taken: Set[Tuple[int, ...]] = set()
        rows = []
        for _ in range(cfg.num_seen):
            _, row = self._draw_class(np.arange(cfg.num_attributes), every_variant, taken)
            rows.append(row)

        seen_rows = np.stack(rows)
        covered = {
            i: sorted({int(v) for v in seen_rows[:, i] if v != INACTIVE})
            for i in range(cfg.num_attributes)
        }
        covered = {i: v for i, v in covered.items() if v}
        for _ in range(cfg.num_unseen):
            _, row = self._draw_class(np.array(sorted(covered), dtype=np.int64), covered, taken)
            rows.append(row)
        return np.stack(rows)

    def _category_prototypes(self, variants: np.ndarray) -> np.ndarray:
        active = variants != INACTIVE
        if not self.config.continuous:
            return active.astype(np.float64)
        strengths = self.rng.uniform(0.2, 1.0, size=variants.shape)
        return np.where(active, strengths, 0.0)

    def render_sample(
        self,
        renderers: np.ndarray,
        variant_row: np.ndarray,
        strengths: np.ndarray,
    ) -> np.ndarray:
        """
        Render one token grid for a class.

        Args:
            renderers: Unit renderer vectors [N_s, G, D_in]
            variant_row: Renderer index per attribute, -1 when inactive
            strengths: Category prototype row scaling each active renderer

        Returns:
            Token grid [N_v, D_in]; inactive patches hold pure noise
        """
        cfg = self.config
        grid = np.zeros((cfg.num_patches, cfg.input_width))
        if cfg.noise > 0:
            grid += self.rng.normal(0.0, cfg.noise, size=grid.shape)
        active = np.flatnonzero(variant_row != INACTIVE)
        patches = self.rng.permutation(cfg.num_patches)[: active.size]
        for attribute, patch in zip(active, patches):
            grid[patch] += strengths[attribute] * renderers[attribute, variant_row[attribute]]
        return grid

    def _split_samples(self, labels: np.ndarray, seen_mask: np.ndarray) -> Dict[str, np.ndarray]:
        seen_train, seen_test, unseen_test = [], [], []
        for c in range(seen_mask.shape[0]):
            members = np.flatnonzero(labels == c)
            if not seen_mask[c]:
                unseen_test.extend(members.tolist())
                continue
            members = self.rng.permutation(members)
            n_test = int(round(self.config.test_fraction * members.size))
            if self.config.test_fraction > 0 and members.size > 1:
                n_test = min(max(n_test, 1), members.size - 1)
            seen_test.extend(members[:n_test].tolist())
            seen_train.extend(members[n_test:].tolist())
        return {
            "seen_train": np.array(sorted(seen_train), dtype=np.int64),
            "seen_test": np.array(sorted(seen_test), dtype=np.int64),
            "unseen_test": np.array(sorted(unseen_test), dtype=np.int64),
        }

    @staticmethod
    def check_coverage(variants: np.ndarray, seen_mask: np.ndarray) -> None:
        """Every renderer an unseen class uses must appear in some seen class."""
        seen_pairs = {
            (i, int(v)) for row in variants[seen_mask] for i, v in enumerate(row) if v != INACTIVE
        }
        for c in np.flatnonzero(~seen_mask):
            for i, v in enumerate(variants[c]):
                if v != INACTIVE and (i, int(v)) not in seen_pairs:
                    raise ContractError(
                        f"unseen class {c} uses renderer {v} of attribute {i}, never seen in training"
                    )

    def generate(self) -> GzslDataset:
        """
        Generate a complete benchmark.

        Returns:
            GzslDataset with float32 features and prototypes
        """
        cfg = self.config
        semantic_width = cfg.semantic_width or cfg.input_width
        num_classes = cfg.num_seen + cfg.num_unseen

        renderers = self._unit_rows((cfg.num_attributes, cfg.variants, cfg.input_width))
        shared = self._unit_rows((cfg.num_attributes, semantic_width))
        variants = self._assign_classes()
        category = self._category_prototypes(variants)
        seen_mask = np.arange(num_classes) < cfg.num_seen
        self.check_coverage(variants, seen_mask)

        labels = np.repeat(np.arange(num_classes, dtype=np.int64), cfg.samples_per_class)
        features = np.empty((labels.size, cfg.num_patches, cfg.input_width), dtype=np.float32)
        for n, c in enumerate(labels):
            features[n] = self.render_sample(renderers, variants[c], category[c])

        splits = self._split_samples(labels, seen_mask)
        class_names = [
            f"seen_{c:03d}" if seen_mask[c] else f"unseen_{c - cfg.num_seen:03d}"
            for c in range(num_classes)
        ]
        dataset = GzslDataset(
            features=features,
            labels=labels,
            splits=splits,
            prototypes=AttributePrototypeSet(
                shared=shared.astype(np.float32),
                category=category.astype(np.float32),
                groups=contiguous_groups(cfg.num_attributes, cfg.num_groups),
            ),
            seen_mask=seen_mask,
            variants=variants,
            class_names=class_names,
            config=asdict(cfg),
        )
        problems = dataset.prototypes.validate()
        if problems:
            raise ContractError("; ".join(problems))
        logger.info(
            f"Generated {dataset.num_samples} samples over {num_classes} classes "
            f"({cfg.num_seen} seen | {cfg.num_unseen} unseen), seed {self.seed}"
        )
        return dataset


def generate(config: Optional[GeneratorConfig] = None) -> GzslDataset:
    return DataGenerator(config).generate()
