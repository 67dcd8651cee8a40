"""
Dataset I/O
===========
On-disk dataset format: a manifest.json plus little-endian float32 flat files.

    manifest.json       schema_version, created_at, shapes, class_names,
                        seen_mask, labels, splits, groups, variants, config,
                        files (name -> shape and sha256)
    features.f32        [num_samples × N_v × D_in]
    prototypes_A.f32    [C × N_s]
    prototypes_S.f32    [N_s × D_sem]

``created_at`` is the only field that differs between two saves of the same
dataset.
"""

import json
import logging
from datetime import datetime
from pathlib import Path
from typing import Any, Dict

import numpy as np

from .data_generator import SPLITS, AttributePrototypeSet, GzslDataset
from .errors import DatasetError, ManifestError, ShapeInconsistencyError, UnsupportedVersionError
from .utils import FLOAT32_LE, format_size, read_flat, write_flat

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
SUPPORTED_VERSIONS = (1,)
MANIFEST = "manifest.json"

FEATURES_FILE = "features.f32"
CATEGORY_FILE = "prototypes_A.f32"
SHARED_FILE = "prototypes_S.f32"

_REQUIRED_KEYS = (
    "schema_version", "shapes", "class_names", "seen_mask", "labels",
    "splits", "groups", "variants", "files",
)


def save(dataset: GzslDataset, path) -> Path:
    """
    Write a dataset directory.

    Args:
        dataset: Dataset to write
        path: Target directory (created if missing)

    Returns:
        Path of the written manifest
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)

    arrays = {
        FEATURES_FILE: dataset.features,
        CATEGORY_FILE: dataset.prototypes.category,
        SHARED_FILE: dataset.prototypes.shared,
    }
    files = {}
    for name, array in arrays.items():
        files[name] = {
            "shape": list(array.shape),
            "sha256": write_flat(path / name, array, FLOAT32_LE),
        }

    manifest = {
        "schema_version": SCHEMA_VERSION,
        "created_at": datetime.now().isoformat(),
        "shapes": {
            "num_samples": dataset.num_samples,
            "num_patches": dataset.num_patches,
            "input_width": dataset.input_width,
            "num_classes": dataset.num_classes,
            "num_attributes": dataset.num_attributes,
            "semantic_width": dataset.prototypes.semantic_width,
            "num_groups": dataset.num_groups,
        },
        "class_names": list(dataset.class_names),
        "seen_mask": [bool(v) for v in dataset.seen_mask],
        "labels": [int(v) for v in dataset.labels],
        "splits": {name: [int(i) for i in dataset.split(name)] for name in SPLITS},
        "groups": [[int(i) for i in group] for group in dataset.prototypes.groups],
        "variants": [[int(v) for v in row] for row in dataset.variants],
        "config": dataset.config,
        "files": files,
    }
    manifest_path = path / MANIFEST
    with open(manifest_path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)

    size = sum((path / name).stat().st_size for name in files) + manifest_path.stat().st_size
    logger.info(f"Saved dataset to {path} ({format_size(size)})")
    return manifest_path


def read_manifest(path) -> Dict[str, Any]:
    """Parse and version-check a dataset manifest."""
    manifest_path = Path(path) / MANIFEST
    if not manifest_path.exists():
        raise ManifestError(f"manifest not found: {manifest_path}")
    try:
        with open(manifest_path, "r", encoding="utf-8") as f:
            manifest = json.load(f)
    except json.JSONDecodeError as e:
        raise ManifestError(f"malformed manifest {manifest_path}: {e}") from e
    if not isinstance(manifest, dict):
        raise ManifestError(f"malformed manifest {manifest_path}: expected a JSON object")

    version = manifest.get("schema_version")
    if version not in SUPPORTED_VERSIONS:
        raise UnsupportedVersionError(version, list(SUPPORTED_VERSIONS))
    missing = [key for key in _REQUIRED_KEYS if key not in manifest]
    if missing:
        raise ManifestError(f"malformed manifest {manifest_path}: missing {', '.join(missing)}")
    for name in (FEATURES_FILE, CATEGORY_FILE, SHARED_FILE):
        entry = manifest["files"].get(name)
        if not isinstance(entry, dict) or "shape" not in entry or "sha256" not in entry:
            raise ManifestError(f"malformed manifest {manifest_path}: no entry for {name}")
    return manifest


def _read_array(path: Path, manifest: Dict[str, Any], name: str) -> np.ndarray:
    file_path = path / name
    if not file_path.exists():
        raise DatasetError(f"data file missing: {file_path}")
    entry = manifest["files"][name]
    return read_flat(file_path, entry["shape"], entry["sha256"], FLOAT32_LE).astype(np.float32)


def _check_consistency(
    manifest_path: Path,
    num_samples: int,
    category_shape,
    labels: np.ndarray,
    seen_mask: np.ndarray,
    variants: np.ndarray,
    splits: Dict[str, np.ndarray],
) -> None:
    """Cross-check the manifest tables against the data files they describe."""
    num_classes, num_attributes = category_shape
    if labels.shape != (num_samples,):
        raise ShapeInconsistencyError(manifest_path, num_samples, labels.size)
    if seen_mask.shape != (num_classes,):
        raise ShapeInconsistencyError(manifest_path, num_classes, seen_mask.size)
    if variants.size != num_classes * num_attributes:
        raise ShapeInconsistencyError(manifest_path, num_classes * num_attributes, variants.size)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ManifestError(f"{manifest_path}: labels outside [0, {num_classes})")

    for name, indices in splits.items():
        if indices.ndim != 1:
            raise ManifestError(f"{manifest_path}: split {name} is not a flat index list")
        if indices.size and (indices.min() < 0 or indices.max() >= num_samples):
            raise ManifestError(f"{manifest_path}: split {name} has indices outside [0, {num_samples})")
        if np.unique(indices).size != indices.size:
            raise ManifestError(f"{manifest_path}: split {name} repeats samples")
        expect_seen = name != "unseen_test"
        wrong = indices[seen_mask[labels[indices]] != expect_seen]
        if wrong.size:
            kind = "unseen" if expect_seen else "seen"
            raise ManifestError(f"{manifest_path}: split {name} holds {kind}-class samples, e.g. {int(wrong[0])}")


def load(path) -> GzslDataset:
    """
    Read a dataset directory written by ``save``.

    Raises:
        ManifestError: Missing or malformed manifest, or splits that do not fit the labels
        UnsupportedVersionError: Unknown schema version
        ShapeInconsistencyError: A flat file or manifest table has the wrong number of values
        ChecksumError: A flat file does not match its recorded SHA-256
    """
    path = Path(path)
    manifest = read_manifest(path)

    features = _read_array(path, manifest, FEATURES_FILE)
    category = _read_array(path, manifest, CATEGORY_FILE)
    shared = _read_array(path, manifest, SHARED_FILE)

    try:
        labels = np.asarray(manifest["labels"], dtype=np.int64)
        seen_mask = np.asarray(manifest["seen_mask"], dtype=bool)
        variants = np.asarray(manifest["variants"], dtype=np.int64)
        splits = {name: np.asarray(manifest["splits"].get(name, []), dtype=np.int64) for name in SPLITS}
    except (AttributeError, TypeError, ValueError) as e:
        raise ManifestError(f"malformed manifest {path / MANIFEST}: {e}") from e
    _check_consistency(path / MANIFEST, features.shape[0], category.shape, labels, seen_mask, variants, splits)
    if len(manifest["class_names"]) != category.shape[0]:
        raise ShapeInconsistencyError(path / MANIFEST, category.shape[0], len(manifest["class_names"]))

    dataset = GzslDataset(
        features=features,
        labels=labels,
        splits=splits,
        prototypes=AttributePrototypeSet(
            shared=shared,
            category=category,
            groups=[list(group) for group in manifest["groups"]],
        ),
        seen_mask=seen_mask,
        variants=variants.reshape(category.shape),
        class_names=list(manifest["class_names"]),
        config=manifest.get("config", {}),
    )
    problems = dataset.prototypes.validate()
    if problems:
        raise ManifestError(f"{path / MANIFEST}: " + "; ".join(problems))
    logger.info(f"Loaded dataset from {path}: {dataset.num_samples} samples, {dataset.num_classes} classes")
    return dataset
