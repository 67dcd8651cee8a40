"""
Checkpoints
===========
A checkpoint directory holds manifest.json (config echo, parameter table with
shapes and SHA-256, optimizer step, per-epoch metric rows) and one little-endian
float64 flat file per parameter under ``params/``; Adam moments, when saved,
live under ``optimizer/``.
"""

import json
import logging
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from .config import RunConfig, model_signature
from .errors import CheckpointError, ConfigError, ConfigMismatchError, DatasetError, ShapeError
from .model import GzslModel
from .utils import FLOAT64_LE, read_flat, write_flat

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
MANIFEST = "manifest.json"


@dataclass
class Checkpoint:
    model: GzslModel
    config: RunConfig
    step: int = 0
    optimizer_state: Dict[str, np.ndarray] = field(default_factory=dict)
    history: List[Dict[str, float]] = field(default_factory=list)
    manifest: Dict[str, Any] = field(default_factory=dict)


def _file_name(name: str) -> str:
    return f"{name}.f64"


def _write_group(root: Path, folder: str, arrays: Dict[str, np.ndarray]) -> Dict[str, Dict[str, Any]]:
    (root / folder).mkdir(parents=True, exist_ok=True)
    table = {}
    for name, array in arrays.items():
        relative = f"{folder}/{_file_name(name)}"
        table[name] = {
            "file": relative,
            "shape": list(array.shape),
            "sha256": write_flat(root / relative, array, FLOAT64_LE),
        }
    return table


def _read_group(root: Path, manifest: Dict[str, Any], key: str) -> Dict[str, np.ndarray]:
    table = manifest.get(key)
    if not isinstance(table, dict):
        raise CheckpointError(f"checkpoint {root} manifest has no {key} table")
    arrays = {}
    for name, entry in table.items():
        if not isinstance(entry, dict) or not {"file", "shape", "sha256"} <= set(entry):
            raise CheckpointError(f"checkpoint {root} manifest: malformed {key} entry {name!r}")
        file_path = root / entry["file"]
        if not file_path.exists():
            raise CheckpointError(f"checkpoint file missing: {file_path}")
        arrays[name] = read_flat(file_path, entry["shape"], entry["sha256"], FLOAT64_LE).astype(np.float64)
    return arrays


def save_checkpoint(
    model: GzslModel,
    path,
    optimizer=None,
    history: Optional[Sequence[Dict[str, float]]] = None,
) -> Path:
    """
    Write a checkpoint directory.

    Args:
        model: Model whose parameters are saved
        path: Target directory
        optimizer: Optional AdamOptimizer whose moments and step are saved for resuming
        history: Per-epoch metric rows so far, restored on resume

    Returns:
        The checkpoint directory
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "created_at": datetime.now().isoformat(),
        "config": model.config.to_dict(),
        "semantic_width": model.semantic_width,
        "parameters": _write_group(path, "params", model.state_dict()),
        "step": 0,
    }
    if optimizer is not None:
        manifest["step"] = optimizer.step_count
        manifest["optimizer"] = _write_group(path, "optimizer", optimizer.state_dict())
    if history:
        manifest["history"] = [dict(row) for row in history]
    with open(path / MANIFEST, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    logger.info(f"Saved checkpoint to {path} (step {manifest['step']}, {model.num_parameters()} values)")
    return path


def check_signature(stored: RunConfig, expected: RunConfig) -> None:
    """Reject a checkpoint whose architecture fields differ from ``expected``."""
    stored_sig, expected_sig = model_signature(stored), model_signature(expected)
    for key in sorted(expected_sig):
        if stored_sig.get(key) != expected_sig[key]:
            raise ConfigMismatchError(key, stored_sig.get(key), expected_sig[key])


def _check_optimizer_state(path: Path, model: GzslModel, state: Dict[str, np.ndarray]) -> None:
    """Adam moments must exist for every parameter with the parameter's shape."""
    for name, param in model.named_parameters():
        for moment in ("m", "v"):
            key = f"{moment}.{name}"
            if key not in state:
                raise CheckpointError(f"checkpoint {path} optimizer state lacks {key}")
            if state[key].shape != param.shape:
                raise CheckpointError(
                    f"checkpoint {path} optimizer state {key} has shape {state[key].shape}, expected {param.shape}"
                )


def load_checkpoint(path, expected: Optional[RunConfig] = None) -> Checkpoint:
    """
    Rebuild a model from a checkpoint directory.

    Args:
        path: Checkpoint directory
        expected: When given, architecture fields must match the stored echo

    Raises:
        CheckpointError: Missing or unreadable checkpoint
        ConfigMismatchError: Stored architecture differs from ``expected``
        ChecksumError: A parameter file was modified
    """
    path = Path(path)
    manifest_path = path / MANIFEST
    if not manifest_path.exists():
        raise CheckpointError(f"checkpoint manifest not found: {manifest_path}")
    try:
        with open(manifest_path, "r", encoding="utf-8") as f:
            manifest = json.load(f)
    except json.JSONDecodeError as e:
        raise CheckpointError(f"malformed checkpoint manifest {manifest_path}: {e}") from e
    if not isinstance(manifest, dict):
        raise CheckpointError(f"malformed checkpoint manifest {manifest_path}: expected a JSON object")
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint schema {manifest.get('schema_version')!r} in {manifest_path}"
        )

    try:
        config = RunConfig.from_dict(manifest["config"])
    except (AttributeError, KeyError, TypeError, ConfigError) as e:
        raise CheckpointError(f"checkpoint {path} has an invalid config echo: {e}") from e
    if expected is not None:
        check_signature(config, expected)

    try:
        params = _read_group(path, manifest, "parameters")
        optimizer_state = _read_group(path, manifest, "optimizer") if "optimizer" in manifest else {}
    except DatasetError as e:
        raise CheckpointError(str(e)) from e
    model = GzslModel(config, semantic_width=manifest.get("semantic_width"))
    try:
        model.load_state_dict(params)
    except (KeyError, ShapeError) as e:
        raise CheckpointError(f"checkpoint {path} does not fit the model: {e}") from e
    if optimizer_state:
        _check_optimizer_state(path, model, optimizer_state)

    history = manifest.get("history", [])
    if not isinstance(history, list) or not all(isinstance(row, dict) for row in history):
        raise CheckpointError(f"checkpoint {path} manifest: history must be a list of rows")
    logger.info(f"Loaded checkpoint from {path} (step {manifest.get('step', 0)})")
    return Checkpoint(
        model=model,
        config=config,
        step=int(manifest.get("step", 0)),
        optimizer_state=optimizer_state,
        history=history,
        manifest=manifest,
    )
