"""
Utility Functions
=================
Helpers for hashing, flat binary files, output directories and formatting.
"""

import hashlib
import logging
import os
import shutil
import tempfile
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import ChecksumError, ConfigError, ShapeInconsistencyError

logger = logging.getLogger(__name__)

FLOAT32_LE = np.dtype("<f4")
FLOAT64_LE = np.dtype("<f8")


def sha256_file(path) -> str:
    """SHA-256 hex digest of a file's contents."""
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_flat(path, array: np.ndarray, dtype: np.dtype = FLOAT32_LE) -> str:
    """Write an array as a little-endian flat file and return its SHA-256."""
    data = np.ascontiguousarray(array, dtype=dtype)
    with open(path, "wb") as f:
        f.write(data.tobytes(order="C"))
    return sha256_file(path)


def read_flat(
    path,
    shape: Sequence[int],
    expected_sha256: Optional[str] = None,
    dtype: np.dtype = FLOAT32_LE,
) -> np.ndarray:
    """Read a flat file, checking value count before checksum."""
    path = Path(path)
    raw = path.read_bytes()
    expected_count = int(np.prod(shape)) if len(shape) else 1
    if len(raw) % dtype.itemsize != 0 or len(raw) // dtype.itemsize != expected_count:
        raise ShapeInconsistencyError(path, expected_count, len(raw) / dtype.itemsize)
    if expected_sha256 is not None:
        actual = hashlib.sha256(raw).hexdigest()
        if actual != expected_sha256:
            raise ChecksumError(path, expected_sha256, actual)
    return np.frombuffer(raw, dtype=dtype).reshape(tuple(shape)).copy()


@contextmanager
def atomic_output_dir(target) -> Iterator[Path]:
    """Yield a scratch directory that replaces ``target`` only if the block succeeds."""
    target = Path(target)
    target.parent.mkdir(parents=True, exist_ok=True)
    scratch = Path(tempfile.mkdtemp(prefix=f".{target.name}.", dir=str(target.parent)))
    try:
        yield scratch
    except BaseException:
        shutil.rmtree(scratch, ignore_errors=True)
        raise
    if target.exists():
        shutil.rmtree(target)
    os.replace(scratch, target)
    logger.debug(f"Committed output directory {target}")


def format_percentage(value: Optional[float], decimals: int = 2) -> str:
    """Format a fraction in [0, 1] as a percentage string."""
    if value is None:
        return "N/A"
    return f"{100.0 * value:.{decimals}f}%"


def format_size(num_bytes: float) -> str:
    """Format byte counts with K, M, G suffixes."""
    if abs(num_bytes) >= 1e9:
        return f"{num_bytes / 1e9:.2f}G"
    elif abs(num_bytes) >= 1e6:
        return f"{num_bytes / 1e6:.2f}M"
    elif abs(num_bytes) >= 1e3:
        return f"{num_bytes / 1e3:.2f}K"
    return f"{num_bytes:.0f}B"


def directory_size(path) -> int:
    return sum(p.stat().st_size for p in Path(path).rglob("*") if p.is_file())


def _parse_list(text: str, kind) -> list:
    try:
        return [kind(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"expected a comma-separated list of {kind.__name__}, got {text!r}") from None


def parse_int_list(text: str) -> list:
    return _parse_list(text, int)


def parse_float_list(text: str) -> list:
    return _parse_list(text, float)
