"""
Errors
======
Exception hierarchy shared by every module of the package.
"""

from typing import Optional, Sequence


class GzslError(Exception):
    """Base class for all package errors."""


class ShapeError(GzslError, ValueError):
    """Operand shapes are incompatible."""

    def __init__(self, op: str, *shapes: Sequence[int]):
        self.op = op
        self.shapes = [tuple(s) for s in shapes]
        described = " and ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {described}")


class ContractError(GzslError):
    """A documented pre-condition was violated."""


class ConfigError(GzslError):
    """Configuration is invalid or infeasible."""


class ConfigMismatchError(ConfigError):
    """A stored config echo disagrees with the expected configuration."""

    def __init__(self, field: str, stored, expected):
        self.field = field
        self.stored = stored
        self.expected = expected
        super().__init__(
            f"config mismatch on '{field}': stored {stored!r}, expected {expected!r}"
        )


class DatasetError(GzslError):
    """Base class for on-disk dataset problems."""


class ManifestError(DatasetError):
    """manifest.json is missing, unparsable or incomplete."""


class UnsupportedVersionError(DatasetError):
    """The manifest schema version is not understood by this release."""

    def __init__(self, version, supported):
        self.version = version
        super().__init__(f"unsupported schema version {version!r} (supported: {supported})")


class ChecksumError(GzslError):
    """A flat file does not match the SHA-256 recorded in its manifest."""

    def __init__(self, path, expected: str, actual: str):
        self.path = str(path)
        super().__init__(f"checksum mismatch for {self.path}: expected {expected[:12]}…, got {actual[:12]}…")


class ShapeInconsistencyError(DatasetError):
    """A flat file holds a different number of values than its declared shape."""

    def __init__(self, path, expected: int, actual: int):
        self.path = str(path)
        super().__init__(
            f"shape inconsistency in {self.path}: expected {expected} values, found {actual}"
        )


class CheckpointError(GzslError):
    """A checkpoint directory cannot be read or written."""


class NumericalError(GzslError):
    """A loss or gradient became non-finite."""

    def __init__(self, message: str, batch_index: Optional[int] = None):
        self.batch_index = batch_index
        if batch_index is not None:
            message = f"{message} (batch {batch_index})"
        super().__init__(message)
