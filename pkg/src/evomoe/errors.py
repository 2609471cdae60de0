"""Exception types shared across the package.

Everything user-facing derives from EvomoeError so the CLI can map failures
to exit codes in one place: usage and validation problems exit 2, numerical
failures exit 3.
"""

from __future__ import annotations


class EvomoeError(Exception):
    """Base class for package errors."""


class ShapeError(EvomoeError):
    """Operands have incompatible shapes; the message names both."""


class ConfigError(EvomoeError):
    """Bad config file, unknown keys, or config/checkpoint mismatch."""


class ContractError(EvomoeError):
    """A documented precondition was violated by the caller."""


class CheckpointFormatError(EvomoeError):
    """Checkpoint bytes are not a valid container (magic, truncation)."""


class CheckpointVersionError(EvomoeError):
    """Checkpoint container version is newer than this code understands."""


class NumericError(EvomoeError):
    """A numerical invariant failed at runtime (non-finite loss, NaN grads)."""
