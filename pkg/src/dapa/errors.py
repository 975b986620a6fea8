"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes: configuration problems exit 2,
data/file problems exit 3, violated internal invariants exit 4.
"""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration (bad field, schema mismatch)."""


class ConfigMismatchError(ConfigError):
    """Artifact was produced under a different configuration than expected."""


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class DegenerateInputError(ValueError):
    """Input is empty or otherwise carries no usable content."""


class SequenceLengthError(ValueError):
    """A token sequence exceeds its declared length cap."""


class CheckpointFormatError(ValueError):
    """A serialized artifact is corrupt or not in the expected format."""


class InvariantError(RuntimeError):
    """An internal invariant failed; indicates a bug, not bad user input."""
