"""Exception hierarchy shared across the package.

Exit-code mapping for the CLI: validation/config problems exit 1,
runtime/numeric problems exit 2.
"""


class BridgestError(Exception):
    exit_code = 1


class ConfigError(BridgestError):
    """Invalid configuration value or unknown config key."""


class DimensionError(BridgestError):
    """Operand shapes do not agree."""


class ValidationError(BridgestError):
    """A record or input file violates an invariant."""


class ManifestError(BridgestError):
    """Malformed manifest line; message carries the line number."""


class FormatError(BridgestError):
    """Marker collision while formatting a structured target."""


class CheckpointError(BridgestError):
    """Checkpoint file is corrupt, truncated, or version-incompatible."""


class CapacityError(BridgestError):
    """Sequence exceeds the decoder's maximum length."""

    exit_code = 2


class StateError(BridgestError):
    """Operation attempted on inconsistent mutable state."""

    exit_code = 2


class NumericError(BridgestError):
    """Non-finite value where a finite one is required."""

    exit_code = 2
