"""Exception hierarchy shared across the package.

Grouped so the CLI can map failure classes to distinct exit codes:
config errors (2), I/O and format errors (3), numeric/contract errors (4).
"""


class TissueGnnError(Exception):
    """Base class for all package errors."""


class ConfigError(TissueGnnError):
    """Invalid configuration value or unknown config key."""


class ShapeError(TissueGnnError):
    """Tensor/array shape mismatch; message carries both shapes."""


class ContractError(TissueGnnError):
    """An operation was called outside its contract (e.g. non-scalar loss)."""


class NonFiniteError(TissueGnnError):
    """A NaN/Inf value appeared while finite-checking was enabled."""


class EmptyInputError(TissueGnnError):
    """Operation received an empty input where at least one element is required."""


class InsufficientPointsError(TissueGnnError):
    """Fewer points than neighbors requested for graph construction."""


class IndexSelectionError(TissueGnnError):
    """Duplicate or out-of-range index in a point selection."""


class OutOfBoundsError(TissueGnnError):
    """Query point outside the volume footprint."""


class DegenerateProbeError(TissueGnnError):
    """Probe segment has zero length."""


class GenerationError(TissueGnnError):
    """Data generation failed (depth out of range, probe exits footprint, ...)."""


class MonotonicityError(TissueGnnError):
    """A force trajectory that must be non-decreasing was not."""


class FormatError(TissueGnnError):
    """File cannot be parsed: bad magic, truncation, or schema violation."""


class VersionError(FormatError):
    """File format version not supported."""


class SchemaError(FormatError):
    """File parsed but violates the declared schema (counts, widths, fields)."""


class ArchitectureMismatchError(FormatError):
    """Checkpoint architecture descriptor incompatible with the runtime."""


class SplitError(TissueGnnError):
    """Dataset split cannot be built (e.g. too few locations)."""


class DivergenceError(TissueGnnError):
    """Training loss became non-finite."""
