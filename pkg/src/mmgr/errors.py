"""Exception hierarchy with stable machine-readable codes.

Every error carries a short ``code`` string (stable across releases, meant
for scripts parsing the CLI's stderr JSON) and an ``exit_code`` used by the
CLI: 2 for usage/input problems, 3 for runtime/numeric failures.
"""


class MmgrError(Exception):
    """Base class for all errors raised by this package."""

    code = "error"
    exit_code = 3


class ShapeError(MmgrError):
    """Operands have incompatible shapes (programming/runtime error)."""

    code = "shape"
    exit_code = 3


class DimensionError(MmgrError):
    """A stored feature vector has the wrong dimensionality for its role."""

    code = "dimension"
    exit_code = 2


class FeatureLookupError(MmgrError):
    """A feature id could not be resolved against the loaded stores."""

    code = "not_found"
    exit_code = 2


class FormatError(MmgrError):
    """A binary container has a bad magic, version, or structure."""

    code = "format"
    exit_code = 2


class ConsistencyError(MmgrError):
    """Related pieces of on-disk data disagree (e.g. id count vs payload)."""

    code = "consistency"
    exit_code = 2


class ManifestError(MmgrError):
    """A manifest line is malformed; message names the line number."""

    code = "manifest"
    exit_code = 2


class ConfigError(MmgrError):
    """Invalid configuration or mismatched components (e.g. topologies)."""

    code = "config"
    exit_code = 2


class EmptyBatchError(MmgrError):
    """An operation that needs at least one labeled node received none."""

    code = "empty_batch"
    exit_code = 2


class NumericError(MmgrError):
    """A computation produced non-finite values; message names where."""

    code = "numeric"
    exit_code = 3
