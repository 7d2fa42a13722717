"""Exception hierarchy shared across the package.

Every error raised on a user-facing path derives from :class:`VoxpartsError`
so the CLI can map failures to stable exit codes.
"""


class VoxpartsError(Exception):
    """Base class for all package errors."""

    code = "E_RUNTIME"


class DimensionError(VoxpartsError):
    """Array shapes do not match an operation's contract."""

    code = "E_DIM"


class NumericError(VoxpartsError):
    """Non-finite values reached an operation that requires finite inputs."""

    code = "E_NUMERIC"


class UsageError(VoxpartsError):
    """An API was called out of order (e.g. backward before forward)."""

    code = "E_USAGE"


class ConfigError(VoxpartsError):
    """Invalid configuration value."""

    code = "E_CONFIG"


class DataError(VoxpartsError):
    """Scene data missing or inconsistent."""

    code = "E_DATA"


class FormatError(VoxpartsError):
    """A binary file does not follow its declared format."""

    code = "E_FORMAT"


class StageOrderError(VoxpartsError):
    """Training stages were requested out of order."""

    code = "E_STAGE"


class InitializationError(VoxpartsError):
    """Voxel-grid initialization could not produce a usable result."""

    code = "E_INIT"


class CapacityError(VoxpartsError):
    """No free slot is available for the requested edit."""

    code = "E_CAPACITY"


class ScriptError(VoxpartsError):
    """An edit script is malformed or incomplete."""

    code = "E_SCRIPT"
