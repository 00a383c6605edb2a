"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class ConfigError(ValueError):
    """A configuration value (or several) violates its constraints."""

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class DataError(ValueError):
    """A data file or dataset violates the expected format."""


class CheckpointError(ValueError):
    """A checkpoint file is corrupt or malformed."""

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class CheckpointVersionError(CheckpointError):
    """The checkpoint was written by an incompatible format version."""


class ConfigMismatchError(CheckpointError):
    """The checkpoint's stored config does not match the expected one."""


class NumericalError(RuntimeError):
    """A non-finite value appeared where finite math was required."""


class InvalidCheckError(RuntimeError):
    """A verification run was invalid (e.g. the checked function is not deterministic)."""
