"""Exception types shared across the package."""


class GradrevError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(GradrevError, ValueError):
    pass


class LabelError(GradrevError, ValueError):
    pass


class ContractError(GradrevError, ValueError):
    """A precondition of an operation was violated by the caller."""


class ConfigError(GradrevError, ValueError):
    pass


class DataError(GradrevError, ValueError):
    pass


class InputError(GradrevError, ValueError):
    pass


class FormatError(GradrevError, ValueError):
    """A binary file could not be parsed."""


class VersionError(FormatError):
    pass


class ShapeMismatchError(GradrevError, ValueError):
    """Stored tensors do not match the expected model configuration."""

    def __init__(self, diffs):
        self.diffs = list(diffs)
        lines = [f"  {name}: stored {a} vs expected {b}" for name, a, b in self.diffs]
        super().__init__("parameter shape mismatch:\n" + "\n".join(lines))
