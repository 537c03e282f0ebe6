"""Exception hierarchy shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """An input lies outside an operation's mathematical domain."""


class UsageError(RuntimeError):
    """An API was called in a state or with arguments it does not support."""


class ConfigError(ValueError):
    """A configuration value is invalid."""


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name, n_bad):
        super().__init__(f"non-finite gradient in parameter {name!r} ({n_bad} bad entries)")
        self.name = name
        self.n_bad = n_bad


class DatasetError(IOError):
    """Base for dataset file load failures."""


class MagicMismatchError(DatasetError):
    pass


class TruncatedBlobError(DatasetError):
    pass


class CountMismatchError(DatasetError):
    pass
