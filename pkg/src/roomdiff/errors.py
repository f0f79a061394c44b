"""Exception types shared across the package."""


class RoomdiffError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(RoomdiffError):
    """An array argument has the wrong shape, dtype, or an empty extent."""


class DomainError(RoomdiffError):
    """A value is outside the mathematical domain of an operation."""


class ConfigError(RoomdiffError):
    """A configuration value violates a documented precondition."""


class FormatError(RoomdiffError):
    """A file or byte stream does not match the expected format."""


class GenerationError(RoomdiffError):
    """Procedural generation failed, e.g. rejection sampling hit its cap."""


class TrainingAbort(RoomdiffError):
    """Training stopped because gradients or parameters went non-finite."""
