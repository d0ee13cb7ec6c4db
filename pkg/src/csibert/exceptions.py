class ConfigError(ValueError):
    """Invalid configuration (zero dimensions, empty path list, ...)."""


class DomainError(ValueError):
    """Argument outside the mathematical domain of a formula."""


class DegenerateInputError(ValueError):
    """Input carries no usable signal (zero power, zero variance)."""


class FormatError(ValueError):
    """A dataset, checkpoint or report file failed validation."""


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite during training."""
