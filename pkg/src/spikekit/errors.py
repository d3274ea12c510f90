"""Exception types shared across spikekit modules."""


class SpikekitError(Exception):
    """Base class for all spikekit errors."""


class DimensionError(SpikekitError, ValueError):
    """Tensor or layer extents do not compose."""


class ParameterError(SpikekitError, ValueError):
    """A parameter value is outside its documented range."""


class ContractError(SpikekitError, RuntimeError):
    """An API precondition was violated (non-scalar loss, non-binary spikes, ...)."""


class FormatError(SpikekitError, ValueError):
    """A binary file does not match its documented layout."""


class DataError(SpikekitError, ValueError):
    """Dataset contents are inconsistent (label range, count mismatch, ...)."""


class ConfigError(SpikekitError, ValueError):
    """A run configuration is invalid."""


class DivergenceError(SpikekitError, RuntimeError):
    """Training produced a non-finite loss or gradient."""


class GradCheckError(SpikekitError, RuntimeError):
    """Gradient checking encountered non-finite values."""
