"""Exception types raised across the package."""


class GPEDError(Exception):
    """Base class for all package errors."""


class DimensionError(GPEDError, ValueError):
    """Tensor shapes are incompatible; ``layer`` names the offending layer index."""

    def __init__(self, message, layer=None):
        if layer is not None:
            message = f"layer {layer}: {message}"
        super().__init__(message)
        self.layer = layer


class ContractError(GPEDError, ValueError):
    """A documented precondition was violated."""


class NumericError(GPEDError, FloatingPointError):
    """A non-finite value appeared; ``iteration`` is set when raised inside a loop."""

    def __init__(self, message, iteration=None):
        if iteration is not None:
            message = f"iteration {iteration}: {message}"
        super().__init__(message)
        self.iteration = iteration


class FormatError(GPEDError, ValueError):
    """A data file does not follow its declared format."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class RangeError(GPEDError, ValueError):
    """A size or index argument is outside its admissible range."""


class PruneError(GPEDError):
    """Pruning would leave a layer with no units; ``report`` holds the partial report."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class ConfigError(GPEDError):
    """Experiment configuration failed validation; ``errors`` lists (path, rule) pairs."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(f"{p}: {r}" for p, r in self.errors))
