"""Exception types raised across the package."""


class LayerTraceError(Exception):
    """Base class for all package errors."""


class DimensionError(LayerTraceError, ValueError):
    """Operand shapes do not agree."""


class ContractError(LayerTraceError, ValueError):
    """A precondition of an operation was violated."""


class ConfigError(LayerTraceError, ValueError):
    """Invalid or inconsistent configuration."""


class EncodeError(LayerTraceError, ValueError):
    """Boundary coordinates cannot be rasterized (ordering violated)."""

    def __init__(self, message, column=None):
        super().__init__(message)
        self.column = column


class InputTooWideError(LayerTraceError, ValueError):
    """Raw B-scan is wider than the standardized width."""


class SpecInfeasibleError(LayerTraceError, RuntimeError):
    """Phantom rejection sampling exhausted its budget."""


class SplitError(LayerTraceError, ValueError):
    """Not enough volumes to build the requested split."""


class DivergenceError(LayerTraceError, RuntimeError):
    """Training loss blew up."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history or []
