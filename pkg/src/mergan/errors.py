"""Exception types shared across the package."""


class MerganError(Exception):
    """Base class for all package errors."""


class ShapeError(MerganError):
    """An op was given operands with incompatible shapes."""

    def __init__(self, op: str, *shapes, detail: str = ""):
        self.op = op
        self.shapes = shapes
        msg = f"{op}: incompatible shapes {' and '.join(str(tuple(s)) for s in shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class GraphError(MerganError):
    """A tensor was used with a graph it does not belong to, or the graph is malformed."""


class NumericsError(MerganError):
    """A non-finite value (NaN/Inf) was produced where finite values are required."""


class CategoryError(MerganError):
    """A category id fell outside {1..M} or a category set was empty."""


class DataFormatError(MerganError):
    """A data file failed to parse; message names the file and byte offset."""


class AccuracyFloorError(MerganError):
    """The proxy classifier failed to reach the required test accuracy."""


class MetricsError(MerganError):
    """A metrics computation received invalid input (asymmetry, indefiniteness)."""


class ConfigError(MerganError):
    """A run configuration file or value is invalid."""


class CheckpointError(MerganError):
    """A checkpoint file is malformed, truncated, corrupt, or wrong version."""
