"""Exception hierarchy shared across modules."""


class GraphExplainError(Exception):
    """Base class for all library errors."""


class DimensionError(GraphExplainError):
    """Shapes of operands do not conform."""


class DataError(GraphExplainError):
    """Malformed input data: bad graph, bad file, bad SMILES, bad checkpoint."""


class NumericError(GraphExplainError):
    """A computation produced non-finite values."""


class ConfigError(GraphExplainError):
    """Invalid configuration value."""
