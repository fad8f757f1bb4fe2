"""Exception types shared across the toolkit."""


class EditProbeError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(EditProbeError):
    """Operand shapes are incompatible."""


class ContractError(EditProbeError):
    """An operation was called outside its contract (bad state, not bad data)."""


class ConfigError(EditProbeError):
    """Invalid configuration values."""


class DataError(EditProbeError):
    """Malformed or inconsistent input data (files, ratings, manifests)."""
