"""Exception types shared across the package."""


class DomainError(ValueError):
    """An argument lies outside the domain an operation is defined on."""


class SpecError(ValueError):
    """A layer-graph description is malformed (width mismatch, cycle, unknown source)."""


class StateError(RuntimeError):
    """An operation was called out of order, e.g. backward before forward."""


class ConfigError(ValueError):
    """A run configuration is invalid or contains unknown keys."""


class DatasetError(ValueError):
    """Dataset files are missing or inconsistent."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""
