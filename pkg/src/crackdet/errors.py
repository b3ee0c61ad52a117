"""Exception types shared across the package."""


class CrackdetError(Exception):
    """Base class for all package errors."""


class ShapeError(CrackdetError):
    """An operation received arrays whose shapes do not satisfy its contract."""


class ConfigError(CrackdetError):
    """A run configuration is malformed (unknown key, bad value, bad combination)."""


class DataError(CrackdetError):
    """An annotation file or dataset directory violates its schema."""


class NumericsError(CrackdetError):
    """A numerical check failed or an op produced a non-finite value."""
