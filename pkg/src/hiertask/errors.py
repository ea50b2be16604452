"""Exception hierarchy shared by every hiertask module."""


class HiertaskError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(HiertaskError, ValueError):
    """Operand shapes are incompatible."""


class NumericError(HiertaskError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class DivergenceError(NumericError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, message: str | None = None):
        self.epoch = epoch
        super().__init__(message or f"loss became non-finite during epoch {epoch}")


class LabelError(HiertaskError, IndexError):
    """A class label falls outside the valid range."""


class ContractError(HiertaskError, ValueError):
    """A caller violated an operation's precondition."""


class ConfigurationError(HiertaskError, ValueError):
    """An invalid configuration value."""


class TaxonomyError(HiertaskError, ValueError):
    """The make/model hierarchy is inconsistent."""


class DataError(HiertaskError, ValueError):
    """A dataset is empty or malformed."""


class GenerationError(HiertaskError, RuntimeError):
    """Synthetic data generation could not satisfy its constraints."""


class SchemaError(HiertaskError, ValueError):
    """A tabular input lacks required columns."""

    def __init__(self, missing):
        self.missing = list(missing)
        super().__init__("missing columns: " + ", ".join(self.missing))
