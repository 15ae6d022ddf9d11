"""Exception hierarchy shared across the package."""


class CaseNetError(Exception):
    """Base class for all package errors."""


class DimensionError(CaseNetError, ValueError):
    """Operand shapes are incompatible with an operation."""


class ContractError(CaseNetError, ValueError):
    """A caller violated an operation precondition."""


class ConfigError(CaseNetError, ValueError):
    """Invalid model, trainer, or run configuration."""


class NumericalError(CaseNetError, ArithmeticError):
    """NaN or infinity appeared where finite values are required."""


class DatasetError(CaseNetError, ValueError):
    """Problem reading, writing, or validating a dataset."""


class MissingFileError(DatasetError, FileNotFoundError):
    pass


class ShapeMismatchError(DatasetError):
    pass


class LabelRangeError(DatasetError):
    pass


class NonFiniteValueError(DatasetError):
    pass
