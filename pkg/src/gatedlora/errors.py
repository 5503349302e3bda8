"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: configuration problems exit 2, data and
file-format problems exit 3, numeric aborts exit 4.
"""


class GatedLoraError(Exception):
    pass


class ConfigError(GatedLoraError, ValueError):
    pass


class DimensionError(GatedLoraError, ValueError):
    pass


class ContractError(GatedLoraError, RuntimeError):
    pass


class DataError(GatedLoraError):
    pass


class FormatError(DataError, ValueError):
    pass


class LengthError(FormatError):
    pass


class NumericAbort(GatedLoraError, FloatingPointError):
    pass
