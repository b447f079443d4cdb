"""Exception hierarchy shared by the library and the command line.

Each class carries the process exit code and a short machine-parsable
prefix used by the CLI when it reports the failure.
"""


class PhaseFuseError(Exception):
    exit_code = 1
    code = "E_GENERIC"


class ShapeError(PhaseFuseError, ValueError):
    exit_code = 4
    code = "E_SHAPE"


class ContractError(PhaseFuseError, ValueError):
    exit_code = 2
    code = "E_CONTRACT"


class ConfigError(PhaseFuseError, ValueError):
    exit_code = 2
    code = "E_CONFIG"


class DataError(PhaseFuseError):
    exit_code = 3
    code = "E_DATA"


class FormatError(DataError):
    code = "E_FORMAT"


class NumericError(PhaseFuseError, ArithmeticError):
    exit_code = 4
    code = "E_NUMERIC"
