"""Exception hierarchy shared by every module.

Each error carries the process exit code the CLI maps it to.
"""


class ModguideError(Exception):
    exit_code = 1


class ConfigError(ModguideError):
    exit_code = 2


class DimensionError(ConfigError, ValueError):
    pass


class VocabularyError(ConfigError, KeyError):
    def __str__(self):  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class LengthError(ConfigError, ValueError):
    pass


class RangeError(ConfigError, ValueError):
    pass


class CheckpointError(ModguideError):
    exit_code = 3


class NumericError(ModguideError, ArithmeticError):
    exit_code = 4


class DivergenceError(NumericError):
    pass


class FrozennessError(ModguideError):
    exit_code = 4


class MissingGradientError(ModguideError):
    exit_code = 4
