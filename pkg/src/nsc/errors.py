"""Exception hierarchy shared by every module.

The CLI maps these to exit codes: configuration problems exit 2, data problems
exit 3, anything else exits 4.
"""


class NSCError(Exception):
    exit_code = 4


class ConfigurationError(NSCError):
    exit_code = 2


class DataError(NSCError):
    exit_code = 3


class DimensionError(NSCError, ValueError):
    pass


class VocabularyError(DataError):
    pass


class InputError(DataError):
    pass


class ContractError(NSCError):
    pass


class TrainingError(NSCError):
    pass


class LoadError(DataError):
    pass
