"""Exception hierarchy; the CLI maps each class to its own exit code."""


class HierPlaceError(Exception):
    exit_code = 1


class ConfigError(HierPlaceError, ValueError):
    exit_code = 2


class DataError(HierPlaceError, ValueError):
    exit_code = 3


class DivergenceError(HierPlaceError, ArithmeticError):
    exit_code = 4
