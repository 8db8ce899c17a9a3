"""Exception hierarchy shared by every mannflow module."""


class MannError(Exception):
    """Base class for all mannflow errors."""


class InvalidInputError(MannError, ValueError):
    pass


class ContractError(MannError):
    """An operation was called with an argument combination it does not accept."""


class CapacityError(MannError):
    """A story does not fit into the configured number of memory slots."""


class EmptyMemoryError(MannError):
    pass


class ProtocolError(MannError):
    """A token stream violated the pipeline protocol."""


class ModelFormatError(MannError):
    pass


class DatasetFormatError(MannError):
    pass


class CalibrationError(MannError):
    pass


class DivergenceError(MannError, ArithmeticError):
    pass


class BabiParseError(MannError, ValueError):
    def __init__(self, message, line_number=None):
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


class EncodingError(MannError, KeyError):
    def __init__(self, token):
        self.token = token
        super().__init__(f"unknown token {token!r}")

    def __str__(self):
        return self.args[0]
