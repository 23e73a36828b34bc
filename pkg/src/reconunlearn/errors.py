"""Exception hierarchy. The CLI maps each class onto a stable exit code."""


class ReconUnlearnError(Exception):
    exit_code = 1


class ConfigError(ReconUnlearnError, ValueError):
    exit_code = 1


class DataError(ReconUnlearnError):
    exit_code = 2


class ChecksumError(DataError):
    pass


class NumericalError(ReconUnlearnError, FloatingPointError):
    exit_code = 3

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch
