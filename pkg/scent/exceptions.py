"""
Error hierarchy shared by the library code and the management commands.

Every error carries the process exit code the commands report for it.
"""


class ScentError(Exception):
    exit_code = 1


class ConfigError(ScentError):
    exit_code = 2


class DataError(ScentError):
    exit_code = 3


class NoVoicedFramesError(DataError):
    """No frame is voiced in both the converted and the reference track."""


class NumericError(ScentError):
    exit_code = 4


class ShapeError(NumericError):
    pass


class NonFiniteError(NumericError):
    pass


class UnknownOpError(NumericError):
    pass


class AlignmentError(ScentError):
    exit_code = 5


class DegenerateAlignmentError(AlignmentError):
    """Forward-attention mass vanished before renormalization."""


class StepCapExceeded(AlignmentError):
    """
    Autoregressive conversion reached its step cap without predicting the end.

    The partial conversion is kept on ``result`` so callers can still save it.
    """

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result
