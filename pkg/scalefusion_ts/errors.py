"""
Holds the exceptions raised by the package and the exit codes the CLI maps them to
"""


class ScaleFusionError(Exception):
    """
    Base class for every error raised on purpose by scalefusion_ts
    """


class ConfigError(ScaleFusionError, ValueError):
    """
    A configuration value breaks an invariant, the message names the field
    """


class ShapeError(ScaleFusionError, ValueError):
    """
    Operand shapes do not line up
    """


class LengthError(ScaleFusionError, ValueError):
    """
    A series length is outside the accepted range
    """


class UnsupportedLengthError(LengthError):
    """
    A series activates no CTL layer, so no task head can consume it
    """


class DataError(ScaleFusionError, ValueError):
    """
    A dataset file is missing, malformed or too small
    """


class NumericError(ScaleFusionError, ArithmeticError):
    """
    A forward value or loss became NaN or Inf
    """


class SegmentIndexError(ScaleFusionError, IndexError):
    """
    A layer or patch index is out of range for a schedule
    """


EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def exit_code_for(err: BaseException) -> int:
    """
    Function to map an exception to the CLI exit code

    :type err: BaseException
    :param err: The raised exception

    :rtype: Integer
    :returns: The exit code, 1 for anything unexpected

    """
    if isinstance(err, ConfigError):
        return EXIT_CONFIG

    if isinstance(err, (DataError, LengthError)):
        return EXIT_DATA

    if isinstance(err, NumericError):
        return EXIT_NUMERIC

    return 1
