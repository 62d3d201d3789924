""" Exceptions raised by metaspk

Every error derives from ``MetaspkError`` and from the builtin exception a
caller would naturally expect, so ``except ValueError`` keeps working.

>>> issubclass(ParseError, FormatError) and issubclass(ParseError, ValueError)
True
>>> exit_code(ParseError('bad line'))
4
"""

__all__ = ('MetaspkError', 'FormatError', 'UnsupportedFormatError',
           'ParseError', 'EmptyInputError', 'DimensionError', 'NumericError',
           'GraphStateError', 'SpecError', 'IncompatibleWeightsError',
           'InputLengthError', 'SamplingError', 'EpisodeError', 'BatchError',
           'ParameterError', 'DegenerateInputError', 'DegenerateDataError',
           'EvaluationError', 'UndefinedDerError', 'ConfigError',
           'TrainingAborted', 'exit_code', 'EXIT_CODES')


class MetaspkError(Exception):
    """ Base class of all metaspk errors """


class FormatError(MetaspkError, ValueError):
    """ A file does not follow the expected container or record layout """


class UnsupportedFormatError(FormatError):
    """ A well-formed file uses a variant metaspk does not read """


class ParseError(FormatError):
    """ A text record could not be parsed """

    def __init__(self, message, lineno=None, path=None):
        self.lineno = lineno
        self.path = path
        where = ''
        if path is not None:
            where += '%s:' % path
        if lineno is not None:
            where += '%d:' % lineno
        super().__init__('%s %s' % (where, message) if where else message)


class EmptyInputError(MetaspkError, ValueError):
    pass


class DimensionError(MetaspkError, ValueError):
    pass


class NumericError(MetaspkError, ArithmeticError):
    """ A computation produced a non-finite value """

    def __init__(self, message, node=None):
        self.node = node
        super().__init__(message)


class GraphStateError(MetaspkError, RuntimeError):
    pass


class SpecError(MetaspkError, ValueError):
    pass


class IncompatibleWeightsError(SpecError):
    def __init__(self, message, layer=None):
        self.layer = layer
        super().__init__(message)


class InputLengthError(MetaspkError, ValueError):
    pass


class SamplingError(MetaspkError, ValueError):
    pass


class EpisodeError(MetaspkError, ValueError):
    pass


class BatchError(MetaspkError, ValueError):
    pass


class ParameterError(MetaspkError, ValueError):
    pass


class DegenerateInputError(MetaspkError, ValueError):
    def __init__(self, message, row=None):
        self.row = row
        super().__init__(message)


class DegenerateDataError(MetaspkError, ValueError):
    pass


class EvaluationError(MetaspkError, ValueError):
    pass


class UndefinedDerError(EvaluationError):
    pass


class ConfigError(MetaspkError, KeyError):
    def __init__(self, message, key=None):
        self.key = key
        self.message = message
        super().__init__(message)

    def __str__(self):
        return self.message


class TrainingAborted(NumericError):
    """ Training stopped at ``step``; ``weights`` holds the last good state """

    def __init__(self, message, step, weights=None, checkpoint=None):
        self.step = step
        self.weights = weights
        self.checkpoint = checkpoint
        super().__init__(message)


EXIT_CODES = {
    'ok': 0,
    'usage': 1,
    'io': 2,
    'numeric': 3,
    'format': 4,
}


def exit_code(exc):
    """ CLI exit status for an exception

    >>> exit_code(ConfigError('unknown key', key='model.heads'))
    1
    >>> exit_code(FileNotFoundError('missing.wav'))
    2
    >>> exit_code(NumericError('nan'))
    3
    """
    if isinstance(exc, FormatError):
        return EXIT_CODES['format']
    if isinstance(exc, ArithmeticError):
        return EXIT_CODES['numeric']
    if isinstance(exc, OSError):
        return EXIT_CODES['io']
    return EXIT_CODES['usage']
