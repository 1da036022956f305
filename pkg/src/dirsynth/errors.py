"""Exception types shared across the package.

Every error derives from :class:`DirSynthError`; the ones that signal bad
caller input also derive from :class:`ValueError` so generic handlers work.
"""


class DirSynthError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(DirSynthError, ValueError):
    pass


class PreconditionError(DirSynthError, ValueError):
    pass


class DegenerateInputError(DirSynthError, ValueError):
    pass


class NumericalFailure(DirSynthError, ArithmeticError):
    """Raised when an optimisation produces a non-finite value."""

    def __init__(self, message, iteration=None, level=None):
        super().__init__(message)
        self.iteration = iteration
        self.level = level


class FitFailure(DirSynthError, ValueError):
    pass


class GenerationFailure(DirSynthError, RuntimeError):
    pass


class FormatError(DirSynthError, ValueError):
    pass


class UnsupportedFormatError(FormatError):
    pass


class CorruptFileError(FormatError):
    pass
