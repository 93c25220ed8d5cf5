"""
Exception hierarchy for PermLab.

Every exception carries an ``exit_code`` which :mod:`privex.permlab.cli` uses as the process exit status:

    ====  =====================================================
    code  meaning
    ====  =====================================================
    1     usage error (bad flags / config keys / domain / shape)
    2     file format error (corrupt checkpoint or metadata)
    3     verification or probe failure
    4     training divergence (non-finite loss)
    ====  =====================================================
"""


class PermlabError(Exception):
    """Base class for all errors raised by PermLab"""
    exit_code = 1


class UsageError(PermlabError):
    """Bad command line flags, unknown config keys, or an unknown construction name"""
    exit_code = 1


class ShapeError(PermlabError, ValueError):
    """Matrix dimensions don't agree with what an operation requires"""
    exit_code = 1


class DegenerateRowError(PermlabError, ValueError):
    """A softmax row is entirely masked out, so there's nothing to normalise over"""
    exit_code = 1


class DomainError(PermlabError, ValueError):
    """An argument is outside the operation's domain, e.g. ``d = 0`` or ``eps = 0``"""
    exit_code = 1


class ModeError(PermlabError, RuntimeError):
    """An operation was called on a model with the wrong mask mode (e.g. the Lemma 1 check on a mask-free model)"""
    exit_code = 1


class PermlabFormatError(PermlabError):
    """
    A checkpoint, metadata or config file could not be parsed. ``line`` is the 1-based line number at fault
    (``None`` if the error isn't tied to a single line).
    """
    exit_code = 2
    
    def __init__(self, message: str, line: int = None, path: str = None):
        self.line = line
        self.path = path
        where = ''
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)


class VerificationFailed(PermlabError):
    """Raised by the CLI when a verification / probe report did not pass"""
    exit_code = 3


class DivergenceError(PermlabError, ArithmeticError):
    """The training loss became non-finite. ``step`` is the step at which it happened."""
    exit_code = 4
    
    def __init__(self, message: str, step: int = None):
        self.step = step
        super().__init__(message)
