"""Exception types raised across the package."""


class NoPropError(Exception):
    pass


class ShapeError(NoPropError, ValueError):
    pass


class UnsupportedOp(NoPropError, KeyError):
    pass


class ContractError(NoPropError, ValueError):
    pass


class NonFiniteError(NoPropError, FloatingPointError):
    pass


class ParameterNameError(NoPropError, KeyError):
    """A gradient or parameter name that the store does not know about."""


class ConfigError(NoPropError, ValueError):
    pass


class RangeError(NoPropError, IndexError):
    pass


class DataError(NoPropError, ValueError):
    pass


class FormatError(NoPropError, ValueError):
    pass


class TruncatedFileError(NoPropError, OSError):
    pass


class VersionError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


class StateError(NoPropError, RuntimeError):
    pass


class WorkerError(NoPropError, RuntimeError):
    """One or more parallel block jobs failed.

    ``completed`` maps block ids to the results of jobs that did finish,
    ``failures`` maps block ids to the formatted exception of each failed job.
    """

    def __init__(self, failures, completed):
        self.failures = dict(failures)
        self.completed = dict(completed)
        names = ", ".join(str(k) for k in sorted(self.failures, key=str))
        super().__init__(f"parallel job failed for block(s): {names}")
