"""Exception hierarchy.

Every error raised for a violated input contract derives from
``ContractError``; the CLI maps those to exit code 1 and I/O failures
(``IoError`` and ``OSError``) to exit code 2.
"""


class ContractError(Exception):
    pass


class ShapeMismatch(ContractError, ValueError):
    pass


class DomainError(ContractError, ValueError):
    pass


class NotScalar(ContractError, ValueError):
    pass


class BackwardError(ContractError, RuntimeError):
    """Raised when a graph is differentiated a second time."""


class MissingGradient(ContractError, RuntimeError):
    pass


class InvalidCamera(ContractError, ValueError):
    pass


class NonPositiveDepth(ContractError, ValueError):
    pass


class NonMonotoneSamples(ContractError, ValueError):
    pass


class BadRange(ContractError, ValueError):
    pass


class EmptyValidSet(ContractError, ValueError):
    pass


class IndivisibleShape(ContractError, ValueError):
    pass


class WindowMismatch(ContractError, ValueError):
    pass


class AllIgnored(ContractError, ValueError):
    pass


class DegenerateSpec(ContractError, ValueError):
    pass


class ConfigError(ContractError, ValueError):
    pass


class CheckpointError(ContractError, ValueError):
    pass


class DatasetTooSmall(ContractError, ValueError):
    pass


class NoLabels(ContractError, ValueError):
    pass


class MissingSplit(ContractError, KeyError):
    pass


class BadFrame(ContractError, ValueError):
    pass


class IoError(OSError):
    pass
