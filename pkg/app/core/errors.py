"""
Exception hierarchy shared by the library and the CLI.

Every error carries the process exit code the CLI should report for it:
2 for configuration problems, 3 for estimation/pipeline failures and 4 for
instability (no usable functional, or too many failed subsamples).
"""
from typing import Optional


class EbPoolError(Exception):
    exit_code = 3


class ConfigError(EbPoolError):
    exit_code = 2


class InvalidArgument(EbPoolError, ValueError):
    """An argument outside the documented domain of an operation."""


# --- panel / combiner ---
class EmptyPanel(InvalidArgument):
    pass


class NonPositiveVariance(InvalidArgument):
    pass


class NegativeTau2(InvalidArgument):
    pass


class NeedsTwoEstimators(InvalidArgument):
    pass


class MissingInfluence(InvalidArgument):
    pass


class PanelTooSmall(InvalidArgument):
    pass


class NonPositiveTau2(InvalidArgument):
    pass


# --- solvers ---
class NoConvergence(EbPoolError):
    pass


# --- functional estimators ---
class EstimationError(EbPoolError):
    pass


class WeakInstrument(EstimationError):
    pass


class PositivityViolation(EstimationError):
    pass


class EmptyGroup(EstimationError):
    pass


class EmptyArm(EstimationError):
    pass


class InsufficientLocalData(EstimationError):
    pass


# --- intervals ---
class QuantileInfeasible(InvalidArgument):
    pass


class ZeroWidth(InvalidArgument):
    pass


class PipelineFailure(EbPoolError):
    def __init__(self, message: str, index: Optional[int] = None):
        super().__init__(message)
        self.index = index


class InstabilityError(EbPoolError):
    exit_code = 4


class AllSubsetsWeak(InstabilityError):
    pass


class SubsampleInstability(InstabilityError):
    def __init__(self, message: str, failed_indices=()):
        super().__init__(message)
        self.failed_indices = tuple(failed_indices)
