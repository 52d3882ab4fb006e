"""Exception types shared across the pipeline."""


class MemtlError(Exception):
    """Base class for all package errors."""


class InvalidParameterError(MemtlError, ValueError):
    """An input violates a documented precondition."""


class ZeroAllocationError(MemtlError, ValueError):
    """An offloading MT was given no MES compute."""


class UnlabelableError(MemtlError):
    """No offloading decision satisfies the delay constraints."""


class TrainingDiverged(MemtlError, FloatingPointError):
    """Training produced a non-finite loss."""


class StaleCacheError(MemtlError, RuntimeError):
    """A forward cache was used after the parameters changed."""
