"""Exception hierarchy for the inference engine.

Every error carries the process exit code the CLI maps it to.
"""

from __future__ import annotations


class CegError(ValueError):
    """Base class for all engine errors."""

    exit_code = 2


class ModelParseError(CegError):
    """Model or evidence document does not match the schema."""

    def __init__(self, path: str, message: str):
        self.path = path
        self.message = message
        super().__init__(f"{path}: {message}" if path else message)


class ValidationFailedError(CegError):
    """A model violates its structural invariants."""

    def __init__(self, report):
        self.report = report
        super().__init__(report.summary())


class UnsupportedFamilyError(CegError):
    """Holding-time family is not one of the supported families."""


class IncompleteModelError(CegError):
    """A timed edge needs a holding-time spec that is missing."""


class StructuralError(CegError):
    """Graph shape makes the requested operation impossible."""


class ResolutionError(CegError):
    """Density grid cannot hold the mass of a convolution."""

    exit_code = 3


class CapacityError(CegError):
    """Enumeration bound exceeded."""

    exit_code = 3


class NonIntrinsicEvidenceError(CegError):
    """Evidence does not define an intrinsic event of the graph."""

    exit_code = 1


class ContradictionError(CegError):
    """Evidence retains no root-to-sink path."""

    exit_code = 1


class ZeroSupportError(CegError):
    """Evidence has probability (density) zero under the model."""

    exit_code = 1
