"""Exception types shared across the package.

The CLI maps these onto process exit codes: input/parse problems exit 1,
numerical failures exit 2, unusable depth priors exit 3.
"""


class ArapDepthError(Exception):
    """Base class for all package errors."""


class ConfigurationError(ArapDepthError):
    """Invalid configuration value (bad intrinsics, bad solver settings)."""


class DomainError(ArapDepthError):
    """An argument is outside the domain an operation is defined on."""


class ParseError(ArapDepthError):
    """A file could not be parsed.

    ``offset`` is the byte offset where parsing failed, when the parser is
    ours and knows it; readers that delegate decoding (PNG) leave it None.
    """

    def __init__(self, message, path=None, offset=None):
        detail = message
        if path is not None:
            detail = f"{path}: {detail}"
        if offset is not None:
            detail = f"{detail} (byte offset {offset})"
        super().__init__(detail)
        self.path = path
        self.offset = offset


class DegenerateTripleError(DomainError):
    """Three points are (near-)collinear, so no plane is defined."""


class DegenerateSuperpixelError(DomainError):
    """A superpixel cannot supply three usable, non-collinear pixels."""


class GrazingRayError(DomainError):
    """A ray is parallel (within tolerance) to the plane it should hit."""


class BehindCameraError(DomainError):
    """A ray-plane intersection lies at non-positive depth."""


class NumericalFailureError(ArapDepthError):
    """NaN/Inf appeared in an iterative computation.

    Carries the iteration index at which the failure was detected.
    """

    def __init__(self, message, iteration=None):
        if iteration is not None:
            message = f"{message} (iteration {iteration})"
        super().__init__(message)
        self.iteration = iteration


class UnusablePriorError(ArapDepthError):
    """The sparse depth prior cannot seed a superpixel's anchor triple."""

    def __init__(self, message, superpixel=None):
        if superpixel is not None:
            message = f"{message} (superpixel {superpixel})"
        super().__init__(message)
        self.superpixel = superpixel


class EmptyEvaluationError(ArapDepthError):
    """No pixel is valid in both maps being compared."""
