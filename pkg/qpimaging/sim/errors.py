"""Exception types raised by the simulation library.

Every error carries a stable upper-snake ``code`` and an optional ``hint`` so
the command-line runner can turn it into the same ``{"code", "message",
"hint"}`` payload regardless of which module raised it.
"""

from typing import Any, Dict, Optional


class QPImagingError(Exception):
    """Base class for all library errors.

    Attributes:
        code: stable identifier used in CLI payloads and tests
        hint: optional human-readable suggestion for fixing the input
    """

    code = "QPIMAGING_ERROR"

    def __init__(self, message: str, *, code: Optional[str] = None, hint: Optional[str] = None):
        super().__init__(message)
        if code is not None:
            self.code = code
        self.hint = hint

    def to_dict(self) -> Dict[str, Any]:
        return {"code": self.code, "message": str(self), "hint": self.hint}

    def __reduce__(self):
        # keyword-only constructor arguments do not survive the default pickling
        return (_rebuild, (type(self), str(self), dict(self.__dict__)))


def _rebuild(cls: type, message: str, state: Dict[str, Any]) -> "QPImagingError":
    err = cls.__new__(cls)
    Exception.__init__(err, message)
    err.__dict__.update(state)
    return err


class DimensionError(QPImagingError):
    code = "DIMENSION_MISMATCH"


class HermiticityError(QPImagingError):
    code = "NOT_HERMITIAN"


class DensityError(QPImagingError):
    code = "NOT_DENSITY"


class NyquistError(QPImagingError):
    """Pupil sampling too coarse for the requested detector window."""

    code = "NYQUIST_VIOLATION"

    def __init__(self, message: str, *, required_samples: int, hint: Optional[str] = None):
        super().__init__(message, hint=hint)
        self.required_samples = required_samples


class DetectorMissError(QPImagingError):
    code = "DETECTOR_MISS"

    def __init__(self, message: str, *, eta: float, hint: Optional[str] = None):
        super().__init__(message, hint=hint)
        self.eta = eta


class SceneError(QPImagingError):
    code = "BAD_VALUE"


class ConfigError(QPImagingError):
    code = "BAD_VALUE"


class PlanInfeasibleError(QPImagingError):
    code = "PLAN_INFEASIBLE"

    def __init__(self, message: str, *, max_halfwidth: float, hint: Optional[str] = None):
        super().__init__(message, hint=hint)
        self.max_halfwidth = max_halfwidth


class UnsortableError(QPImagingError):
    code = "UNSORTABLE"


class PolynomialError(QPImagingError):
    code = "DEGREE_CAP"

    def __init__(self, message: str, *, achieved: float, hint: Optional[str] = None):
        super().__init__(message, hint=hint)
        self.achieved = achieved


class SynthesisError(QPImagingError):
    code = "SYNTHESIS_FAILED"

    def __init__(self, message: str, *, excess: float, code: Optional[str] = None,
                 hint: Optional[str] = None):
        super().__init__(message, code=code, hint=hint)
        self.excess = excess


class ModelError(QPImagingError):
    code = "INCONSISTENT_MODEL"


class IllConditionedError(QPImagingError):
    code = "KAPPA_REF_FLOOR"

    def __init__(self, message: str, *, bound: float, code: Optional[str] = None,
                 hint: Optional[str] = None):
        super().__init__(message, code=code, hint=hint)
        self.bound = bound
