"""Exception hierarchy shared by the fitting library and the CLI.

Every error carries a ``to_dict()`` payload so the command line can emit it
as a machine-readable JSON body, the same way an API returns ``{"error": ...}``.
"""
from typing import Any, Dict, Optional


class SgndError(Exception):
    """Base class for all library errors."""

    def __init__(self, message: str, **context: Any):
        super().__init__(message)
        self.message = message
        self.context = context

    def to_dict(self) -> Dict[str, Any]:
        out = {"error": type(self).__name__, "message": self.message}
        for k, v in self.context.items():
            out[k] = v if isinstance(v, (int, float, str, bool, type(None))) else str(v)
        return out


# ────────────────────────── distribution ────────────────────────────────────

class InvalidShape(SgndError, ValueError):
    pass


class QuadratureFailure(SgndError):
    pass


# ────────────────────────── model ───────────────────────────────────────────

class NonFiniteLikelihood(SgndError):
    pass


class DegenerateColumn(SgndError):
    pass


# ────────────────────────── optimizer ───────────────────────────────────────

class SingularDesign(SgndError):
    pass


class BlockSolveFailure(SgndError):
    pass


class NoAscentDirection(SgndError):
    pass


class MaxIterations(SgndError):
    pass


class TelescopeFailure(SgndError):
    """A fatal solver error raised at a given telescope step."""

    def __init__(self, message: str, step: Optional[int] = None, **context: Any):
        super().__init__(message, step=step, **context)
        self.step = step


# ────────────────────────── inference ───────────────────────────────────────

class SingularInformation(SgndError):
    pass


class VariableNotActive(SgndError):
    pass


class BootstrapFailure(SgndError):
    pass


# ────────────────────────── data / cli ──────────────────────────────────────

class DataError(SgndError):
    pass


class MissingColumn(DataError):
    pass


class NonNumericCell(DataError):
    pass


class MissingValue(DataError):
    pass


class UnknownCovariate(DataError):
    pass
