"""Exception hierarchy for rollbundle.

Every error also derives from the builtin a caller would naturally catch
(``ValueError`` for bad input, ``RuntimeError`` for numerical failures).
"""

from typing import Optional


class RollBundleError(Exception):
    """Base class for all rollbundle errors."""


class ContractViolation(RollBundleError, ValueError):
    """Input violates a documented precondition (shape, sign, range)."""


class SingularReferenceError(ContractViolation):
    """A reference tension reaches the web stiffness EA."""


class OracleTooLargeError(ContractViolation):
    """Vertex enumeration would visit more assignments than allowed."""


class EvaluationError(RollBundleError, ArithmeticError):
    """A problem function returned a non-finite value on a sample.

    Attributes:
        k: Zero-based timestep of the failing bundle
        sample_index: Column of the failing sample
    """

    def __init__(self, message: str, k: int, sample_index: int):
        super().__init__(f"{message} (timestep {k}, sample {sample_index})")
        self.k = k
        self.sample_index = sample_index


class SubproblemFailure(RollBundleError, RuntimeError):
    """The convex solver did not return an optimal point."""

    def __init__(self, message: str, status: Optional[str] = None):
        super().__init__(message)
        self.status = status


class BaselineUnavailableError(RollBundleError, RuntimeError):
    """The LQR baseline could not be synthesized."""


class ScenarioValidationError(RollBundleError, ValueError):
    """A scenario file failed validation.

    The message always reads ``"<path>: <field>: <reason>"`` so the offending
    entry can be located without a debugger.
    """

    def __init__(self, path: str, field: str, reason: str):
        super().__init__(f"{path}: {field}: {reason}")
        self.path = path
        self.field = field
        self.reason = reason
