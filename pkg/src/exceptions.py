"""
Custom Exceptions for the GMWB Monte Carlo engine.

Provides typed exceptions for parameter validation, simulation failures,
estimation problems and configuration errors, each with an error code and
a machine-readable record for the command-line front end.
"""

from enum import Enum
from typing import Any, Dict, List, Optional


class ErrorCode(Enum):
    """Error codes for categorizing exceptions."""
    # Parameter Errors (1xx)
    INVALID_PARAMETER = 101
    MEASURE_CHANGE_INVALID = 102
    SCHEDULE_INVALID = 103

    # Simulation Errors (2xx)
    ENSEMBLE_EXTINCT = 201
    POOL_EXHAUSTED = 202
    RESOURCE_ERROR = 203

    # Estimation Errors (3xx)
    BRACKET_FAILED = 301
    EMPTY_DISTRIBUTION = 302
    DEGENERATE_TAIL = 303

    # Configuration / CLI Errors (4xx)
    CONFIG_PARSE_ERROR = 401
    CONFIG_INVALID = 402
    USAGE_ERROR = 403

    # Validation Errors (5xx)
    VALIDATION_FAILED = 501


class EngineError(Exception):
    """Base exception for all engine errors."""

    def __init__(
        self,
        message: str,
        code: ErrorCode,
        details: Optional[str] = None
    ):
        self.message = message
        self.code = code
        self.details = details
        super().__init__(self.message)

    def __str__(self) -> str:
        return f"[{self.code.name}] {self.message}"

    def to_record(self) -> Dict[str, Any]:
        """Machine-readable error record (written by the CLI on failure)."""
        return {
            "error": self.code.name,
            "code": self.code.value,
            "message": self.message,
            "details": self.details,
        }


class ParameterError(EngineError):
    """Raised when a model or simulation input violates its invariants."""

    def __init__(
        self,
        message: str,
        field_name: Optional[str] = None,
        value: Any = None,
        code: ErrorCode = ErrorCode.INVALID_PARAMETER
    ):
        self.field_name = field_name
        self.value = value
        details = f"{field_name}={value!r}" if field_name else None
        super().__init__(message=message, code=code, details=details)


class MeasureChangeError(ParameterError):
    """Raised when risk premia produce an invalid real-world parameter set."""

    def __init__(self, message: str, field_name: str, value: Any):
        super().__init__(
            message=message,
            field_name=field_name,
            value=value,
            code=ErrorCode.MEASURE_CHANGE_INVALID
        )


class ScheduleError(ParameterError):
    """Raised when a withdrawal schedule is malformed or does not exhaust F0."""

    def __init__(self, message: str, field_name: str = "withdrawals", value: Any = None):
        super().__init__(
            message=message,
            field_name=field_name,
            value=value,
            code=ErrorCode.SCHEDULE_INVALID
        )


class EnsembleExtinctionError(EngineError):
    """Raised when branching leaves no particle alive."""

    def __init__(self, step: int):
        self.step = step
        super().__init__(
            message=f"Particle ensemble went extinct at step {step}",
            code=ErrorCode.ENSEMBLE_EXTINCT,
            details=f"step={step}"
        )


class PoolExhaustedError(EngineError):
    """Raised when a pregenerated normal pool cannot serve a request."""

    def __init__(self, requested: int, remaining: int):
        self.requested = requested
        self.remaining = remaining
        super().__init__(
            message="Normal pool exhausted",
            code=ErrorCode.POOL_EXHAUSTED,
            details=f"requested={requested}, remaining={remaining}"
        )


class SimulationResourceError(EngineError):
    """Raised when an allocation for the simulation fails."""

    def __init__(self, message: str, original_error: Optional[str] = None):
        super().__init__(
            message=message,
            code=ErrorCode.RESOURCE_ERROR,
            details=original_error
        )


class BracketError(EngineError):
    """Raised when the fee bisection bracket does not straddle the target."""

    def __init__(self, lo: float, hi: float, value_lo: float, value_hi: float, target: float = 0.0):
        self.lo = lo
        self.hi = hi
        self.value_lo = value_lo
        self.value_hi = value_hi
        super().__init__(
            message="Net liability does not change sign across the fee bracket",
            code=ErrorCode.BRACKET_FAILED,
            details=(
                f"c_bar in [{lo}, {hi}] gives net liability "
                f"[{value_lo}, {value_hi}], target={target}"
            )
        )


class EmptyDistributionError(EngineError):
    """Raised when a risk measure is requested on an empty sample."""

    def __init__(self, message: str = "Loss distribution has no samples"):
        super().__init__(message=message, code=ErrorCode.EMPTY_DISTRIBUTION)


class DegenerateTailError(EngineError):
    """Raised when no sample lies strictly above the VaR."""

    def __init__(self, zeta: float, var: float):
        self.zeta = zeta
        self.var = var
        super().__init__(
            message="No sample strictly above the value-at-risk",
            code=ErrorCode.DEGENERATE_TAIL,
            details=f"zeta={zeta}, var={var}"
        )


class ConfigError(EngineError):
    """Raised when a run document cannot be parsed or is invalid."""

    def __init__(
        self,
        message: str,
        path: Optional[str] = None,
        line: Optional[int] = None,
        column: Optional[int] = None,
        code: ErrorCode = ErrorCode.CONFIG_INVALID
    ):
        self.path = path
        self.line = line
        self.column = column
        location = None
        if path is not None:
            location = f"File: {path}"
            if line is not None:
                location += f", line {line}, column {column}"
        super().__init__(message=message, code=code, details=location)

    def to_record(self) -> Dict[str, Any]:
        record = super().to_record()
        record.update({"path": self.path, "line": self.line, "column": self.column})
        return record


class UsageError(EngineError):
    """Raised for invalid command-line usage."""

    def __init__(self, message: str):
        super().__init__(message=message, code=ErrorCode.USAGE_ERROR)


class ValidationFailedError(EngineError):
    """Raised when the property suite reports failing checks."""

    def __init__(self, failed_checks: List[str]):
        self.failed_checks = failed_checks
        super().__init__(
            message=f"{len(failed_checks)} validation check(s) failed",
            code=ErrorCode.VALIDATION_FAILED,
            details=", ".join(failed_checks)
        )
