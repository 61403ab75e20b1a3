"""Exception types shared across the package.

Every error raised by library code derives from ``T3GuardError`` so callers
(and the CLI) can catch one base class and emit a structured report.  Each
subclass carries a stable ``code`` string used in machine-readable output.
"""

from __future__ import annotations


class T3GuardError(Exception):
    """Base class for all errors raised by this package."""

    code = "error"

    def to_json_dict(self) -> dict:
        return {"error": self.code, "message": str(self)}


class FormatError(T3GuardError):
    """A binary or JSON artifact does not match its declared layout."""

    code = "format"


class PayloadLengthError(FormatError):
    """A file payload is shorter or longer than its header promises."""

    code = "payload_length"


class ValidationError(T3GuardError):
    """Input data violates a documented precondition (non-finite, wrong shape)."""

    code = "validation"


class DegenerateVectorError(ValidationError):
    """A row with zero norm cannot be projected onto the unit sphere."""

    code = "degenerate_vector"


class AlignmentError(T3GuardError):
    """Multi-view inputs disagree on sample count or identity."""

    code = "alignment"


class DimensionError(T3GuardError):
    """Two vectors or matrices have incompatible dimensions."""

    code = "dimension"


class ParameterError(T3GuardError):
    """A numeric parameter is outside its legal range."""

    code = "parameter"


class InsufficientDataError(T3GuardError):
    """Not enough samples to fit or index at the requested setting."""

    code = "insufficient_data"


class BatchTooSmallError(InsufficientDataError):
    """A scoring batch is too small for within-batch neighbor statistics.

    Carries the minimum batch size that would have been accepted so the
    caller can defer the batch or fall back to the precision/density subset.
    """

    code = "batch_too_small"

    def __init__(self, message: str, required: int):
        super().__init__(message)
        self.required = required


class ContractError(T3GuardError):
    """An object is used in a way its construction-time contract forbids."""

    code = "contract"


class MetricError(T3GuardError):
    """Evaluation metric inputs are unusable (for example an empty class)."""

    code = "metric"


class ProtocolError(T3GuardError):
    """A streaming event violates the request lifecycle protocol."""

    code = "protocol"


class TraceParseError(T3GuardError):
    """A trace or config line cannot be parsed; carries the line number."""

    code = "trace_parse"

    def __init__(self, message: str, line_number: int | None = None):
        super().__init__(message)
        self.line_number = line_number

    def to_json_dict(self) -> dict:
        doc = super().to_json_dict()
        if self.line_number is not None:
            doc["line_number"] = self.line_number
        return doc
