"""Exception hierarchy shared across the package."""

from __future__ import annotations


class VisReasonError(Exception):
    """Base class for every error raised by this package."""


# -- core ---------------------------------------------------------------------


class NoSuchTurn(VisReasonError, LookupError):
    pass


class AuditIOError(VisReasonError, OSError):
    """Writing or reading an audit trail failed."""


class ImageRefError(VisReasonError, ValueError):
    def __init__(self, message: str, line_no: int | None = None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


# -- prompts ------------------------------------------------------------------


class MissingBinding(VisReasonError, KeyError):
    def __init__(self, name: str):
        super().__init__(name)
        self.name = name

    def __str__(self) -> str:
        return f"missing binding for placeholder {self.name!r}"


class UnknownPlaceholder(VisReasonError, KeyError):
    pass


class UnknownTemplate(VisReasonError, KeyError):
    pass


class MalformedTemplate(VisReasonError, ValueError):
    pass


# -- gateway ------------------------------------------------------------------


class GatewayError(VisReasonError):
    """A backend call failed."""

    def __init__(self, message: str, backend_id: str = ""):
        super().__init__(message)
        self.backend_id = backend_id


class BackendTimeout(GatewayError):
    pass


class TransportError(GatewayError):
    pass


class BadStatus(GatewayError):
    def __init__(self, code: int, backend_id: str = "", body: str = ""):
        super().__init__(f"backend {backend_id!r} returned HTTP {code}", backend_id)
        self.code = code
        self.body = body


class EmptyCompletion(GatewayError):
    pass


class ImageDecodeError(GatewayError, ValueError):
    pass


class AllBackendsFailed(GatewayError):
    def __init__(self, evidence):
        ids = ", ".join(e.backend_id for e in evidence)
        super().__init__(f"every vision backend failed ({ids})")
        self.evidence = evidence


class ScriptParseError(VisReasonError, ValueError):
    pass


class ConfigError(VisReasonError, ValueError):
    pass


# -- parsing ------------------------------------------------------------------


class NoQuestionFound(VisReasonError, ValueError):
    pass


class UnparseableVerdict(VisReasonError, ValueError):
    pass


# -- orchestrator -------------------------------------------------------------


class MissingContext(VisReasonError, RuntimeError):
    pass


class PhaseError(VisReasonError, RuntimeError):
    """A pipeline phase failed; ``phase`` and ``iteration`` say where."""

    def __init__(self, phase: str, iteration: int, cause: BaseException):
        super().__init__(f"phase {phase!r} (iteration {iteration}) failed: {cause}")
        self.phase = phase
        self.iteration = iteration
        self.cause = cause


# -- evalharness --------------------------------------------------------------


class SchemaError(VisReasonError, ValueError):
    def __init__(self, message: str, line_no: int | None = None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


class EmptyInput(VisReasonError, ValueError):
    pass


class TypeSetMismatch(VisReasonError, ValueError):
    pass
