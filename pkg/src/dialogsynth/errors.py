"""Exception hierarchy shared by every stage of the package."""

from __future__ import annotations


class DialogSynthError(Exception):
    """Base class for all package errors."""


class PreconditionError(DialogSynthError, ValueError):
    """An operation was called with inputs outside its contract."""


class IngestError(DialogSynthError):
    def __init__(self, message: str, field_path: str = ""):
        self.field_path = field_path
        super().__init__(f"{field_path}: {message}" if field_path else message)


class LabelUniverseError(IngestError):
    pass


class OntologyConfigError(DialogSynthError):
    pass


class DialogueParseError(DialogSynthError):
    """A dialogue line does not follow the ``<turn>. <topic>; <intent>; <role>: <text>`` grammar.

    ``lineno`` is 1-based when the line came from a block, ``column`` is the
    0-based offset where the grammar stopped matching.
    """

    def __init__(self, message: str, line: str, lineno: int | None = None, column: int | None = None):
        self.line = line
        self.lineno = lineno
        self.column = column
        where = []
        if lineno is not None:
            where.append(f"line {lineno}")
        if column is not None:
            where.append(f"col {column}")
        prefix = f"[{', '.join(where)}] " if where else ""
        super().__init__(f"{prefix}{message}: {line!r}")


class SerializationError(DialogSynthError):
    pass


class CheckerError(DialogSynthError):
    pass


class ContractError(DialogSynthError):
    """A backend returned data that violates the wire contract (e.g. ragged vectors)."""


class BackendError(DialogSynthError):
    """Transient failures persisted past the retry budget."""


class RequestError(DialogSynthError):
    """The backend rejected the request (non-retryable 4xx)."""

    def __init__(self, message: str, status_code: int | None = None):
        self.status_code = status_code
        super().__init__(message)


class AgentOutputError(DialogSynthError):
    """An LLM agent's response could not be parsed even after a format reminder."""

    def __init__(self, message: str, response: str = "", offset: int | None = None):
        self.response = response
        self.offset = offset
        super().__init__(message if offset is None else f"{message} (at offset {offset})")


class PlanParseError(AgentOutputError):
    pass


class StyleParseError(AgentOutputError):
    pass


class JudgeParseError(AgentOutputError):
    pass
