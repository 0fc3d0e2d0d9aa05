from __future__ import annotations


class CompanionError(Exception):
    """Base class for all errors raised by this package."""


class SchemaError(CompanionError):
    """Input data does not match the expected schema."""

    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)


class DuplicateKeyError(SchemaError):
    def __init__(self, key: str, line: int | None = None):
        self.key = key
        super().__init__(f"duplicate product_id {key!r}", line=line, field="product_id")


class ToolError(CompanionError):
    """A tool call could not be executed; rendered as an observation, never fatal."""


class InvalidSignalError(CompanionError, ValueError):
    """Judge signals outside their declared ranges."""


class BackendError(CompanionError):
    """An external backend (LLM, embedder, judge) failed."""
