"""Exception hierarchy shared by every harland module.

Domain errors all derive from HarlandError so callers (and the CLI) can
catch one base class and map each subclass to a stable message.
"""

from __future__ import annotations


class HarlandError(Exception):
    """Base class for every error raised by this package."""


class UnknownDocument(HarlandError):
    """The document id does not name a live document."""


class UnknownSchema(HarlandError):
    """The schema name has not been registered."""


class UnknownCollection(HarlandError):
    """A membership predicate referenced a non-collection document."""


class DuplicateSchema(HarlandError):
    """A schema with this name is already registered."""


class InconsistentSchema(HarlandError):
    """Two schemas disagree on the constraint for a shared property name.

    Attributes:
        existing: name of the already-registered schema.
        prop: property name the disagreement is on.
    """

    def __init__(self, existing: str, prop: str, message: str | None = None):
        self.existing = existing
        self.prop = prop
        super().__init__(message or f"schema conflicts with {existing!r} on property {prop!r}")


class NotConforming(HarlandError):
    """Enforce was requested on a document that violates the schema."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(str(v) for v in self.violations) or "document does not conform")


class SchemaViolation(HarlandError):
    """A mutation was rejected because an enforced schema would be violated."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(str(v) for v in self.violations) or "mutation violates an enforced schema")


class WrongKind(HarlandError):
    """Operation applies to a different document kind (e.g. members on a plain doc)."""


class StorageFailure(HarlandError):
    """The backend could not apply or read a batch; nothing was applied."""


class CorruptStore(HarlandError):
    """Store file failed magic or checksum validation."""


class ParseError(HarlandError):
    """Query text could not be parsed.

    Attributes:
        position: character offset into the query string.
    """

    def __init__(self, message: str, position: int):
        self.position = position
        super().__init__(f"{message} (at position {position})")
