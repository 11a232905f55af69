"""harland: an embedded document store.

Documents are bags of typed property values. Schemas constrain properties
and can be enforced or unenforced on any document at any time. Storage is
one row per property value, grouped into slices that load together; a
write-back cache with handle indirection sits in front. Queries compile to
shared-leaf plans, and commit subscriptions let workers coordinate through
schema enforcement alone.
"""

from harland.errors import (
    CorruptStore,
    DuplicateSchema,
    HarlandError,
    InconsistentSchema,
    NotConforming,
    ParseError,
    SchemaViolation,
    StorageFailure,
    UnknownCollection,
    UnknownDocument,
    UnknownSchema,
    WrongKind,
)
from harland.model import (
    Constraint,
    DocumentId,
    DocumentKind,
    DocumentSnapshot,
    Schema,
    Value,
    ValueType,
    bag,
    compare_values,
)

__all__ = [
    "Constraint",
    "CorruptStore",
    "DocumentId",
    "DocumentKind",
    "DocumentSnapshot",
    "DuplicateSchema",
    "HarlandError",
    "InconsistentSchema",
    "NotConforming",
    "ParseError",
    "Schema",
    "SchemaViolation",
    "StorageFailure",
    "UnknownCollection",
    "UnknownDocument",
    "UnknownSchema",
    "Value",
    "ValueType",
    "WrongKind",
    "bag",
    "compare_values",
]

__version__ = "0.1.0"
