"""Core data model: typed values, constraints, schemas, document snapshots.

Everything here is immutable. Mutation happens in the engine by building a
new snapshot; these types only describe state and compare it.
"""

from __future__ import annotations

import struct
import re
import uuid
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from enum import Enum
from typing import Iterable, Mapping, Optional

_EPOCH = datetime(1970, 1, 1, tzinfo=timezone.utc)
_INT64_MIN = -(2**63)
_INT64_MAX = 2**63 - 1


def _dt_to_ms(dt: datetime) -> int:
    delta = dt - _EPOCH
    return delta.days * 86_400_000 + delta.seconds * 1000 + delta.microseconds // 1000


# datetime.min/max bound the representable timestamp range
_TS_MIN = _dt_to_ms(datetime.min.replace(tzinfo=timezone.utc))
_TS_MAX = _dt_to_ms(datetime.max.replace(tzinfo=timezone.utc))

_ISO_RE = re.compile(
    r"^(\d{4}-\d{2}-\d{2}[T ]\d{2}:\d{2}:\d{2})(?:\.(\d{1,9}))?(Z|[+-]\d{2}:\d{2})?$"
)


class ValueType(Enum):
    TEXT = "text"
    INTEGER = "integer"
    FLOAT = "float"
    BOOLEAN = "boolean"
    TIMESTAMP = "timestamp"
    BYTES = "bytes"


# types with a total order; Boolean and Bytes support equality only
ORDERED_TYPES = frozenset({ValueType.TEXT, ValueType.INTEGER, ValueType.FLOAT, ValueType.TIMESTAMP})


@dataclass(frozen=True, eq=False)
class Value:
    """One typed value. Equality is bit-exact: Float compares by IEEE bits."""

    vtype: ValueType
    payload: object

    def __post_init__(self):
        t, p = self.vtype, self.payload
        if t is ValueType.TEXT:
            if not isinstance(p, str):
                raise ValueError("Text payload must be str")
            try:
                p.encode("utf-8")
            except UnicodeEncodeError as exc:
                raise ValueError(f"Text payload is not valid Unicode: {exc}") from exc
        elif t is ValueType.INTEGER:
            if isinstance(p, bool) or not isinstance(p, int):
                raise ValueError("Integer payload must be int")
            if not _INT64_MIN <= p <= _INT64_MAX:
                raise ValueError("Integer payload out of signed 64-bit range")
        elif t is ValueType.FLOAT:
            if not isinstance(p, float):
                raise ValueError("Float payload must be float")
            if p != p:
                raise ValueError("NaN is rejected at ingestion")
        elif t is ValueType.BOOLEAN:
            if not isinstance(p, bool):
                raise ValueError("Boolean payload must be bool")
        elif t is ValueType.TIMESTAMP:
            if isinstance(p, bool) or not isinstance(p, int):
                raise ValueError("Timestamp payload must be epoch milliseconds (int)")
            if not _TS_MIN <= p <= _TS_MAX:
                raise ValueError("Timestamp out of representable range")
        elif t is ValueType.BYTES:
            if not isinstance(p, bytes):
                raise ValueError("Bytes payload must be bytes")

    # ---- constructors ----

    @classmethod
    def text(cls, s: str) -> "Value":
        return cls(ValueType.TEXT, s)

    @classmethod
    def integer(cls, i: int) -> "Value":
        return cls(ValueType.INTEGER, i)

    @classmethod
    def floating(cls, f: float) -> "Value":
        return cls(ValueType.FLOAT, f)

    @classmethod
    def boolean(cls, b: bool) -> "Value":
        return cls(ValueType.BOOLEAN, b)

    @classmethod
    def timestamp(cls, ms_or_dt) -> "Value":
        if isinstance(ms_or_dt, datetime):
            dt = ms_or_dt
            if dt.tzinfo is None:
                dt = dt.replace(tzinfo=timezone.utc)
            return cls(ValueType.TIMESTAMP, _dt_to_ms(dt.astimezone(timezone.utc)))
        return cls(ValueType.TIMESTAMP, ms_or_dt)

    @classmethod
    def timestamp_text(cls, text: str) -> "Value":
        """Parse an ISO-8601 date-time; UTC assumed when no offset is given.

        Precision beyond milliseconds truncates.
        """
        m = _ISO_RE.match(text)
        if m is None:
            raise ValueError(f"not an ISO-8601 date-time: {text!r}")
        base, frac, offset = m.groups()
        micros = int((frac or "0").ljust(6, "0")[:6])
        if offset in (None, "Z"):
            offset = "+00:00"
        dt = datetime.fromisoformat(f"{base}{offset}").astimezone(timezone.utc)
        dt = dt.replace(microsecond=micros)
        return cls(ValueType.TIMESTAMP, _dt_to_ms(dt))

    @classmethod
    def binary(cls, b: bytes) -> "Value":
        return cls(ValueType.BYTES, b)

    # ---- rendering ----

    def to_timestamp_text(self) -> str:
        if self.vtype is not ValueType.TIMESTAMP:
            raise ValueError("not a Timestamp value")
        dt = _EPOCH + timedelta(milliseconds=self.payload)
        return f"{dt:%Y-%m-%dT%H:%M:%S}.{self.payload % 1000:03d}Z"

    # ---- identity ----

    def _key(self):
        p = self.payload
        if self.vtype is ValueType.FLOAT:
            p = struct.pack(">d", p)
        elif self.vtype is ValueType.BOOLEAN:
            p = b"\x01" if p else b"\x00"
        return (self.vtype.value, p)

    def __eq__(self, other):
        if not isinstance(other, Value):
            return NotImplemented
        return self._key() == other._key()

    def __hash__(self):
        return hash(self._key())

    def __repr__(self):
        return f"Value({self.vtype.value}, {self.payload!r})"


def sort_key(value: Value):
    """Deterministic total order over all values, used to canonicalize bags."""
    return value._key()


def bag(values: Iterable[Value]) -> tuple[Value, ...]:
    """Canonical form of a value bag: a tuple sorted by sort_key, duplicates kept."""
    return tuple(sorted(values, key=sort_key))


def compare_values(a: Value, b: Value) -> Optional[int]:
    """Compare two values: -1/0/+1, or None when incomparable.

    Values of different types never compare. Boolean and Bytes support
    equality only, so unequal pairs of those are incomparable too. Float
    uses a total order where -0.0 sorts below +0.0, matching bit equality.
    """
    if a.vtype is not b.vtype:
        return None
    if a.vtype in ORDERED_TYPES:
        if a.vtype is ValueType.FLOAT:
            if a.payload < b.payload:
                return -1
            if a.payload > b.payload:
                return 1
            if a._key() == b._key():
                return 0
            return -1 if struct.pack(">d", a.payload)[0] & 0x80 else 1
        if a.payload < b.payload:
            return -1
        if a.payload > b.payload:
            return 1
        return 0
    return 0 if a._key() == b._key() else None


_ARITIES = {"0..1": (0, 1), "1..1": (1, 1), "0..*": (0, None), "1..*": (1, None)}


@dataclass(frozen=True)
class Constraint:
    """Per-property rule: value type plus bag-size bounds.

    min_count is 0 or 1; max_count is 1 or None (unbounded).
    """

    value_type: ValueType
    min_count: int
    max_count: Optional[int]

    def __post_init__(self):
        if self.min_count not in (0, 1):
            raise ValueError("min_count must be 0 or 1")
        if self.max_count not in (1, None):
            raise ValueError("max_count must be 1 or unbounded (None)")
        if self.max_count is not None and self.min_count > self.max_count:
            raise ValueError("min_count exceeds max_count")

    @classmethod
    def from_text(cls, type_tag: str, arity: str) -> "Constraint":
        try:
            vtype = ValueType(type_tag)
        except ValueError:
            raise ValueError(f"unknown value type {type_tag!r}") from None
        if arity not in _ARITIES:
            raise ValueError(f"unknown arity {arity!r}, expected one of {sorted(_ARITIES)}")
        lo, hi = _ARITIES[arity]
        return cls(vtype, lo, hi)

    def arity_text(self) -> str:
        return f"{self.min_count}..{self.max_count if self.max_count is not None else '*'}"

    def allows_count(self, n: int) -> bool:
        if n < self.min_count:
            return False
        return self.max_count is None or n <= self.max_count


@dataclass(frozen=True)
class Schema:
    """Named set of property constraints. May be empty (pure synchronization marker)."""

    name: str
    constraints: Mapping[str, Constraint] = field(default_factory=dict)

    def __post_init__(self):
        if not self.name:
            raise ValueError("schema name must be non-empty")
        for prop in self.constraints:
            if not prop:
                raise ValueError("property names must be non-empty")


class DocumentKind(Enum):
    PLAIN = "plain"
    COLLECTION = "collection"
    CONTENT = "content"


@dataclass(frozen=True, order=True)
class DocumentId:
    """Opaque 128-bit identifier, rendered in canonical UUID text form."""

    value: int

    def __post_init__(self):
        if not 0 <= self.value < 2**128:
            raise ValueError("document id out of 128-bit range")

    @classmethod
    def random(cls) -> "DocumentId":
        return cls(uuid.uuid4().int)

    @classmethod
    def parse(cls, text: str) -> "DocumentId":
        return cls(uuid.UUID(text).int)

    def __str__(self):
        return str(uuid.UUID(int=self.value))

    def __repr__(self):
        return f"DocumentId({self})"


@dataclass(frozen=True)
class DocumentSnapshot:
    """Immutable committed view of one document.

    properties maps name -> canonical value bag (never empty: a property
    with no values does not exist). members is populated only for
    collections.
    """

    doc_id: DocumentId
    kind: DocumentKind
    properties: Mapping[str, tuple[Value, ...]]
    enforced: frozenset[str]
    members: frozenset[DocumentId]

    def __post_init__(self):
        if self.members and self.kind is not DocumentKind.COLLECTION:
            raise ValueError("only collections have members")
        for name, values in self.properties.items():
            if not values:
                raise ValueError(f"property {name!r} has an empty bag; drop it instead")

    def values_of(self, prop_name: str) -> tuple[Value, ...]:
        """The property's value bag; absent property reads as the empty bag."""
        return self.properties.get(prop_name, ())
