"""Vertical-row persistence: one row per property value, plus metadata.

Two reference backends share one checkpoint format:

    HARLAND-STORE v1
    PROPS
    <doc> <slice> <prop> <type:payload> <ordinal>      (tab separated)
    META
    DOC <doc> <kind>
    SCHEMA <name> <slice> <prop>:<type>:<arity>...
    ENFORCE <doc> <seq> <schema>
    ASSIGN <doc> <prop> <slice>
    MEMBER <collection> <member>
    CONTENT
    <doc> <length> <sorted tokens>
    END <decimal CRC32C of all prior bytes>

Fields are backslash-escaped (\\t, \\n, \\r, \\\\). Text and Bytes payloads
are lowercase hex so every value round-trips bit-exactly. Records are
written in a canonical sort order, which makes checkpoint bytes a pure
function of store state. Content bytes live outside the checkpoint in
content/<doc-id> files under the store root.
"""

from __future__ import annotations

import logging
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Union

from harland.errors import CorruptStore, StorageFailure, UnknownDocument
from harland.model import Constraint, DocumentId, DocumentKind, Schema, Value, ValueType, sort_key

logger = logging.getLogger(__name__)

MAGIC = "HARLAND-STORE v1"
CHECKPOINT_NAME = "store.hl1"
CONTENT_DIR = "content"


# ---- CRC32C (Castagnoli), table driven ----

def _make_crc_table() -> list[int]:
    table = []
    for i in range(256):
        crc = i
        for _ in range(8):
            crc = (crc >> 1) ^ 0x82F63B78 if crc & 1 else crc >> 1
        table.append(crc)
    return table


_CRC_TABLE = _make_crc_table()


def crc32c(data: bytes, value: int = 0) -> int:
    crc = value ^ 0xFFFFFFFF
    for byte in data:
        crc = (crc >> 8) ^ _CRC_TABLE[(crc ^ byte) & 0xFF]
    return crc ^ 0xFFFFFFFF


# ---- record field escaping ----

_UNESCAPE = {"t": "\t", "n": "\n", "r": "\r", "\\": "\\"}


def escape_field(text: str) -> str:
    return (
        text.replace("\\", "\\\\")
        .replace("\t", "\\t")
        .replace("\n", "\\n")
        .replace("\r", "\\r")
    )


def unescape_field(text: str) -> str:
    if "\\" not in text:
        return text
    out = []
    i = 0
    while i < len(text):
        ch = text[i]
        if ch == "\\" and i + 1 < len(text):
            out.append(_UNESCAPE.get(text[i + 1], text[i + 1]))
            i += 2
        else:
            out.append(ch)
            i += 1
    return "".join(out)


# ---- canonical value text encoding ----

def encode_value(value: Value) -> str:
    t = value.vtype
    if t is ValueType.TEXT:
        body = value.payload.encode("utf-8").hex()
    elif t is ValueType.BYTES:
        body = value.payload.hex()
    elif t is ValueType.INTEGER:
        body = str(value.payload)
    elif t is ValueType.FLOAT:
        body = repr(value.payload)
    elif t is ValueType.BOOLEAN:
        body = "true" if value.payload else "false"
    elif t is ValueType.TIMESTAMP:
        body = value.to_timestamp_text()
    else:  # pragma: no cover
        raise ValueError(f"unhandled value type {t}")
    return f"{t.value}:{body}"


def decode_value(text: str) -> Value:
    tag, sep, body = text.partition(":")
    if not sep:
        raise CorruptStore(f"malformed value encoding {text!r}")
    try:
        t = ValueType(tag)
        if t is ValueType.TEXT:
            return Value.text(bytes.fromhex(body).decode("utf-8"))
        if t is ValueType.BYTES:
            return Value.binary(bytes.fromhex(body))
        if t is ValueType.INTEGER:
            return Value.integer(int(body))
        if t is ValueType.FLOAT:
            return Value.floating(float(body))
        if t is ValueType.BOOLEAN:
            if body not in ("true", "false"):
                raise ValueError(body)
            return Value.boolean(body == "true")
        if t is ValueType.TIMESTAMP:
            return Value.timestamp_text(body)
    except (ValueError, UnicodeDecodeError) as exc:
        raise CorruptStore(f"malformed value encoding {text!r}: {exc}") from exc
    raise CorruptStore(f"unknown value tag {tag!r}")  # pragma: no cover


# ---- content tokenization ----

def tokenize(data: bytes) -> frozenset[str]:
    """Maximal runs of Unicode alphanumerics in the UTF-8 decoding, case-folded.

    Bytes that do not decode are skipped; the index is a set, not a
    positional structure.
    """
    text = data.decode("utf-8", errors="ignore")
    tokens = set()
    run = []
    for ch in text:
        if ch.isalnum():
            run.append(ch)
        elif run:
            tokens.add("".join(run).casefold())
            run = []
    if run:
        tokens.add("".join(run).casefold())
    return frozenset(tokens)


# ---- rows and metadata records ----

@dataclass(frozen=True)
class PropertyRow:
    """One stored value: the vertical-storage unit."""

    doc_id: DocumentId
    slice_id: int
    prop: str
    value: Value
    ordinal: int

    def key(self):
        return (self.doc_id, self.prop, self.value, self.ordinal)


RowKey = tuple  # (doc_id, prop, value, ordinal)


@dataclass(frozen=True)
class DocumentRecord:
    doc_id: DocumentId
    kind: DocumentKind

    def key(self):
        return ("doc", self.doc_id)


@dataclass(frozen=True)
class SchemaDef:
    schema: Schema
    slice_id: int

    def key(self):
        return ("schema", self.schema.name)

    def __hash__(self):
        return hash(self.key())


@dataclass(frozen=True)
class Enforcement:
    doc_id: DocumentId
    schema: str
    seq: int

    def key(self):
        return ("enforce", self.doc_id, self.schema)


@dataclass(frozen=True)
class SliceAssignment:
    doc_id: DocumentId
    prop: str
    slice_id: int

    def key(self):
        return ("assign", self.doc_id, self.prop)


@dataclass(frozen=True)
class Membership:
    collection: DocumentId
    member: DocumentId

    def key(self):
        return ("member", self.collection, self.member)


MetadataRecord = Union[DocumentRecord, SchemaDef, Enforcement, SliceAssignment, Membership]


@dataclass(frozen=True)
class ContentRef:
    doc_id: DocumentId
    length: int
    tokens: frozenset[str]


@dataclass
class DocumentData:
    """Result of one fetch: requested slices' rows plus document metadata."""

    kind: DocumentKind
    rows: list[PropertyRow]
    enforcement: list[tuple[str, int]]  # (schema, seq), earliest first
    assignments: dict[str, int]
    members: frozenset[DocumentId]
    content_ref: Optional[ContentRef]


@dataclass
class MetaView:
    """Full metadata image used to prime a cache at open time."""

    docs: dict[DocumentId, DocumentKind]
    schemas: dict[str, tuple[Schema, int]]
    enforcement: dict[DocumentId, dict[str, int]]
    assignments: dict[DocumentId, dict[str, int]]
    members: dict[DocumentId, set[DocumentId]]
    content: dict[DocumentId, ContentRef]


class MemoryBackend:
    """In-memory reference backend. One writer batch at a time; reads see
    only committed batches. Counters instrument every backend round trip."""

    def __init__(self):
        self._lock = threading.RLock()
        self._docs: dict[DocumentId, DocumentKind] = {}
        self._rows: dict[DocumentId, dict[RowKey, PropertyRow]] = {}
        self._schemas: dict[str, tuple[Schema, int]] = {}
        self._enforcement: dict[DocumentId, dict[str, int]] = {}
        self._assignments: dict[DocumentId, dict[str, int]] = {}
        self._members: dict[DocumentId, set[DocumentId]] = {}
        self._content: dict[DocumentId, ContentRef] = {}
        self._blobs: dict[DocumentId, bytes] = {}
        self.fetch_count = 0
        self.batch_count = 0
        self.scan_count = 0
        self.fail_next_persist = False

    # ---- batches ----

    def put_rows(
        self,
        rows: Iterable[PropertyRow] = (),
        deletes: Iterable[RowKey] = (),
        meta: Iterable[MetadataRecord] = (),
        meta_deletes: Iterable[MetadataRecord] = (),
    ) -> None:
        """Apply one atomic batch; on any error nothing is applied."""
        rows, deletes = list(rows), [tuple(k) for k in deletes]
        meta, meta_deletes = list(meta), list(meta_deletes)
        with self._lock:
            self._validate_batch(rows, deletes, meta, meta_deletes)
            undo: list = []
            try:
                for record in meta:
                    self._apply_meta(record, undo)
                for record in meta_deletes:
                    self._apply_meta_delete(record, undo)
                for key in deletes:
                    doc_id = key[0]
                    row = self._rows[doc_id].pop(key[1:])
                    undo.append(lambda d=doc_id, k=key[1:], r=row: self._rows[d].__setitem__(k, r))
                for row in rows:
                    slot = self._rows.setdefault(row.doc_id, {})
                    slot[row.key()[1:]] = row
                    undo.append(lambda d=row.doc_id, k=row.key()[1:]: self._rows[d].pop(k, None))
                self._persist()
            except BaseException:
                for fn in reversed(undo):
                    fn()
                raise
            self.batch_count += 1

    def _validate_batch(self, rows, deletes, meta, meta_deletes):
        staged_docs = set(self._docs)
        staged_schemas = set(self._schemas)
        for record in meta:
            if isinstance(record, DocumentRecord):
                if record.doc_id in staged_docs:
                    raise StorageFailure(f"document {record.doc_id} already exists")
                staged_docs.add(record.doc_id)
            elif isinstance(record, SchemaDef):
                if record.schema.name in staged_schemas:
                    raise StorageFailure(f"schema {record.schema.name!r} already stored")
                staged_schemas.add(record.schema.name)
            elif isinstance(record, Enforcement):
                if record.doc_id not in staged_docs or record.schema not in staged_schemas:
                    raise StorageFailure("enforcement references unknown document or schema")
            elif isinstance(record, SliceAssignment):
                if record.doc_id not in staged_docs:
                    raise StorageFailure("slice assignment references unknown document")
                existing = self._assignments.get(record.doc_id, {}).get(record.prop)
                if existing is not None and existing != record.slice_id:
                    raise StorageFailure(
                        f"slice assignment for ({record.doc_id}, {record.prop!r}) is write-once"
                    )
            elif isinstance(record, Membership):
                if record.collection not in staged_docs or record.member not in staged_docs:
                    raise StorageFailure("membership references unknown document")
            else:
                raise StorageFailure(f"unsupported metadata record {record!r}")
        for record in meta_deletes:
            if isinstance(record, Enforcement):
                if record.schema not in self._enforcement.get(record.doc_id, {}):
                    raise StorageFailure("retracting enforcement that is not stored")
            elif isinstance(record, Membership):
                if record.member not in self._members.get(record.collection, set()):
                    raise StorageFailure("retracting membership that is not stored")
            else:
                raise StorageFailure(f"metadata record {type(record).__name__} cannot be retracted")
        seen_deletes = set()
        for key in deletes:
            if len(key) != 4:
                raise StorageFailure(f"malformed row key {key!r}")
            if key in seen_deletes:
                raise StorageFailure(f"duplicate delete {key!r} in batch")
            seen_deletes.add(key)
            if key[1:] not in self._rows.get(key[0], {}):
                raise StorageFailure(f"deleting unknown row {key!r}")
        staged_rows = set()
        for row in rows:
            if row.doc_id not in staged_docs:
                raise StorageFailure(f"row for unknown document {row.doc_id}")
            if row.slice_id < 0:
                raise StorageFailure("negative slice id")
            key = row.key()
            if key in staged_rows:
                raise StorageFailure(f"duplicate row {key!r} in batch")
            staged_rows.add(key)
            if key[1:] in self._rows.get(row.doc_id, {}) and key not in seen_deletes:
                raise StorageFailure(f"row {key!r} already stored")

    def _apply_meta(self, record: MetadataRecord, undo: list) -> None:
        if isinstance(record, DocumentRecord):
            self._docs[record.doc_id] = record.kind
            undo.append(lambda: self._docs.pop(record.doc_id, None))
        elif isinstance(record, SchemaDef):
            self._schemas[record.schema.name] = (record.schema, record.slice_id)
            undo.append(lambda: self._schemas.pop(record.schema.name, None))
        elif isinstance(record, Enforcement):
            slot = self._enforcement.setdefault(record.doc_id, {})
            old = slot.get(record.schema)
            slot[record.schema] = record.seq
            if old is None:
                undo.append(lambda: slot.pop(record.schema, None))
            else:
                undo.append(lambda: slot.__setitem__(record.schema, old))
        elif isinstance(record, SliceAssignment):
            slot = self._assignments.setdefault(record.doc_id, {})
            slot[record.prop] = record.slice_id
            undo.append(lambda: slot.pop(record.prop, None))
        elif isinstance(record, Membership):
            slot = self._members.setdefault(record.collection, set())
            slot.add(record.member)
            undo.append(lambda: slot.discard(record.member))

    def _apply_meta_delete(self, record: MetadataRecord, undo: list) -> None:
        if isinstance(record, Enforcement):
            slot = self._enforcement.get(record.doc_id, {})
            old = slot.pop(record.schema)
            undo.append(lambda: slot.__setitem__(record.schema, old))
        elif isinstance(record, Membership):
            self._members[record.collection].discard(record.member)
            undo.append(lambda: self._members[record.collection].add(record.member))

    # ---- reads ----

    def fetch_slices(self, doc_id: DocumentId, slice_ids: set[int]) -> DocumentData:
        """One round trip: rows of the requested slices plus all metadata."""
        with self._lock:
            self.fetch_count += 1
            kind = self._require(doc_id)
            rows = [r for r in self._rows.get(doc_id, {}).values() if r.slice_id in slice_ids]
            enforcement = sorted(self._enforcement.get(doc_id, {}).items(), key=lambda kv: kv[1])
            return DocumentData(
                kind=kind,
                rows=rows,
                enforcement=enforcement,
                assignments=dict(self._assignments.get(doc_id, {})),
                members=frozenset(self._members.get(doc_id, ())),
                content_ref=self._content.get(doc_id),
            )

    def scan_all(self) -> list[tuple[DocumentId, DocumentKind]]:
        with self._lock:
            self.scan_count += 1
            return sorted(self._docs.items())

    def scan_rows(self, doc_id: DocumentId) -> list[PropertyRow]:
        """Every stored row for one document, in a stable order. Audit use."""
        with self._lock:
            self.scan_count += 1
            rows = self._rows.get(doc_id, {}).values()
            return sorted(rows, key=lambda r: (r.slice_id, r.prop, sort_key(r.value), r.ordinal))

    def schema_defs(self) -> dict[str, tuple[Schema, int]]:
        with self._lock:
            return dict(self._schemas)

    def meta_view(self) -> MetaView:
        with self._lock:
            return MetaView(
                docs=dict(self._docs),
                schemas=dict(self._schemas),
                enforcement={d: dict(m) for d, m in self._enforcement.items() if m},
                assignments={d: dict(m) for d, m in self._assignments.items() if m},
                members={d: set(m) for d, m in self._members.items() if m},
                content=dict(self._content),
            )

    def _require(self, doc_id: DocumentId) -> DocumentKind:
        kind = self._docs.get(doc_id)
        if kind is None:
            raise UnknownDocument(f"no document {doc_id}")
        return kind

    # ---- content ----

    def content_write(self, doc_id: DocumentId, data: bytes) -> ContentRef:
        with self._lock:
            self._require(doc_id)
            ref = ContentRef(doc_id, len(data), tokenize(data))
            old_ref = self._content.get(doc_id)
            old_blob = self._blobs.get(doc_id)
            self._content[doc_id] = ref
            self._blobs[doc_id] = bytes(data)
            self._persist_blob(doc_id, bytes(data))
            try:
                self._persist()
            except BaseException:
                if old_ref is None:
                    self._content.pop(doc_id, None)
                    self._blobs.pop(doc_id, None)
                else:
                    self._content[doc_id] = old_ref
                    self._blobs[doc_id] = old_blob
                raise
            return ref

    def content_read(self, doc_id: DocumentId) -> bytes:
        with self._lock:
            self._require(doc_id)
            return self._blobs.get(doc_id, b"")

    # ---- deletion ----

    def delete_document(self, doc_id: DocumentId) -> None:
        """Remove rows, metadata, memberships in both directions, and content."""
        with self._lock:
            self._require(doc_id)
            self._docs.pop(doc_id)
            self._rows.pop(doc_id, None)
            self._enforcement.pop(doc_id, None)
            self._assignments.pop(doc_id, None)
            self._members.pop(doc_id, None)
            for members in self._members.values():
                members.discard(doc_id)
            self._content.pop(doc_id, None)
            self._blobs.pop(doc_id, None)
            self._persist()
            self._remove_blob_file(doc_id)

    # ---- persistence hooks (memory backend keeps state only in RAM) ----

    def _persist(self) -> None:
        if self.fail_next_persist:
            self.fail_next_persist = False
            raise StorageFailure("injected persist failure")

    def _persist_blob(self, doc_id: DocumentId, data: bytes) -> None:
        pass

    def _remove_blob_file(self, doc_id: DocumentId) -> None:
        pass

    # ---- checkpoint codec ----

    def _encode_checkpoint(self) -> bytes:
        lines = [MAGIC, "PROPS"]
        for doc_id in sorted(self._rows):
            rows = self._rows[doc_id].values()
            for row in sorted(rows, key=lambda r: (r.slice_id, r.prop, encode_value(r.value), r.ordinal)):
                lines.append(_fields(str(doc_id), str(row.slice_id), row.prop, encode_value(row.value), str(row.ordinal)))
        lines.append("META")
        for doc_id in sorted(self._docs):
            lines.append(_fields("DOC", str(doc_id), self._docs[doc_id].value))
        for name, (schema, slice_id) in sorted(self._schemas.items(), key=lambda kv: kv[1][1]):
            parts = ["SCHEMA", name, str(slice_id)]
            for prop in sorted(schema.constraints):
                c = schema.constraints[prop]
                parts.append(f"{prop}:{c.value_type.value}:{c.arity_text()}")
            lines.append(_fields(*parts))
        for doc_id in sorted(self._enforcement):
            entry = self._enforcement[doc_id]
            for name, seq in sorted(entry.items(), key=lambda kv: kv[1]):
                lines.append(_fields("ENFORCE", str(doc_id), str(seq), name))
        for doc_id in sorted(self._assignments):
            for prop in sorted(self._assignments[doc_id]):
                lines.append(_fields("ASSIGN", str(doc_id), prop, str(self._assignments[doc_id][prop])))
        for coll in sorted(self._members):
            for member in sorted(self._members[coll]):
                lines.append(_fields("MEMBER", str(coll), str(member)))
        lines.append("CONTENT")
        for doc_id in sorted(self._content):
            ref = self._content[doc_id]
            lines.append(_fields(str(doc_id), str(ref.length), " ".join(sorted(ref.tokens))))
        body = ("\n".join(lines) + "\n").encode("utf-8")
        return body + f"END {crc32c(body)}\n".encode("ascii")

    def _load_checkpoint(self, data: bytes) -> None:
        try:
            idx = data.rindex(b"\nEND ")
        except ValueError:
            raise CorruptStore("missing END trailer") from None
        body, trailer = data[: idx + 1], data[idx + 1 :]
        if not (trailer.startswith(b"END ") and trailer.endswith(b"\n")):
            raise CorruptStore("malformed END trailer")
        try:
            stated = int(trailer[4:-1])
        except ValueError:
            raise CorruptStore("malformed END trailer") from None
        if crc32c(body) != stated:
            raise CorruptStore("checksum mismatch")
        lines = body.decode("utf-8").split("\n")[:-1]
        if not lines or lines[0] != MAGIC:
            raise CorruptStore("bad magic")
        section = None
        try:
            for line in lines[1:]:
                if line in ("PROPS", "META", "CONTENT"):
                    section = line
                    continue
                fields = [unescape_field(f) for f in line.split("\t")]
                if section == "PROPS":
                    doc_id = DocumentId.parse(fields[0])
                    row = PropertyRow(doc_id, int(fields[1]), fields[2], decode_value(fields[3]), int(fields[4]))
                    self._rows.setdefault(doc_id, {})[row.key()[1:]] = row
                elif section == "META":
                    self._load_meta_record(fields)
                elif section == "CONTENT":
                    doc_id = DocumentId.parse(fields[0])
                    tokens = frozenset(fields[2].split(" ")) if fields[2] else frozenset()
                    self._content[doc_id] = ContentRef(doc_id, int(fields[1]), tokens)
                else:
                    raise CorruptStore(f"record outside any section: {line!r}")
        except (IndexError, ValueError) as exc:
            raise CorruptStore(f"malformed record: {exc}") from exc

    def _load_meta_record(self, fields: list[str]) -> None:
        kind = fields[0]
        if kind == "DOC":
            self._docs[DocumentId.parse(fields[1])] = DocumentKind(fields[2])
        elif kind == "SCHEMA":
            constraints = {}
            for part in fields[3:]:
                prop, type_tag, arity = part.rsplit(":", 2)
                constraints[prop] = Constraint.from_text(type_tag, arity)
            self._schemas[fields[1]] = (Schema(fields[1], constraints), int(fields[2]))
        elif kind == "ENFORCE":
            self._enforcement.setdefault(DocumentId.parse(fields[1]), {})[fields[3]] = int(fields[2])
        elif kind == "ASSIGN":
            self._assignments.setdefault(DocumentId.parse(fields[1]), {})[fields[2]] = int(fields[3])
        elif kind == "MEMBER":
            self._members.setdefault(DocumentId.parse(fields[1]), set()).add(DocumentId.parse(fields[2]))
        else:
            raise CorruptStore(f"unknown metadata record kind {kind!r}")

    # ---- checkpoint to / open from a store root directory ----

    def checkpoint(self, path) -> Path:
        """Write the full state to a store root; returns the checkpoint path."""
        with self._lock:
            root = Path(path)
            (root / CONTENT_DIR).mkdir(parents=True, exist_ok=True)
            for doc_id, blob in self._blobs.items():
                _atomic_write(root / CONTENT_DIR / str(doc_id), blob)
            target = root / CHECKPOINT_NAME
            _atomic_write(target, self._encode_checkpoint())
            return target

    @classmethod
    def open(cls, path) -> "MemoryBackend":
        root = Path(path)
        target = root / CHECKPOINT_NAME
        if not target.exists():
            raise StorageFailure(f"no store at {root}")
        backend = cls()
        backend._load_checkpoint(target.read_bytes())
        for doc_id in backend._content:
            blob_path = root / CONTENT_DIR / str(doc_id)
            try:
                backend._blobs[doc_id] = blob_path.read_bytes()
            except FileNotFoundError:
                raise StorageFailure(f"missing content file for {doc_id}") from None
        return backend


def _fields(*parts: str) -> str:
    return "\t".join(escape_field(p) for p in parts)


def _atomic_write(target: Path, data: bytes) -> None:
    tmp = target.with_name(target.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, target)


class DiskBackend(MemoryBackend):
    """On-disk backend: every committed batch rewrites the checkpoint, so a
    reopen after a crash sees exactly the committed batches."""

    def __init__(self, root: Path):
        super().__init__()
        self.root = Path(root)

    @classmethod
    def init(cls, path) -> "DiskBackend":
        root = Path(path)
        if (root / CHECKPOINT_NAME).exists():
            raise StorageFailure(f"store already initialized at {root}")
        (root / CONTENT_DIR).mkdir(parents=True, exist_ok=True)
        backend = cls(root)
        backend._persist()
        return backend

    @classmethod
    def open(cls, path) -> "DiskBackend":
        root = Path(path)
        target = root / CHECKPOINT_NAME
        if not target.exists():
            raise StorageFailure(f"no store at {root}")
        backend = cls(root)
        backend._load_checkpoint(target.read_bytes())
        for doc_id in backend._content:
            blob_path = root / CONTENT_DIR / str(doc_id)
            try:
                backend._blobs[doc_id] = blob_path.read_bytes()
            except FileNotFoundError:
                raise StorageFailure(f"missing content file for {doc_id}") from None
        return backend

    def _persist(self) -> None:
        super()._persist()  # honors injected failures
        _atomic_write(self.root / CHECKPOINT_NAME, self._encode_checkpoint())

    def _persist_blob(self, doc_id: DocumentId, data: bytes) -> None:
        _atomic_write(self.root / CONTENT_DIR / str(doc_id), data)

    def _remove_blob_file(self, doc_id: DocumentId) -> None:
        try:
            os.remove(self.root / CONTENT_DIR / str(doc_id))
        except FileNotFoundError:
            pass

    def checkpoint(self, path=None) -> Path:
        if path is None:
            with self._lock:
                target = self.root / CHECKPOINT_NAME
                _atomic_write(target, self._encode_checkpoint())
                return target
        return super().checkpoint(path)
