"""Document repository: cache, slice prefetching, writeback, and commits.

The repository keeps every document's metadata (kind, slice assignments,
enforcement, membership, content tokens) in memory from open, mirroring the
backend's metadata view. Property values live in per-document slice maps
that are materialized on demand: reading any property of a document fetches
the whole slice that property is assigned to, in one backend round trip, so
the other properties of the same schema arrive for free.

Writes go to the in-memory document and mark its slices dirty; a background
flusher (and explicit flush()) diffs dirty slices against their last
persisted image and ships one atomic batch per document. Schema definitions
and content writes go through to the backend immediately.

Lock order: document lock, then any of (metadata mirror lock, backend,
hub, cache lock, registry). Nothing called under those ever takes a
document lock, except eviction, which only try-acquires and skips.
"""

from __future__ import annotations

import random
import threading
import uuid
from collections import OrderedDict
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Union

from harland.coordination import CommitHub, Subscription, SubscriptionMode
from harland.errors import (
    NotConforming,
    SchemaViolation,
    StorageFailure,
    UnknownDocument,
    WrongKind,
)
from harland.model import (
    DocumentId,
    DocumentKind,
    DocumentSnapshot,
    Schema,
    Value,
    bag,
)
from harland.parsing import parse_query
from harland.query import QueryExpr, QueryPlan, execute, naive_eval, plan, validate_references
from harland.schemas import DEFAULT_SLICE, SchemaRegistry
from harland.store import (
    DiskBackend,
    DocumentRecord,
    Enforcement,
    Membership,
    MemoryBackend,
    PropertyRow,
    SchemaDef,
    SliceAssignment,
)


# ---- change descriptions ----

@dataclass(frozen=True)
class SetProperty:
    prop: str
    values: tuple[Value, ...]

    def __init__(self, prop: str, values: Iterable[Value]):
        object.__setattr__(self, "prop", prop)
        object.__setattr__(self, "values", bag(values))


@dataclass(frozen=True)
class AddValues:
    prop: str
    values: tuple[Value, ...]

    def __init__(self, prop: str, values: Iterable[Value]):
        object.__setattr__(self, "prop", prop)
        object.__setattr__(self, "values", bag(values))


@dataclass(frozen=True)
class RemoveValues:
    """Removes one bag occurrence per listed value; absent values are ignored."""

    prop: str
    values: tuple[Value, ...]

    def __init__(self, prop: str, values: Iterable[Value]):
        object.__setattr__(self, "prop", prop)
        object.__setattr__(self, "values", bag(values))


@dataclass(frozen=True)
class RemoveProperty:
    prop: str


Change = Union[SetProperty, AddValues, RemoveValues, RemoveProperty]


@dataclass
class CacheConfig:
    max_docs: int = 1024
    flush_interval: float = 0.5
    auto_flush: bool = True


# ---- id generation ----

class _IdGen:
    def __init__(self, seed: Optional[int]):
        self._lock = threading.Lock()
        self._seed = seed
        self._counter = 0
        self._rng = random.Random(seed) if seed is not None else None

    def prime(self, existing: Iterable[DocumentId]) -> None:
        """Seeded generation continues past ids minted by earlier runs."""
        if self._seed is None:
            return
        base = (self._seed & 0xFFFFFFFFFFFFFFFF) << 64
        tail = [d.value & 0xFFFFFFFFFFFFFFFF for d in existing if (d.value >> 64) == (base >> 64)]
        self._counter = max(tail, default=0)

    def next_id(self, in_use) -> DocumentId:
        with self._lock:
            while True:
                if self._seed is not None:
                    self._counter += 1
                    candidate = DocumentId(((self._seed & 0xFFFFFFFFFFFFFFFF) << 64) | self._counter)
                else:
                    candidate = DocumentId(uuid.uuid4().int)
                if not in_use(candidate):
                    return candidate


# ---- cached document state ----

class _IDoc:
    """In-memory image of one document. All fields are guarded by the
    document's lock except nothing: take the lock first."""

    __slots__ = (
        "doc_id",
        "kind",
        "bags",          # slice id -> {prop -> value bag}
        "clean_bags",    # last persisted image of each materialized slice
        "dirty_slices",
        "meta_dirty",
        "exists_in_store",
        "persisted_enforcement",   # schema name -> seq, as persisted
        "persisted_members",
        "persisted_assignments",   # props whose slice assignment is persisted
    )

    def __init__(self, doc_id: DocumentId, kind: DocumentKind, exists_in_store: bool):
        self.doc_id = doc_id
        self.kind = kind
        self.bags: dict[int, dict[str, tuple[Value, ...]]] = {}
        self.clean_bags: dict[int, dict[str, tuple[Value, ...]]] = {}
        self.dirty_slices: set[int] = set()
        self.meta_dirty = False
        self.exists_in_store = exists_in_store
        self.persisted_enforcement: dict[str, int] = {}
        self.persisted_members: set[DocumentId] = set()
        self.persisted_assignments: set[str] = set()

    def is_dirty(self) -> bool:
        return bool(self.dirty_slices) or self.meta_dirty


class Handle:
    """Caller's reference to one document. Stale after the document is
    deleted; every operation re-checks."""

    __slots__ = ("_repo", "doc_id", "_generation")

    def __init__(self, repo: "Repository", doc_id: DocumentId, generation: int):
        self._repo = repo
        self.doc_id = doc_id
        self._generation = generation

    def __repr__(self) -> str:
        return f"Handle({self.doc_id})"

    def __eq__(self, other) -> bool:
        return isinstance(other, Handle) and other.doc_id == self.doc_id and other._repo is self._repo

    def __hash__(self) -> int:
        return hash(self.doc_id)

    @property
    def kind(self) -> DocumentKind:
        return self._repo._kind_of(self)

    def values(self, prop: str) -> tuple[Value, ...]:
        return self._repo.values(self, prop)

    def snapshot(self) -> DocumentSnapshot:
        return self._repo.snapshot_of(self)

    def set_property(self, prop: str, values: Iterable[Value]) -> None:
        self._repo.mutate(self, SetProperty(prop, values))

    def add_values(self, prop: str, values: Iterable[Value]) -> None:
        self._repo.mutate(self, AddValues(prop, values))

    def remove_values(self, prop: str, values: Iterable[Value]) -> None:
        self._repo.mutate(self, RemoveValues(prop, values))

    def remove_property(self, prop: str) -> None:
        self._repo.mutate(self, RemoveProperty(prop))

    def enforce(self, schema_name: str) -> None:
        self._repo.enforce(self, schema_name)

    def unenforce(self, schema_name: str) -> None:
        self._repo.unenforce(self, schema_name)

    def enforced(self) -> tuple[str, ...]:
        return self._repo.enforced_names(self)

    def add_member(self, member: Union["Handle", DocumentId]) -> None:
        self._repo.add_member(self, _as_id(member))

    def remove_member(self, member: Union["Handle", DocumentId]) -> None:
        self._repo.remove_member(self, _as_id(member))

    def members(self) -> frozenset[DocumentId]:
        return self._repo.members_of_handle(self)

    def put_content(self, data: bytes) -> None:
        self._repo.put_content(self, data)

    def content(self) -> bytes:
        return self._repo.get_content(self)

    def delete(self) -> None:
        self._repo.delete_document(self)


def _as_id(ref: Union[Handle, DocumentId, str]) -> DocumentId:
    if isinstance(ref, Handle):
        return ref.doc_id
    if isinstance(ref, DocumentId):
        return ref
    return DocumentId.parse(ref)


class Cursor:
    """Query results. The match set is pinned when the query runs; iteration
    prefetches each document's relevant slices just before yielding it."""

    def __init__(self, repo: "Repository", compiled: QueryPlan, matches: list[tuple[DocumentId, int]]):
        self._repo = repo
        self._plan = compiled
        self._matches = matches

    def ids(self) -> list[DocumentId]:
        return [doc_id for doc_id, _ in self._matches]

    def __len__(self) -> int:
        return len(self._matches)

    def __iter__(self):
        for doc_id, generation in self._matches:
            try:
                self._repo._prefetch(doc_id, self._plan)
            except UnknownDocument:
                pass  # deleted since the query ran; the handle stays stale
            yield Handle(self._repo, doc_id, generation)


class Repository:
    """The embedded store: documents in an LRU cache over a slice-addressed
    backend, with mixin-style schema enforcement and commit events."""

    def __init__(self, backend: MemoryBackend, config: Optional[CacheConfig] = None, id_seed: Optional[int] = None):
        self.backend = backend
        self.config = config or CacheConfig()
        self.registry = SchemaRegistry()
        self._ids = _IdGen(id_seed)

        self._meta_lock = threading.Lock()
        self._kinds: dict[DocumentId, DocumentKind] = {}
        self._assignments: dict[DocumentId, dict[str, int]] = {}
        self._members: dict[DocumentId, set[DocumentId]] = {}
        self._content_tokens: dict[DocumentId, frozenset[str]] = {}
        self._generations: dict[DocumentId, int] = {}
        self._in_store: set[DocumentId] = set()

        self._cache_lock = threading.Lock()
        self._cache: "OrderedDict[DocumentId, _IDoc]" = OrderedDict()
        self._locks: dict[DocumentId, threading.RLock] = {}
        self._locks_guard = threading.Lock()

        self._stats_lock = threading.Lock()
        self._hits = 0
        self._misses = 0
        self._evictions = 0
        self._flushes = 0

        self._load_metadata()
        self.hub = CommitHub(self)

        self._closed = False
        self._flusher_stop = threading.Event()
        self._flusher: Optional[threading.Thread] = None
        if self.config.auto_flush:
            self._flusher = threading.Thread(target=self._flush_loop, name="harland-flush", daemon=True)
            self._flusher.start()

    # ---- construction ----

    @classmethod
    def in_memory(cls, config: Optional[CacheConfig] = None, id_seed: Optional[int] = None) -> "Repository":
        return cls(MemoryBackend(), config=config, id_seed=id_seed)

    @classmethod
    def init(cls, path, config: Optional[CacheConfig] = None, id_seed: Optional[int] = None) -> "Repository":
        return cls(DiskBackend.init(path), config=config, id_seed=id_seed)

    @classmethod
    def open(cls, path, config: Optional[CacheConfig] = None, id_seed: Optional[int] = None) -> "Repository":
        return cls(DiskBackend.open(path), config=config, id_seed=id_seed)

    def __enter__(self) -> "Repository":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        self._flusher_stop.set()
        if self._flusher is not None:
            self._flusher.join(timeout=5)
        self.flush()
        self.hub.stop()

    def _load_metadata(self) -> None:
        view = self.backend.meta_view()
        for schema, slice_id in sorted(view.schemas.values(), key=lambda pair: pair[1]):
            self.registry.define(schema, slice_id=slice_id)
        for doc_id, kind in view.docs.items():
            self._kinds[doc_id] = kind
            self._assignments[doc_id] = {}
            self._generations[doc_id] = 1
            self._in_store.add(doc_id)
            if kind is DocumentKind.COLLECTION:
                self._members[doc_id] = set()
        for doc_id, assigned in view.assignments.items():
            self._assignments[doc_id].update(assigned)
        for collection_id, members in view.members.items():
            self._members[collection_id].update(members)
        for doc_id, entries in view.enforcement.items():
            for name, seq in sorted(entries.items(), key=lambda kv: kv[1]):
                self.registry.record_enforce(doc_id, name, seq=seq)
        for doc_id, ref in view.content.items():
            self._content_tokens[doc_id] = frozenset(ref.tokens)
        self._ids.prime(self._kinds.keys())

    # ---- locks and cache ----

    def _lock_for(self, doc_id: DocumentId) -> threading.RLock:
        with self._locks_guard:
            lock = self._locks.get(doc_id)
            if lock is None:
                lock = self._locks[doc_id] = threading.RLock()
            return lock

    def _resolve(self, handle: Handle) -> DocumentId:
        with self._meta_lock:
            current = self._generations.get(handle.doc_id)
        if current is None or current != handle._generation:
            raise UnknownDocument(f"document {handle.doc_id} does not exist")
        return handle.doc_id

    def _idoc(self, doc_id: DocumentId) -> _IDoc:
        """Cache lookup; caller must hold the document lock."""
        with self._cache_lock:
            idoc = self._cache.get(doc_id)
            if idoc is not None:
                self._cache.move_to_end(doc_id)
                with self._stats_lock:
                    self._hits += 1
        if idoc is not None:
            self._evict_if_needed(exclude=doc_id)
            return idoc
        with self._stats_lock:
            self._misses += 1
        with self._meta_lock:
            kind = self._kinds.get(doc_id)
            if kind is None:
                raise UnknownDocument(f"document {doc_id} does not exist")
            in_store = doc_id in self._in_store
            assignments = set(self._assignments.get(doc_id, {}))
            members = set(self._members.get(doc_id, ()))
        idoc = _IDoc(doc_id, kind, exists_in_store=in_store)
        if in_store:
            # clean at eviction implies flushed, so persisted state == current
            idoc.persisted_assignments = assignments
            idoc.persisted_members = members
            idoc.persisted_enforcement = dict(self.registry.enforcement_entries(doc_id))
        with self._cache_lock:
            self._cache[doc_id] = idoc
            self._cache.move_to_end(doc_id)
        self._evict_if_needed(exclude=doc_id)
        return idoc

    def _evict_if_needed(self, exclude: Optional[DocumentId] = None) -> None:
        with self._cache_lock:
            if len(self._cache) <= self.config.max_docs:
                return
            for doc_id in list(self._cache):
                if len(self._cache) <= self.config.max_docs:
                    break
                if doc_id == exclude:
                    continue
                lock = self._lock_for(doc_id)
                if not lock.acquire(blocking=False):
                    continue
                try:
                    idoc = self._cache.get(doc_id)
                    if idoc is not None and not idoc.is_dirty() and idoc.exists_in_store:
                        del self._cache[doc_id]
                        with self._stats_lock:
                            self._evictions += 1
                finally:
                    lock.release()

    def _materialize(self, idoc: _IDoc, slices: set[int]) -> None:
        """Fetch absent slices in one backend round trip. Document lock held."""
        missing = {s for s in slices if s not in idoc.bags}
        if not missing:
            return
        if not idoc.exists_in_store:
            for s in missing:
                idoc.bags[s] = {}
                idoc.clean_bags[s] = {}
            return
        data = self.backend.fetch_slices(idoc.doc_id, missing)
        grouped: dict[int, dict[str, list[Value]]] = {s: {} for s in missing}
        for row in data.rows:
            grouped[row.slice_id].setdefault(row.prop, []).append(row.value)
        for s, props in grouped.items():
            image = {p: bag(vals) for p, vals in props.items()}
            idoc.bags[s] = dict(image)
            idoc.clean_bags[s] = dict(image)

    def _all_slices(self, doc_id: DocumentId) -> set[int]:
        with self._meta_lock:
            return set(self._assignments.get(doc_id, {}).values())

    def _snapshot_locked(self, doc_id: DocumentId, idoc: _IDoc) -> DocumentSnapshot:
        self._materialize(idoc, self._all_slices(doc_id))
        props: dict[str, tuple[Value, ...]] = {}
        for slice_bags in idoc.bags.values():
            for prop, values in slice_bags.items():
                if values:
                    props[prop] = values
        with self._meta_lock:
            members = frozenset(self._members.get(doc_id, ())) if idoc.kind is DocumentKind.COLLECTION else frozenset()
        return DocumentSnapshot(
            doc_id=doc_id,
            kind=idoc.kind,
            properties=props,
            enforced=frozenset(self.registry.enforced_names(doc_id)),
            members=members,
        )

    # ---- document lifecycle ----

    def create_document(self, kind: DocumentKind = DocumentKind.PLAIN) -> Handle:
        self._check_open()
        def in_use(candidate: DocumentId) -> bool:
            with self._meta_lock:
                return candidate in self._kinds
        doc_id = self._ids.next_id(in_use)
        with self._lock_for(doc_id):
            with self._meta_lock:
                self._kinds[doc_id] = kind
                self._assignments[doc_id] = {}
                self._generations[doc_id] = 1
                if kind is DocumentKind.COLLECTION:
                    self._members[doc_id] = set()
            idoc = _IDoc(doc_id, kind, exists_in_store=False)
            idoc.meta_dirty = True
            with self._cache_lock:
                self._cache[doc_id] = idoc
            self._evict_if_needed(exclude=doc_id)
            after = DocumentSnapshot(
                doc_id=doc_id, kind=kind, properties={},
                enforced=frozenset(), members=frozenset(),
            )
            self.hub.publish(doc_id=doc_id, before=None, after=after)
        return Handle(self, doc_id, 1)

    def get_document(self, ref: Union[DocumentId, str, Handle]) -> Handle:
        self._check_open()
        doc_id = _as_id(ref)
        with self._meta_lock:
            generation = self._generations.get(doc_id)
        if generation is None:
            raise UnknownDocument(f"document {doc_id} does not exist")
        return Handle(self, doc_id, generation)

    def document_ids(self) -> list[DocumentId]:
        with self._meta_lock:
            return sorted(self._kinds)

    def document_count(self) -> int:
        with self._meta_lock:
            return len(self._kinds)

    def delete_document(self, handle: Handle) -> None:
        self._check_open()
        doc_id = self._resolve(handle)
        with self._lock_for(doc_id):
            doc_id = self._resolve(handle)  # recheck under the lock
            idoc = self._idoc(doc_id)
            before = self._snapshot_locked(doc_id, idoc)
            if idoc.exists_in_store:
                self.backend.delete_document(doc_id)
            with self._cache_lock:
                self._cache.pop(doc_id, None)
            with self._meta_lock:
                self._kinds.pop(doc_id, None)
                self._assignments.pop(doc_id, None)
                self._members.pop(doc_id, None)
                self._content_tokens.pop(doc_id, None)
                self._generations.pop(doc_id, None)
                self._in_store.discard(doc_id)
                holders = [c for c, members in self._members.items() if doc_id in members]
                for c in holders:
                    self._members[c].discard(doc_id)
            self.registry.drop_document(doc_id)
            # re-evaluate the deleted collection's members: their membership
            # test flips when the collection disappears
            self.hub.publish(
                doc_id=doc_id,
                before=before,
                after=None,
                changed_props=frozenset(before.properties),
                schemas_removed=frozenset(before.enforced),
                members_removed=frozenset(before.members),
            )

    # ---- slice assignment ----

    def _assign_slice(self, doc_id: DocumentId, prop: str) -> int:
        """First write of a property picks its slice, permanently."""
        for name in self.registry.enforced_names(doc_id):
            if prop in self.registry.get(name).constraints:
                return self.registry.slice_of_schema(name)
        containing = self.registry.schemas_containing(prop)
        if containing:
            return self.registry.slice_of_schema(containing[0])
        return DEFAULT_SLICE

    # ---- mutation ----

    def mutate(self, handle: Handle, change: Change) -> None:
        self._check_open()
        doc_id = self._resolve(handle)
        with self._lock_for(doc_id):
            doc_id = self._resolve(handle)
            idoc = self._idoc(doc_id)
            before = self._snapshot_locked(doc_id, idoc)
            prop = change.prop
            old = before.values_of(prop)
            new = self._apply_change(old, change)
            if new == old:
                return
            proposed = dict(before.properties)
            if new:
                proposed[prop] = new
            else:
                proposed.pop(prop, None)
            after = DocumentSnapshot(
                doc_id=doc_id,
                kind=before.kind,
                properties=proposed,
                enforced=before.enforced,
                members=before.members,
            )
            violations = self.registry.validate_mutation(before, after)
            if violations:
                raise SchemaViolation(violations)

            with self._meta_lock:
                slice_id = self._assignments[doc_id].get(prop)
                if slice_id is None:
                    slice_id = self._assign_slice(doc_id, prop)
                    self._assignments[doc_id][prop] = slice_id
            self._materialize(idoc, {slice_id})
            slice_bags = idoc.bags.setdefault(slice_id, {})
            if new:
                slice_bags[prop] = new
            else:
                slice_bags.pop(prop, None)
            idoc.dirty_slices.add(slice_id)
            self.hub.publish(doc_id=doc_id, before=before, after=after, changed_props=frozenset({prop}))

    @staticmethod
    def _apply_change(old: tuple[Value, ...], change: Change) -> tuple[Value, ...]:
        if isinstance(change, SetProperty):
            return change.values
        if isinstance(change, AddValues):
            return bag(list(old) + list(change.values))
        if isinstance(change, RemoveValues):
            remaining = list(old)
            for v in change.values:
                if v in remaining:
                    remaining.remove(v)
            return bag(remaining)
        if isinstance(change, RemoveProperty):
            return ()
        raise TypeError(f"unsupported change: {change!r}")

    # ---- enforcement ----

    def enforce(self, handle: Handle, schema_name: str) -> None:
        self._check_open()
        doc_id = self._resolve(handle)
        schema = self.registry.get(schema_name)  # raises UnknownSchema
        with self._lock_for(doc_id):
            doc_id = self._resolve(handle)
            if self.registry.is_enforced(doc_id, schema_name):
                return
            idoc = self._idoc(doc_id)
            before = self._snapshot_locked(doc_id, idoc)
            violations = self.registry.violations(before, schema.name)
            if violations:
                raise NotConforming(violations)
            self.registry.record_enforce(doc_id, schema_name)
            idoc.meta_dirty = True
            after = DocumentSnapshot(
                doc_id=doc_id,
                kind=before.kind,
                properties=before.properties,
                enforced=before.enforced | {schema_name},
                members=before.members,
            )
            self.hub.publish(doc_id=doc_id, before=before, after=after, schemas_added=frozenset({schema_name}))

    def unenforce(self, handle: Handle, schema_name: str) -> None:
        """Stops enforcement; property values are retained untouched."""
        self._check_open()
        doc_id = self._resolve(handle)
        self.registry.get(schema_name)
        with self._lock_for(doc_id):
            doc_id = self._resolve(handle)
            if not self.registry.is_enforced(doc_id, schema_name):
                return
            idoc = self._idoc(doc_id)
            before = self._snapshot_locked(doc_id, idoc)
            self.registry.record_unenforce(doc_id, schema_name)
            idoc.meta_dirty = True
            after = DocumentSnapshot(
                doc_id=doc_id,
                kind=before.kind,
                properties=before.properties,
                enforced=before.enforced - {schema_name},
                members=before.members,
            )
            self.hub.publish(doc_id=doc_id, before=before, after=after, schemas_removed=frozenset({schema_name}))

    def enforced_names(self, handle: Handle) -> tuple[str, ...]:
        doc_id = self._resolve(handle)
        return tuple(self.registry.enforced_names(doc_id))

    # ---- membership ----

    def add_member(self, handle: Handle, member_id: DocumentId) -> None:
        self._check_open()
        doc_id = self._resolve(handle)
        with self._lock_for(doc_id):
            doc_id = self._resolve(handle)
            idoc = self._idoc(doc_id)
            if idoc.kind is not DocumentKind.COLLECTION:
                raise WrongKind(f"document {doc_id} is not a collection")
            with self._meta_lock:
                if member_id not in self._kinds:
                    raise UnknownDocument(f"member {member_id} does not exist")
                if member_id in self._members[doc_id]:
                    return
            before = self._snapshot_locked(doc_id, idoc)
            with self._meta_lock:
                self._members[doc_id].add(member_id)
            idoc.meta_dirty = True
            after = DocumentSnapshot(
                doc_id=doc_id,
                kind=idoc.kind,
                properties=before.properties,
                enforced=before.enforced,
                members=before.members | {member_id},
            )
            self.hub.publish(doc_id=doc_id, before=before, after=after, members_added=frozenset({member_id}))

    def remove_member(self, handle: Handle, member_id: DocumentId) -> None:
        self._check_open()
        doc_id = self._resolve(handle)
        with self._lock_for(doc_id):
            doc_id = self._resolve(handle)
            idoc = self._idoc(doc_id)
            if idoc.kind is not DocumentKind.COLLECTION:
                raise WrongKind(f"document {doc_id} is not a collection")
            with self._meta_lock:
                if member_id not in self._members.get(doc_id, ()):
                    return
            before = self._snapshot_locked(doc_id, idoc)
            with self._meta_lock:
                self._members[doc_id].discard(member_id)
            idoc.meta_dirty = True
            after = DocumentSnapshot(
                doc_id=doc_id,
                kind=idoc.kind,
                properties=before.properties,
                enforced=before.enforced,
                members=before.members - {member_id},
            )
            self.hub.publish(doc_id=doc_id, before=before, after=after, members_removed=frozenset({member_id}))

    def members_of_handle(self, handle: Handle) -> frozenset[DocumentId]:
        doc_id = self._resolve(handle)
        with self._meta_lock:
            if self._kinds.get(doc_id) is not DocumentKind.COLLECTION:
                raise WrongKind(f"document {doc_id} is not a collection")
            return frozenset(self._members.get(doc_id, ()))

    # ---- content ----

    def put_content(self, handle: Handle, data: bytes) -> None:
        self._check_open()
        if not isinstance(data, bytes):
            raise TypeError("content must be bytes")
        doc_id = self._resolve(handle)
        with self._lock_for(doc_id):
            doc_id = self._resolve(handle)
            idoc = self._idoc(doc_id)
            if idoc.kind is not DocumentKind.CONTENT:
                raise WrongKind(f"document {doc_id} is not a content document")
            self._flush_doc_locked(doc_id, idoc)  # the blob needs its document record first
            with self._meta_lock:
                tokens_before = self._content_tokens.get(doc_id, frozenset())
            snap = self._snapshot_locked(doc_id, idoc)
            ref = self.backend.content_write(doc_id, data)
            tokens_after = frozenset(ref.tokens)
            with self._meta_lock:
                self._content_tokens[doc_id] = tokens_after
            self.hub.publish(
                doc_id=doc_id,
                before=snap,
                after=snap,
                tokens_before=tokens_before,
                tokens_after=tokens_after,
            )

    def get_content(self, handle: Handle) -> bytes:
        doc_id = self._resolve(handle)
        with self._lock_for(doc_id):
            idoc = self._idoc(doc_id)
            if idoc.kind is not DocumentKind.CONTENT:
                raise WrongKind(f"document {doc_id} is not a content document")
            if not idoc.exists_in_store:
                return b""
            return self.backend.content_read(doc_id)

    # ---- schemas ----

    def define_schema(self, schema: Schema) -> int:
        """Schema definitions are write-through: durable before returning."""
        self._check_open()
        slice_id = self.registry.define(schema)
        try:
            self.backend.put_rows(meta=(SchemaDef(schema, slice_id),))
        except StorageFailure:
            self.registry.undefine(schema.name)
            raise
        return slice_id

    # ---- reads ----

    def values(self, handle: Handle, prop: str) -> tuple[Value, ...]:
        doc_id = self._resolve(handle)
        with self._lock_for(doc_id):
            doc_id = self._resolve(handle)
            with self._meta_lock:
                slice_id = self._assignments.get(doc_id, {}).get(prop)
            if slice_id is None:
                return ()
            idoc = self._idoc(doc_id)
            self._materialize(idoc, {slice_id})
            return idoc.bags.get(slice_id, {}).get(prop, ())

    def snapshot_of(self, handle: Handle) -> DocumentSnapshot:
        doc_id = self._resolve(handle)
        with self._lock_for(doc_id):
            doc_id = self._resolve(handle)
            return self._snapshot_locked(doc_id, self._idoc(doc_id))

    def _kind_of(self, handle: Handle) -> DocumentKind:
        doc_id = self._resolve(handle)
        with self._meta_lock:
            kind = self._kinds.get(doc_id)
        if kind is None:
            raise UnknownDocument(f"document {doc_id} does not exist")
        return kind

    # ---- query view protocol ----

    def schema_exists(self, name: str) -> bool:
        return self.registry.has(name)

    def document_kind(self, doc_id: DocumentId) -> Optional[DocumentKind]:
        with self._meta_lock:
            return self._kinds.get(doc_id)

    def enforced_of(self, doc_id: DocumentId) -> frozenset[str]:
        return frozenset(self.registry.enforced_names(doc_id))

    def members_of(self, collection_id: DocumentId) -> frozenset[DocumentId]:
        with self._meta_lock:
            return frozenset(self._members.get(collection_id, ()))

    def content_tokens(self, doc_id: DocumentId) -> frozenset[str]:
        with self._meta_lock:
            return self._content_tokens.get(doc_id, frozenset())

    def bags_of(self, doc_id: DocumentId, props: Sequence[str]) -> dict[str, tuple[Value, ...]]:
        with self._lock_for(doc_id):
            with self._meta_lock:
                if doc_id not in self._kinds:
                    raise UnknownDocument(f"document {doc_id} does not exist")
                assigned = dict(self._assignments.get(doc_id, {}))
                slices = {assigned[p] for p in props if p in assigned}
            if not slices:
                return {}
            idoc = self._idoc(doc_id)
            self._materialize(idoc, slices)
            out = {}
            for p in props:
                s = assigned.get(p)
                if s is None:
                    continue
                values = idoc.bags.get(s, {}).get(p, ())
                if values:
                    out[p] = values
            return out

    def snapshot(self, doc_id: DocumentId) -> DocumentSnapshot:
        with self._lock_for(doc_id):
            return self._snapshot_locked(doc_id, self._idoc(doc_id))

    # ---- queries ----

    def _as_expr(self, query: Union[str, QueryExpr]) -> QueryExpr:
        return parse_query(query) if isinstance(query, str) else query

    def query(self, query: Union[str, QueryExpr]) -> Cursor:
        self._check_open()
        expr = self._as_expr(query)
        validate_references(expr, self)
        compiled = plan(expr, self.registry)
        matched = execute(compiled, self)
        with self._meta_lock:
            pinned = [(d, self._generations.get(d, 0)) for d in matched]
        return Cursor(self, compiled, pinned)

    def match_now(self, query: Union[str, QueryExpr]) -> set[DocumentId]:
        """Reference evaluation: full scan, no planner."""
        expr = self._as_expr(query)
        validate_references(expr, self)
        return naive_eval(expr, self)

    def _prefetch(self, doc_id: DocumentId, compiled: QueryPlan) -> None:
        slices: set[int] = set()
        for name in compiled.prefetch_schemas:
            if self.registry.has(name):
                slices.add(self.registry.slice_of_schema(name))
        with self._meta_lock:
            assigned = self._assignments.get(doc_id)
            if assigned is None:
                raise UnknownDocument(f"document {doc_id} does not exist")
            for p in compiled.props:
                if p in assigned:
                    slices.add(assigned[p])
        if not slices:
            return
        with self._lock_for(doc_id):
            with self._meta_lock:
                if doc_id not in self._kinds:
                    raise UnknownDocument(f"document {doc_id} does not exist")
            self._materialize(self._idoc(doc_id), slices)

    def subscribe(self, query: Union[str, QueryExpr], mode: SubscriptionMode = SubscriptionMode.TRANSITION) -> Subscription:
        self._check_open()
        expr = self._as_expr(query)
        validate_references(expr, self)
        compiled = plan(expr, self.registry)
        return self.hub.subscribe(expr, mode, compiled)

    # ---- writeback ----

    def flush(self) -> int:
        """Writes every dirty document out; returns how many were flushed.

        Two passes: documents without a store record first, so membership
        records written by the second pass always have their member's
        document record in place.
        """
        flushed = 0
        for _ in range(2):
            with self._cache_lock:
                doc_ids = list(self._cache)
            with self._meta_lock:
                in_store = set(self._in_store)
            ordered = [d for d in doc_ids if d not in in_store] + [d for d in doc_ids if d in in_store]
            dirty_left = False
            for doc_id in ordered:
                with self._lock_for(doc_id):
                    with self._cache_lock:
                        idoc = self._cache.get(doc_id)
                    if idoc is None:
                        continue
                    if self._flush_doc_locked(doc_id, idoc):
                        flushed += 1
                    dirty_left = dirty_left or idoc.is_dirty()
            if not dirty_left:
                break
        self._evict_if_needed()
        return flushed

    def _flush_doc_locked(self, doc_id: DocumentId, idoc: _IDoc) -> bool:
        if not idoc.is_dirty():
            return False
        rows: list[PropertyRow] = []
        deletes: list[tuple] = []
        for slice_id in sorted(idoc.dirty_slices):
            new_rows = _bag_rows(doc_id, slice_id, idoc.bags.get(slice_id, {}))
            old_rows = _bag_rows(doc_id, slice_id, idoc.clean_bags.get(slice_id, {}))
            new_keys = {r.key(): r for r in new_rows}
            old_keys = set(r.key() for r in old_rows)
            deletes.extend(k for k in old_keys if k not in new_keys)
            rows.extend(r for k, r in new_keys.items() if k not in old_keys)

        meta: list = []
        meta_deletes: list = []
        if not idoc.exists_in_store:
            meta.append(DocumentRecord(doc_id, idoc.kind))
        with self._meta_lock:
            assignments = dict(self._assignments.get(doc_id, {}))
            live = set(self._kinds)
            in_store = set(self._in_store)
            current_members = set(self._members.get(doc_id, ()))
        for prop, slice_id in sorted(assignments.items()):
            if prop not in idoc.persisted_assignments:
                meta.append(SliceAssignment(doc_id, prop, slice_id))
        current_enf = self.registry.enforcement_entries(doc_id)
        for name, seq in sorted(current_enf.items(), key=lambda kv: kv[1]):
            if idoc.persisted_enforcement.get(name) != seq:
                meta.append(Enforcement(doc_id, name, seq))
        for name in sorted(idoc.persisted_enforcement):
            if name not in current_enf:
                meta_deletes.append(Enforcement(doc_id, name, 0))
        # cascade deletes already removed dead members' records from the store
        persisted_live = idoc.persisted_members & live
        added_members: set[DocumentId] = set()
        deferred_members = False
        for member in sorted(current_members - persisted_live):
            if member in in_store or member == doc_id:
                meta.append(Membership(doc_id, member))
                added_members.add(member)
            else:
                # the member has no store record yet; a later pass links it
                deferred_members = True
        for member in sorted(persisted_live - current_members):
            meta_deletes.append(Membership(doc_id, member))

        if not rows and not deletes and not meta and not meta_deletes:
            idoc.dirty_slices.clear()
            idoc.meta_dirty = deferred_members
            return False
        self.backend.put_rows(rows=rows, deletes=deletes, meta=meta, meta_deletes=meta_deletes)
        for slice_id in idoc.dirty_slices:
            idoc.clean_bags[slice_id] = dict(idoc.bags.get(slice_id, {}))
        idoc.dirty_slices.clear()
        idoc.meta_dirty = deferred_members
        idoc.exists_in_store = True
        idoc.persisted_assignments = set(assignments)
        idoc.persisted_enforcement = current_enf
        idoc.persisted_members = (persisted_live & current_members) | added_members
        with self._meta_lock:
            self._in_store.add(doc_id)
        with self._stats_lock:
            self._flushes += 1
        return True

    def _flush_loop(self) -> None:
        interval = max(self.config.flush_interval / 2, 0.01)
        while not self._flusher_stop.wait(interval):
            try:
                self.flush()
            except StorageFailure:
                continue  # keep state dirty in memory; the next pass retries

    # ---- stats ----

    def stats(self) -> dict[str, int]:
        with self._stats_lock:
            return {
                "documents": self.document_count(),
                "cached_documents": len(self._cache),
                "backend_fetches": self.backend.fetch_count,
                "cache_hits": self._hits,
                "cache_misses": self._misses,
                "evictions": self._evictions,
                "flushes": self._flushes,
            }

    def _check_open(self) -> None:
        if self._closed:
            raise StorageFailure("repository is closed")


def _bag_rows(doc_id: DocumentId, slice_id: int, bags: dict[str, tuple[Value, ...]]) -> list[PropertyRow]:
    """One vertical row per bag occurrence; equal values get serial ordinals."""
    rows: list[PropertyRow] = []
    for prop, values in bags.items():
        seen: dict = {}
        for value in values:
            ordinal = seen.get(value, 0)
            seen[value] = ordinal + 1
            rows.append(PropertyRow(doc_id, slice_id, prop, value, ordinal))
    return rows
