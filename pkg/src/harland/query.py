"""Query algebra: expressions, rewrite rules, shared-leaf plans, execution.

Two evaluation paths exist on purpose. naive_eval is the reference: a full
scan over complete snapshots with inline predicate logic. plan/execute is
the production path: rewritten expression, leaf sharing, short-circuit
evaluation, and per-document slice loading that only touches properties the
query references. Tests hold the two equal on randomized inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Optional

from harland.errors import UnknownCollection, UnknownSchema
from harland.model import (
    ORDERED_TYPES,
    DocumentId,
    DocumentKind,
    DocumentSnapshot,
    Value,
    compare_values,
)


class CmpOp(Enum):
    EQ = "="
    NE = "!="
    LT = "<"
    LE = "<="
    GT = ">"
    GE = ">="


class Card(Enum):
    SINGLE = "single"
    MULTIPLE = "multiple"


# ---- expression AST ----

class QueryExpr:
    """Base class; concrete expressions are frozen dataclasses below."""

    __slots__ = ()


@dataclass(frozen=True)
class And(QueryExpr):
    children: tuple

    def __post_init__(self):
        if not self.children:
            raise ValueError("And needs at least one child")


@dataclass(frozen=True)
class Or(QueryExpr):
    children: tuple

    def __post_init__(self):
        if not self.children:
            raise ValueError("Or needs at least one child")


@dataclass(frozen=True)
class Not(QueryExpr):
    child: QueryExpr


@dataclass(frozen=True)
class HasSchema(QueryExpr):
    name: str


@dataclass(frozen=True)
class MemberOf(QueryExpr):
    collection: DocumentId


@dataclass(frozen=True)
class ContentContains(QueryExpr):
    token: str


@dataclass(frozen=True)
class Exists(QueryExpr):
    prop: str


@dataclass(frozen=True)
class Cardinality(QueryExpr):
    prop: str
    card: Card


@dataclass(frozen=True)
class Cmp(QueryExpr):
    prop: str
    op: CmpOp
    literal: Value


_LEAF_TYPES = (HasSchema, MemberOf, ContentContains, Exists, Cardinality, Cmp)


def referenced_props(expr: QueryExpr) -> frozenset[str]:
    out: set[str] = set()

    def walk(e):
        if isinstance(e, (Exists, Cardinality, Cmp)):
            out.add(e.prop)
        elif isinstance(e, (And, Or)):
            for c in e.children:
                walk(c)
        elif isinstance(e, Not):
            walk(e.child)

    walk(expr)
    return frozenset(out)


def referenced_schemas(expr: QueryExpr) -> frozenset[str]:
    out: set[str] = set()

    def walk(e):
        if isinstance(e, HasSchema):
            out.add(e.name)
        elif isinstance(e, (And, Or)):
            for c in e.children:
                walk(c)
        elif isinstance(e, Not):
            walk(e.child)

    walk(expr)
    return frozenset(out)


def referenced_collections(expr: QueryExpr) -> frozenset[DocumentId]:
    out: set[DocumentId] = set()

    def walk(e):
        if isinstance(e, MemberOf):
            out.add(e.collection)
        elif isinstance(e, (And, Or)):
            for c in e.children:
                walk(c)
        elif isinstance(e, Not):
            walk(e.child)

    walk(expr)
    return frozenset(out)


# ---- the reference evaluator ----

def naive_eval(expr: QueryExpr, view) -> set[DocumentId]:
    """Full-scan reference evaluation over complete committed snapshots.

    view supplies document_ids(), snapshot(id), content_tokens(id),
    schema_exists(name), and document_kind(id). Kept deliberately separate
    from the planner path: this function is the meaning of a query.
    """
    validate_references(expr, view)
    snapshots: dict[DocumentId, DocumentSnapshot] = {}

    def snap(doc_id: DocumentId) -> Optional[DocumentSnapshot]:
        if doc_id not in snapshots:
            snapshots[doc_id] = view.snapshot(doc_id)
        return snapshots[doc_id]

    def matches(e: QueryExpr, s: DocumentSnapshot) -> bool:
        if isinstance(e, And):
            return all(matches(c, s) for c in e.children)
        if isinstance(e, Or):
            return any(matches(c, s) for c in e.children)
        if isinstance(e, Not):
            return not matches(e.child, s)
        if isinstance(e, HasSchema):
            return e.name in s.enforced
        if isinstance(e, MemberOf):
            return s.doc_id in snap(e.collection).members
        if isinstance(e, ContentContains):
            return e.token.casefold() in view.content_tokens(s.doc_id)
        if isinstance(e, Exists):
            return len(s.values_of(e.prop)) > 0
        if isinstance(e, Cardinality):
            n = len(s.values_of(e.prop))
            return n == 1 if e.card is Card.SINGLE else n >= 2
        if isinstance(e, Cmp):
            for v in s.values_of(e.prop):
                if e.op is CmpOp.EQ:
                    if v == e.literal:
                        return True
                elif e.op is CmpOp.NE:
                    if v.vtype is e.literal.vtype and v != e.literal:
                        return True
                else:
                    if v.vtype is not e.literal.vtype or v.vtype not in ORDERED_TYPES:
                        continue
                    c = compare_values(v, e.literal)
                    if c is None:
                        continue
                    if (
                        (e.op is CmpOp.LT and c < 0)
                        or (e.op is CmpOp.LE and c <= 0)
                        or (e.op is CmpOp.GT and c > 0)
                        or (e.op is CmpOp.GE and c >= 0)
                    ):
                        return True
            return False
        raise TypeError(f"unknown expression {e!r}")

    result = set()
    for doc_id in view.document_ids():
        if matches(expr, snap(doc_id)):
            result.add(doc_id)
    return result


def validate_references(expr: QueryExpr, view) -> None:
    """Unknown schema or non-collection membership target is an error up front."""
    for name in referenced_schemas(expr):
        if not view.schema_exists(name):
            raise UnknownSchema(f"query references undefined schema {name!r}")
    for coll in referenced_collections(expr):
        if view.document_kind(coll) is not DocumentKind.COLLECTION:
            raise UnknownCollection(f"query references {coll} which is not a collection")


# ---- rewrite ----

def rewrite(expr: QueryExpr) -> QueryExpr:
    """Normalize: drop double negation, push Not to the leaves (De Morgan),
    flatten nested And/Or, drop duplicate children."""
    return _push(expr, False)


def _push(e: QueryExpr, negated: bool) -> QueryExpr:
    if isinstance(e, Not):
        return _push(e.child, not negated)
    if isinstance(e, (And, Or)):
        flip = negated
        make_and = isinstance(e, And) != flip
        children: list[QueryExpr] = []
        seen = set()
        for child in e.children:
            sub = _push(child, negated)
            flat = sub.children if isinstance(sub, And if make_and else Or) else (sub,)
            for f in flat:
                if f not in seen:
                    seen.add(f)
                    children.append(f)
        if len(children) == 1:
            return children[0]
        return And(tuple(children)) if make_and else Or(tuple(children))
    # leaf
    return Not(e) if negated else e


# ---- plan nodes ----

class SourceScan:
    """Scans every live document id; the single source of a plan."""

    __slots__ = ()


class SliceFilter:
    """Leaf predicate over one document, closed-world when negated."""

    __slots__ = ("pred", "negated")

    def __init__(self, pred: QueryExpr, negated: bool):
        self.pred = pred
        self.negated = negated


class BooleanCombine:
    __slots__ = ("op", "children")

    def __init__(self, op: str, children: tuple):
        self.op = op  # "and" | "or"
        self.children = children


@dataclass
class QueryPlan:
    expr: QueryExpr
    source: SourceScan
    root: object  # SliceFilter | BooleanCombine
    prefetch_schemas: frozenset[str]
    props: frozenset[str]

    def leaf_nodes(self) -> list[SliceFilter]:
        seen: list[SliceFilter] = []
        marked = set()

        def walk(node):
            if id(node) in marked:
                return
            marked.add(id(node))
            if isinstance(node, SliceFilter):
                seen.append(node)
            else:
                for c in node.children:
                    walk(c)

        walk(self.root)
        return seen


def plan(expr: QueryExpr, registry=None) -> QueryPlan:
    """Compile to a shared-leaf DAG.

    The prefetch set covers every schema the query touches: schemas named
    by HasSchema plus, when a registry is supplied, registered schemas
    containing any referenced property. Within And/Or, children that need
    no stored rows (schema, membership, content tests) run first.
    """
    normalized = rewrite(expr)
    leaves: dict[tuple, SliceFilter] = {}
    combos: dict[tuple, BooleanCombine] = {}

    def build(e: QueryExpr):
        if isinstance(e, (And, Or)):
            built = [build(c) for c in e.children]
            built.sort(key=_node_cost)
            key = ("and" if isinstance(e, And) else "or", tuple(id(b) for b in built))
            if key not in combos:
                combos[key] = BooleanCombine(key[0], tuple(built))
            return combos[key]
        negated = isinstance(e, Not)
        pred = e.child if negated else e
        key = (pred, negated)
        if key not in leaves:
            leaves[key] = SliceFilter(pred, negated)
        return leaves[key]

    root = build(normalized)
    prefetch = set(referenced_schemas(expr))
    props = referenced_props(expr)
    if registry is not None:
        for prop in props:
            prefetch.update(registry.schemas_containing(prop))
    return QueryPlan(expr, SourceScan(), root, frozenset(prefetch), props)


def _node_cost(node) -> int:
    if isinstance(node, SliceFilter):
        return 0 if isinstance(node.pred, (HasSchema, MemberOf, ContentContains)) else 1
    return 1 + max((_node_cost(c) for c in node.children), default=0)


# ---- execution ----

class _DocContext:
    """Lazy per-document state for plan evaluation. Property bags for every
    referenced property load in one backend round trip on first use."""

    __slots__ = ("view", "doc_id", "props", "_bags")

    def __init__(self, view, doc_id: DocumentId, props: frozenset[str]):
        self.view = view
        self.doc_id = doc_id
        self.props = props
        self._bags: Optional[dict[str, tuple[Value, ...]]] = None

    def bag(self, prop: str) -> tuple[Value, ...]:
        if self._bags is None:
            self._bags = self.view.bags_of(self.doc_id, self.props)
        return self._bags.get(prop, ())


def leaf_matches(pred: QueryExpr, ctx: _DocContext) -> bool:
    """Shared leaf semantics for the plan path and commit-event matching."""
    view, doc_id = ctx.view, ctx.doc_id
    if isinstance(pred, HasSchema):
        return pred.name in view.enforced_of(doc_id)
    if isinstance(pred, MemberOf):
        return doc_id in view.members_of(pred.collection)
    if isinstance(pred, ContentContains):
        return pred.token.casefold() in view.content_tokens(doc_id)
    if isinstance(pred, Exists):
        return len(ctx.bag(pred.prop)) > 0
    if isinstance(pred, Cardinality):
        n = len(ctx.bag(pred.prop))
        return n == 1 if pred.card is Card.SINGLE else n >= 2
    if isinstance(pred, Cmp):
        lit = pred.literal
        for v in ctx.bag(pred.prop):
            if pred.op is CmpOp.EQ:
                if v == lit:
                    return True
            elif pred.op is CmpOp.NE:
                if v.vtype is lit.vtype and v != lit:
                    return True
            else:
                if v.vtype is not lit.vtype or v.vtype not in ORDERED_TYPES:
                    continue
                c = compare_values(v, lit)
                if c is None:
                    continue
                if (
                    (pred.op is CmpOp.LT and c < 0)
                    or (pred.op is CmpOp.LE and c <= 0)
                    or (pred.op is CmpOp.GT and c > 0)
                    or (pred.op is CmpOp.GE and c >= 0)
                ):
                    return True
        return False
    raise TypeError(f"not a leaf predicate: {pred!r}")


def evaluate_doc(query_plan: QueryPlan, view, doc_id: DocumentId) -> bool:
    """Evaluate one document against a plan, memoizing shared nodes."""
    ctx = _DocContext(view, doc_id, query_plan.props)
    memo: dict[int, bool] = {}

    def run(node) -> bool:
        key = id(node)
        if key in memo:
            return memo[key]
        if isinstance(node, SliceFilter):
            got = leaf_matches(node.pred, ctx)
            result = not got if node.negated else got
        elif node.op == "and":
            result = all(run(c) for c in node.children)
        else:
            result = any(run(c) for c in node.children)
        memo[key] = result
        return result

    return run(query_plan.root)


def execute(query_plan: QueryPlan, view) -> list[DocumentId]:
    """Match set of the plan over the view's committed state, sorted.

    Matching is computed eagerly so the result set is pinned at call time;
    consumers stream the ids afterwards at their own pace.
    """
    validate_references(query_plan.expr, view)
    return [d for d in sorted(view.document_ids()) if evaluate_doc(query_plan, view, d)]
