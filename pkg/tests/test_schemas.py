"""Registry consistency, conformance checking, and mutation validation."""

from __future__ import annotations

import pytest

from harland.errors import DuplicateSchema, InconsistentSchema, UnknownSchema
from harland.model import (
    Constraint,
    DocumentId,
    DocumentKind,
    DocumentSnapshot,
    Schema,
    Value,
    bag,
)
from harland.schemas import Reason, SchemaRegistry, Violation

T1 = Value.timestamp_text("2001-05-01T00:00:00Z")
T2 = Value.timestamp_text("2001-06-01T00:00:00Z")


def todo_schema() -> Schema:
    return Schema(
        "to-do",
        {
            "Subject": Constraint.from_text("text", "1..1"),
            "Received": Constraint.from_text("timestamp", "1..1"),
            "Deadline": Constraint.from_text("timestamp", "1..1"),
            "Categories": Constraint.from_text("text", "0..*"),
        },
    )


def email_schema() -> Schema:
    return Schema(
        "email",
        {
            "Subject": Constraint.from_text("text", "1..1"),
            "Received": Constraint.from_text("timestamp", "1..1"),
            "From": Constraint.from_text("text", "1..1"),
        },
    )


def _snap(props: dict, enforced=frozenset()) -> DocumentSnapshot:
    return DocumentSnapshot(
        DocumentId(1), DocumentKind.PLAIN, {k: bag(v) for k, v in props.items()}, frozenset(enforced), frozenset()
    )


def test_define_assigns_registration_slices():
    reg = SchemaRegistry()
    assert reg.define(email_schema()) == 1
    assert reg.define(todo_schema()) == 2
    assert reg.slice_of_schema("email") == 1
    assert reg.slice_of_schema("to-do") == 2


def test_duplicate_name_rejected():
    reg = SchemaRegistry()
    reg.define(todo_schema())
    with pytest.raises(DuplicateSchema):
        reg.define(Schema("to-do", {}))


def test_inconsistent_shared_property_rejected():
    reg = SchemaRegistry()
    reg.define(email_schema())
    bad = Schema("memo", {"Subject": Constraint.from_text("text", "0..*")})
    with pytest.raises(InconsistentSchema) as exc:
        reg.define(bad)
    assert exc.value.existing == "email"
    assert exc.value.prop == "Subject"
    # identical constraint on the shared name is fine
    reg.define(Schema("memo", {"Subject": Constraint.from_text("text", "1..1")}))


def test_conformance_missing_required():
    reg = SchemaRegistry()
    reg.define(todo_schema())
    snap = _snap({"Subject": [Value.text("x")], "Received": [T1]})
    vs = reg.violations(snap, "to-do")
    assert vs == [Violation("to-do", "Deadline", Reason.MISSING_REQUIRED)]
    assert not reg.conforms(snap, "to-do")


def test_conformance_full_doc():
    reg = SchemaRegistry()
    reg.define(todo_schema())
    snap = _snap({"Subject": [Value.text("x")], "Received": [T1], "Deadline": [T2]})
    assert reg.conforms(snap, "to-do")
    assert reg.violations(snap, "to-do") == []


def test_conformance_wrong_type_and_too_many():
    reg = SchemaRegistry()
    reg.define(todo_schema())
    snap = _snap(
        {
            "Subject": [Value.text("a"), Value.text("b")],
            "Received": [Value.integer(5)],
            "Deadline": [T2],
        }
    )
    vs = reg.violations(snap, "to-do")
    assert Violation("to-do", "Subject", Reason.TOO_MANY_VALUES) in vs
    assert Violation("to-do", "Received", Reason.WRONG_TYPE) in vs
    assert len(vs) == 2


def test_unknown_schema():
    reg = SchemaRegistry()
    with pytest.raises(UnknownSchema):
        reg.violations(_snap({}), "nope")
    with pytest.raises(UnknownSchema):
        reg.get("nope")


def test_validate_mutation_refines_drained_required_property():
    reg = SchemaRegistry()
    reg.define(todo_schema())
    before = _snap(
        {"Subject": [Value.text("x")], "Received": [T1], "Deadline": [T2]},
        enforced={"to-do"},
    )
    proposed = _snap({"Subject": [Value.text("x")], "Received": [T1]}, enforced={"to-do"})
    vs = reg.validate_mutation(before, proposed)
    assert vs == [Violation("to-do", "Deadline", Reason.TOO_FEW_VALUES)]


def test_validate_mutation_ok_and_too_many():
    reg = SchemaRegistry()
    reg.define(todo_schema())
    before = _snap(
        {"Subject": [Value.text("x")], "Received": [T1], "Deadline": [T2]},
        enforced={"to-do"},
    )
    ok = _snap(
        {"Subject": [Value.text("y")], "Received": [T1], "Deadline": [T2],
         "Categories": [Value.text("a"), Value.text("a")]},
        enforced={"to-do"},
    )
    assert reg.validate_mutation(before, ok) == []
    two_subjects = _snap(
        {"Subject": [Value.text("x"), Value.text("y")], "Received": [T1], "Deadline": [T2]},
        enforced={"to-do"},
    )
    assert reg.validate_mutation(before, two_subjects) == [
        Violation("to-do", "Subject", Reason.TOO_MANY_VALUES)
    ]


def test_validate_mutation_ignores_unenforced_schemas():
    reg = SchemaRegistry()
    reg.define(todo_schema())
    before = _snap({}, enforced=set())
    proposed = _snap({"Deadline": [Value.text("wrong type")]})
    assert reg.validate_mutation(before, proposed) == []


def test_enforcement_order_is_tracked():
    reg = SchemaRegistry()
    reg.define(email_schema())
    reg.define(todo_schema())
    did = DocumentId(9)
    reg.record_enforce(did, "to-do")
    reg.record_enforce(did, "email")
    assert reg.enforced_names(did) == ["to-do", "email"]
    reg.record_unenforce(did, "to-do")
    assert reg.enforced_names(did) == ["email"]
    reg.record_enforce(did, "to-do")  # re-enforce lands at the end
    assert reg.enforced_names(did) == ["email", "to-do"]


def test_empty_schema_always_conforms():
    reg = SchemaRegistry()
    reg.define(Schema("sync", {}))
    assert reg.conforms(_snap({"anything": [Value.integer(1)]}), "sync")
