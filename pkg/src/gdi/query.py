"""DNF constraints over labels and properties, and explicit vertex indexes.

A :class:`Constraint` is a disjunction of :class:`Subconstraint` objects; a
subconstraint is a conjunction of label and property conditions. Anything
exposing ``label_ids()`` and ``property_values(ptype)`` can be tested, which
covers vertex holders and edge handles.
"""
from __future__ import annotations

import operator
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Iterable

from .blocks import BlockKind
from .dht import DistributedHashTable, hash_bytes
from .errors import DatatypeMismatchError, GdiError, StaleConstraintError
from .meta import Datatype, Label, PropertyType

if TYPE_CHECKING:
    from .database import Database
    from .txn import Transaction

_CMP = {
    "==": operator.eq, "=": operator.eq, "!=": operator.ne,
    "<": operator.lt, "<=": operator.le, ">": operator.gt, ">=": operator.ge,
}
_ORDERED_OPS = {"<", "<=", ">", ">="}


@dataclass(frozen=True)
class LabelCondition:
    label: Label
    present: bool = True

    def holds(self, obj) -> bool:
        return (self.label.int_id in obj.label_ids()) == self.present


@dataclass(frozen=True)
class PropertyCondition:
    """``<ptype> <op> value``; true if any stored entry satisfies it."""
    ptype: PropertyType
    op: str
    value: Any

    def __post_init__(self):
        if self.op not in _CMP:
            raise ValueError(f"unknown comparison operator {self.op!r}")
        _check_operand(self.ptype, self.op, self.value)

    def holds(self, obj) -> bool:
        cmp = _CMP[self.op]
        return any(cmp(v, self.value) for v in obj.property_values(self.ptype))


def _check_operand(ptype: PropertyType, op: str, value) -> None:
    dt = ptype.datatype
    if dt.numeric:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        if isinstance(value, tuple):
            ok = all(isinstance(x, (int, float)) for x in value)
            if op in _ORDERED_OPS:
                raise DatatypeMismatchError("ordered comparison of a vector property")
    elif dt is Datatype.UTF8:
        ok = isinstance(value, str)
    else:
        ok = isinstance(value, (bytes, bytearray))
    if not ok:
        raise DatatypeMismatchError(
            f"cannot compare {dt.value} property {ptype.name!r} with {type(value).__name__}")
    if op in _ORDERED_OPS and not dt.ordered:
        raise DatatypeMismatchError(f"{dt.value} values are not ordered")


@dataclass
class Subconstraint:
    conditions: list = field(default_factory=list)

    def add_label_condition(self, label: Label, present: bool = True) -> Subconstraint:
        self.conditions.append(LabelCondition(label, present))
        return self

    def add_property_condition(self, ptype: PropertyType, op: str, value) -> Subconstraint:
        self.conditions.append(PropertyCondition(ptype, op, value))
        return self

    def holds(self, obj) -> bool:
        return all(c.holds(obj) for c in self.conditions)


@dataclass
class Constraint:
    """Disjunction of subconstraints; the empty constraint matches everything."""
    subconstraints: list = field(default_factory=list)

    @classmethod
    def of(cls, *conjunctions: Iterable) -> Constraint:
        """Build from iterables of conditions, one iterable per disjunct."""
        return cls([Subconstraint(list(c)) for c in conjunctions])

    def add_subconstraint(self, sub: Subconstraint) -> Constraint:
        self.subconstraints.append(sub)
        return self

    def _referenced(self):
        for sub in self.subconstraints:
            for c in sub.conditions:
                yield c.label if isinstance(c, LabelCondition) else c.ptype

    def is_stale(self, catalog) -> bool:
        for item in self._referenced():
            if isinstance(item, Label):
                if not catalog.has_label_id(item.int_id):
                    return True
            elif not catalog.has_property_type_id(item.int_id):
                return True
        return False

    def evaluate(self, obj, catalog=None) -> bool:
        if catalog is not None and self.is_stale(catalog):
            raise StaleConstraintError("constraint refers to a freed label or property type")
        if not self.subconstraints:
            return True
        return any(sub.holds(obj) for sub in self.subconstraints)


def has_label(label: Label) -> LabelCondition:
    return LabelCondition(label, True)


def lacks_label(label: Label) -> LabelCondition:
    return LabelCondition(label, False)


def prop(ptype: PropertyType, op: str, value) -> PropertyCondition:
    return PropertyCondition(ptype, op, value)


class ExplicitIndex:
    """Hash index of the vertices carrying any of a set of labels/property types.

    Entries live in a distributed hash table keyed by the vertex reference and
    placed on the vertex's own rank, so the local part of the index is a scan
    of local memory. The index is kept exact by every committing transaction.
    """

    def __init__(self, db: Database, labels: Iterable[Label] = (),
                 ptypes: Iterable[PropertyType] = (), capacity: int = 1 << 16):
        labels, ptypes = list(labels), list(ptypes)
        if not labels and not ptypes:
            raise ValueError("an index needs at least one label or property type")
        self.db = db
        self.label_ids = {l.int_id for l in labels}
        self.ptype_ids = {p.int_id for p in ptypes}
        self.capacity = capacity
        self.table = DistributedHashTable(db.world, capacity, placement="key_rank",
                                          debug=db.config.debug)
        self.freed = False

    def matches(self, label_ids, ptype_ids) -> bool:
        return bool(self.label_ids.intersection(label_ids)
                    or self.ptype_ids.intersection(ptype_ids))

    def is_stale(self) -> bool:
        return self.freed

    def _check(self):
        if self.freed:
            raise GdiError("index has been freed")

    def insert(self, ref: int) -> None:
        self.table.insert(ref, ref)

    def remove(self, ref: int) -> None:
        self.table.delete(ref)

    def local_refs(self, rank: int | None = None) -> list[int]:
        self._check()
        return sorted(v for _, v in self.table.local_items(rank))

    def populate_local(self, rank: int) -> int:
        """Rebuild ``rank``'s part of the index from its vertices."""
        for key, _ in self.table.local_items(rank):
            self.table.delete(key)
        n = 0
        for ref in self.db.pool.blocks_of_kind(rank, BlockKind.VERTEX):
            labels, ptypes = self.db._peek_membership(ref)
            if self.matches(labels, ptypes):
                self.insert(ref)
                n += 1
        return n

    def __len__(self):
        return len(self.table.items())


def translate_key(app_id: bytes, label: Label | int | None = None) -> int:
    """Internal-index key of an application vertex ID, optionally label scoped."""
    lid = 0 if label is None else getattr(label, "int_id", label)
    return hash_bytes(lid.to_bytes(4, "little"), bytes(app_id))


def local_vertices_of_index(txn: Transaction, index: ExplicitIndex,
                            constraint: Constraint | None = None) -> list[int]:
    refs = index.local_refs(txn.rank)
    if constraint is None or not constraint.subconstraints:
        return refs
    return [r for r in refs if constraint.evaluate(txn.associate_vertex(r), txn.catalog)]
