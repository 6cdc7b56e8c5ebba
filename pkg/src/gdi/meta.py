"""Graph metadata: labels and property types, replicated on every rank.

Each rank owns a :class:`MetadataCatalog`. Collective calls on the database
apply the same mutation to every replica, so integer IDs agree everywhere.
Integer IDs 0, 1 and 2 are reserved by the property-entry encoding (empty,
end-of-entries, label marker); labels and property types share one counter
that starts at 3.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Any, Iterator

import numpy as np

from .errors import DuplicateNameError, MetadataError, NotFoundError, PropertyValueError

FIRST_USER_ID = 3


class EntityType(enum.Enum):
    SINGLE = "single"
    MULTI = "multi"


class Datatype(enum.Enum):
    U64 = "u64"
    I64 = "i64"
    F64 = "f64"
    UTF8 = "utf8"
    BYTES = "bytes"

    @property
    def numeric(self) -> bool:
        return self in (Datatype.U64, Datatype.I64, Datatype.F64)

    @property
    def ordered(self) -> bool:
        return self is not Datatype.BYTES

    @property
    def dtype(self) -> np.dtype:
        return _NP_DTYPES[self]


_NP_DTYPES = {
    Datatype.U64: np.dtype("<u8"),
    Datatype.I64: np.dtype("<i8"),
    Datatype.F64: np.dtype("<f8"),
    Datatype.UTF8: np.dtype("u1"),
    Datatype.BYTES: np.dtype("u1"),
}


class SizeType(enum.Enum):
    NONE = "none"
    MAX = "max"
    FIXED = "fixed"


@dataclass(frozen=True)
class Label:
    name: str
    int_id: int
    catalog: Any = field(default=None, compare=False, repr=False, hash=False)


@dataclass(eq=False)
class PropertyType:
    name: str
    int_id: int
    entity: EntityType
    datatype: Datatype
    size_type: SizeType
    size_limit: int
    catalog: Any = field(default=None, repr=False)

    def __eq__(self, other):
        return (isinstance(other, PropertyType) and other.int_id == self.int_id
                and other.name == self.name)

    def __hash__(self):
        return hash((self.name, self.int_id))

    @property
    def scalar(self) -> bool:
        return self.size_type is SizeType.FIXED and self.size_limit == 1

    def _check_count(self, n):
        if self.size_type is SizeType.FIXED and n != self.size_limit:
            raise PropertyValueError(
                f"{self.name}: expected exactly {self.size_limit} elements, got {n}")
        if self.size_type is SizeType.MAX and n > self.size_limit:
            raise PropertyValueError(
                f"{self.name}: at most {self.size_limit} elements allowed, got {n}")

    def encode(self, value) -> bytes:
        """Validate ``value`` against this type and return its stored bytes."""
        dt = self.datatype
        if dt is Datatype.UTF8:
            if not isinstance(value, str):
                raise PropertyValueError(f"{self.name}: expected str, got {type(value).__name__}")
            raw = value.encode("utf-8")
        elif dt is Datatype.BYTES:
            if not isinstance(value, (bytes, bytearray, memoryview)):
                raise PropertyValueError(f"{self.name}: expected bytes")
            raw = bytes(value)
        else:
            items = list(value) if isinstance(value, (list, tuple, np.ndarray)) else [value]
            try:
                if dt is Datatype.F64:
                    out = np.array([_as_float(x) for x in items], dtype=dt.dtype)
                else:
                    ints = [_as_int(x) for x in items]
                    lo, hi = (0, 2**64 - 1) if dt is Datatype.U64 else (-2**63, 2**63 - 1)
                    if any(not lo <= x <= hi for x in ints):
                        raise PropertyValueError(f"{self.name}: value out of {dt.value} range")
                    out = np.array(ints, dtype=dt.dtype)
            except (TypeError, ValueError, OverflowError) as exc:
                raise PropertyValueError(f"{self.name}: {value!r} is not a {dt.value} value") from exc
            self._check_count(out.size)
            return out.tobytes()
        self._check_count(len(raw))
        return raw

    def decode(self, raw: bytes):
        dt = self.datatype
        if dt is Datatype.UTF8:
            return bytes(raw).decode("utf-8")
        if dt is Datatype.BYTES:
            return bytes(raw)
        arr = np.frombuffer(raw, dtype=dt.dtype)
        if self.scalar and arr.size == 1:
            return arr[0].item()
        return tuple(arr.tolist())

    def describe(self) -> dict:
        return {"name": self.name, "int_id": self.int_id, "entity": self.entity.value,
                "datatype": self.datatype.value, "size_type": self.size_type.value,
                "size_limit": self.size_limit}


class _Node:
    __slots__ = ("item", "prev", "next")

    def __init__(self, item):
        self.item = item
        self.prev = None
        self.next = None


class _Registry:
    """Doubly linked list plus name/id maps: O(1) add, remove and lookup."""

    def __init__(self):
        self.head: _Node | None = None
        self.tail: _Node | None = None
        self.by_name: dict[str, _Node] = {}
        self.by_id: dict[int, _Node] = {}

    def add(self, item):
        node = _Node(item)
        node.prev = self.tail
        if self.tail is None:
            self.head = node
        else:
            self.tail.next = node
        self.tail = node
        self.by_name[item.name] = node
        self.by_id[item.int_id] = node
        return node

    def remove(self, item):
        node = self.by_id.pop(item.int_id)
        del self.by_name[item.name]
        if node.prev is None:
            self.head = node.next
        else:
            node.prev.next = node.next
        if node.next is None:
            self.tail = node.prev
        else:
            node.next.prev = node.prev
        node.prev = node.next = None

    def __iter__(self) -> Iterator:
        node = self.head
        while node is not None:
            yield node.item
            node = node.next

    def __len__(self):
        return len(self.by_id)


def _as_int(x) -> int:
    if isinstance(x, (bool, np.bool_)) or not isinstance(x, (int, float, np.integer, np.floating)):
        raise TypeError(type(x).__name__)
    if isinstance(x, (float, np.floating)) and not float(x).is_integer():
        raise ValueError(x)
    return int(x)


def _as_float(x) -> float:
    if isinstance(x, (bool, np.bool_)) or not isinstance(x, (int, float, np.integer, np.floating)):
        raise TypeError(type(x).__name__)
    return float(x)


class MetadataCatalog:
    """One rank's replica of the label and property-type catalogs."""

    def __init__(self, db=None):
        self.db = db
        self._labels = _Registry()
        self._ptypes = _Registry()
        self._next_id = FIRST_USER_ID

    def _take_id(self):
        i = self._next_id
        self._next_id += 1
        return i

    def _check_free(self, name):
        if not isinstance(name, str) or not name:
            raise MetadataError("names must be non-empty strings")
        if name in self._labels.by_name or name in self._ptypes.by_name:
            raise DuplicateNameError(f"name {name!r} already in use")

    # -- labels ---------------------------------------------------------------
    def add_label(self, name: str) -> Label:
        self._check_free(name)
        label = Label(name, self._take_id(), self)
        self._labels.add(label)
        return label

    def remove_label(self, label: Label) -> None:
        node = self._labels.by_id.get(label.int_id)
        if node is None or node.item.name != label.name:
            raise NotFoundError(f"unknown label {label.name!r}")
        self._labels.remove(node.item)

    def label_from_name(self, name: str) -> Label:
        try:
            return self._labels.by_name[name].item
        except KeyError:
            raise NotFoundError(f"no label named {name!r}") from None

    def label_from_id(self, int_id: int) -> Label:
        try:
            return self._labels.by_id[int_id].item
        except KeyError:
            raise NotFoundError(f"no label with id {int_id}") from None

    def has_label_id(self, int_id: int) -> bool:
        return int_id in self._labels.by_id

    @property
    def labels(self) -> list[Label]:
        return list(self._labels)

    # -- property types -------------------------------------------------------
    def add_property_type(self, name, entity=EntityType.SINGLE, datatype=Datatype.U64,
                          size_type=SizeType.FIXED, size_limit=1) -> PropertyType:
        self._check_free(name)
        entity, datatype, size_type = (EntityType(entity), Datatype(datatype),
                                       SizeType(size_type))
        check_limits(size_type, size_limit)
        ptype = PropertyType(name, self._take_id(), entity, datatype, size_type,
                             int(size_limit), self)
        self._ptypes.add(ptype)
        return ptype

    def remove_property_type(self, ptype: PropertyType) -> None:
        if ptype.int_id not in self._ptypes.by_id:
            raise NotFoundError(f"unknown property type {ptype.name!r}")
        self._ptypes.remove(self._ptypes.by_id[ptype.int_id].item)

    def property_type_from_name(self, name: str) -> PropertyType:
        try:
            return self._ptypes.by_name[name].item
        except KeyError:
            raise NotFoundError(f"no property type named {name!r}") from None

    def property_type_from_id(self, int_id: int) -> PropertyType:
        try:
            return self._ptypes.by_id[int_id].item
        except KeyError:
            raise NotFoundError(f"no property type with id {int_id}") from None

    def has_property_type_id(self, int_id: int) -> bool:
        return int_id in self._ptypes.by_id

    @property
    def property_types(self) -> list[PropertyType]:
        return list(self._ptypes)

    def serialize(self) -> str:
        """Canonical JSON image used to compare replicas."""
        doc = {
            "next_id": self._next_id,
            "labels": [{"name": l.name, "int_id": l.int_id} for l in self._labels],
            "property_types": [p.describe() for p in self._ptypes],
        }
        return json.dumps(doc, sort_keys=True)


def check_limits(size_type: SizeType, size_limit: int) -> None:
    if size_type is SizeType.NONE:
        return
    if not isinstance(size_limit, int) or size_limit <= 0:
        raise MetadataError(f"{size_type.value} size type needs a positive size limit")
