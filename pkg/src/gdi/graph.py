"""Vertex and edge holders: the logical layout on top of the block layer.

A holder is serialized into one byte stream that is cut into blocks::

    header (32 B) | overflow block refs | ext | lightweight edges | entries

``ext`` is the application ID for a vertex and ``origin | target | direction``
for a heavyweight edge. Lightweight edges are 24-byte records
``neighbor | edge holder ref | label id | flags``. Entries are
``marker | length | payload`` records: marker 0 is an empty (removed) slot,
1 terminates the sequence, 2 is a label whose payload is the label id, and
any larger marker is the integer id of a property type.

The address of overflow block *i* sits at stream offset ``32 + 8 (i - 1)``,
always inside the first *i* blocks, so a reader can fetch blocks in order.
"""
from __future__ import annotations

import enum
import math
import struct
from typing import TYPE_CHECKING, NamedTuple

import numpy as np

from .blocks import NULL_REF
from .errors import GdiError, NotFoundError, PropertyValueError, TransactionError
from .meta import EntityType, Label, PropertyType

if TYPE_CHECKING:
    from .txn import Transaction

HEADER = struct.Struct("<HHIIIIIII")
HEADER_SIZE = HEADER.size
VERTEX_MAGIC = 0x5856
EDGE_MAGIC = 0x4556

LW_DTYPE = np.dtype([("nbr", "<u8"), ("edge", "<u8"), ("label", "<u4"), ("flags", "<u4")])
LW_SIZE = LW_DTYPE.itemsize
ENTRY_HDR = struct.Struct("<II")
EDGE_EXT = struct.Struct("<QQI4x")
_LABEL_PAYLOAD = struct.Struct("<I")

MARK_EMPTY, MARK_END, MARK_LABEL = 0, 1, 2

DIR_MASK = 0x7
TOMBSTONE = 0x100
HEAVY = 0x200

MAX_APP_ID = 256


class Orientation(enum.IntFlag):
    UNDIRECTED = 1
    OUTGOING = 2
    INCOMING = 4
    ALL = 7


MIRROR = {Orientation.UNDIRECTED: Orientation.UNDIRECTED,
          Orientation.OUTGOING: Orientation.INCOMING,
          Orientation.INCOMING: Orientation.OUTGOING}


class EdgeUid(NamedTuple):
    """A lightweight-edge slot: base vertex reference + index in its edge array."""
    vertex: int
    offset: int


def blocks_needed(body_len: int, block_size: int) -> int:
    return max(1, math.ceil((HEADER_SIZE - 8 + body_len) / (block_size - 8)))


def encode_entries(entries) -> bytes:
    parts = []
    for marker, payload in entries:
        parts.append(ENTRY_HDR.pack(marker, len(payload)))
        parts.append(payload)
    parts.append(ENTRY_HDR.pack(MARK_END, 0))
    return b"".join(parts)


def decode_entries(buf) -> list[tuple[int, bytes]]:
    out = []
    pos, end = 0, len(buf)
    while True:
        if pos + 8 > end:
            raise GdiError("entry sequence is not terminated")
        marker, length = ENTRY_HDR.unpack_from(buf, pos)
        pos += 8
        if marker == MARK_END:
            return out
        out.append((marker, bytes(buf[pos:pos + length])))
        pos += length


def encode_lw(edges) -> bytes:
    if not edges:
        return b""
    return np.array(edges, dtype=LW_DTYPE).tobytes()


def decode_lw(buf) -> list[tuple]:
    if not len(buf):
        return []
    return np.frombuffer(buf, dtype=LW_DTYPE).tolist()


def encode_stream(magic, incarnation, blocks, ext, lw, entries_raw) -> bytes:
    """Full holder image for the given block list (primary first)."""
    n_edges = len(lw) // LW_SIZE
    body_len = len(ext) + len(lw) + len(entries_raw)
    total = HEADER_SIZE + 8 * (len(blocks) - 1) + body_len
    head = HEADER.pack(magic, 0, incarnation, total, len(blocks), len(ext), n_edges,
                       len(entries_raw), 0)
    addrs = struct.pack(f"<{len(blocks) - 1}Q", *blocks[1:])
    return b"".join((head, addrs, ext, lw, entries_raw))


def read_stream(pool, ref: int) -> tuple[tuple, list[int], list[bytes]]:
    """Fetch a holder image: (header fields, block refs, raw blocks)."""
    bs = pool.block_size
    first = pool.read_block(ref)
    hdr = HEADER.unpack_from(first, 0)
    n_blocks = hdr[4]
    if hdr[0] not in (VERTEX_MAGIC, EDGE_MAGIC) or n_blocks == 0 or hdr[3] > n_blocks * bs:
        return hdr, [ref], [first]
    raws = [first]
    blocks = [ref]
    addr_end = HEADER_SIZE + 8 * (n_blocks - 1)
    buf = bytearray(first)
    while len(blocks) < n_blocks:
        nxt = struct.unpack_from("<Q", buf, HEADER_SIZE + 8 * (len(blocks) - 1))[0]
        raw = pool.read_block(nxt)
        blocks.append(nxt)
        raws.append(raw)
        if len(buf) < addr_end:
            buf += raw
    return hdr, blocks, raws


class _Holder:
    """State shared by vertex and edge holders: blocks, entries, flags."""

    magic = 0

    def __init__(self, txn: Transaction, ref: int):
        self.txn = txn
        self.ref = ref
        self.blocks = [ref]
        self.orig_blocks: list[bytes] = []
        self.incarnation = 0
        self.entries: list[tuple[int, bytes]] = []
        self.new = False
        self.dirty = False
        self.deleted = False
        self.orig_label_ids: frozenset = frozenset()
        self.orig_ptype_ids: frozenset = frozenset()

    def __repr__(self):
        from .blocks import format_ref
        return f"{type(self).__name__}({format_ref(self.ref)})"

    # -- guards -----------------------------------------------------------
    def _live(self):
        self.txn._check_open()
        if self.deleted:
            raise TransactionError(f"{self!r} was deleted in this transaction")

    def _mutable(self):
        self._live()
        self.txn._check_writable(self.ref)
        self.dirty = True

    @property
    def catalog(self):
        return self.txn.catalog

    # -- labels -----------------------------------------------------------
    def label_ids(self) -> list[int]:
        return [_LABEL_PAYLOAD.unpack(p)[0] for m, p in self.entries if m == MARK_LABEL]

    def ptype_ids(self) -> set[int]:
        return {m for m, _ in self.entries if m > MARK_LABEL}

    def labels(self) -> list[Label]:
        self._live()
        cat = self.catalog
        return [cat.label_from_id(i) for i in self.label_ids() if cat.has_label_id(i)]

    def add_label(self, label: Label) -> None:
        self._mutable()
        if label.int_id in self.label_ids():
            raise GdiError(f"{self!r} already has label {label.name!r}")
        if not self.catalog.has_label_id(label.int_id):
            raise NotFoundError(f"label {label.name!r} is not in the catalog")
        self.entries.append((MARK_LABEL, _LABEL_PAYLOAD.pack(label.int_id)))

    def remove_label(self, label: Label) -> None:
        self._mutable()
        payload = _LABEL_PAYLOAD.pack(label.int_id)
        for i, (m, p) in enumerate(self.entries):
            if m == MARK_LABEL and p == payload:
                self.entries[i] = (MARK_EMPTY, p)
                return
        raise NotFoundError(f"{self!r} has no label {label.name!r}")

    # -- properties ---------------------------------------------------------
    def property_values(self, ptype: PropertyType) -> list:
        tid = ptype.int_id
        return [ptype.decode(p) for m, p in self.entries if m == tid]

    def properties(self, ptype: PropertyType) -> list:
        self._live()
        return self.property_values(ptype)

    def all_properties(self) -> dict[str, list]:
        self._live()
        cat = self.catalog
        out: dict[str, list] = {}
        for m, p in self.entries:
            if m > MARK_LABEL and cat.has_property_type_id(m):
                pt = cat.property_type_from_id(m)
                out.setdefault(pt.name, []).append(pt.decode(p))
        return out

    def add_property(self, ptype: PropertyType, value) -> None:
        self._mutable()
        raw = ptype.encode(value)
        if not self.catalog.has_property_type_id(ptype.int_id):
            raise NotFoundError(f"property type {ptype.name!r} is not in the catalog")
        if ptype.entity is EntityType.SINGLE and any(m == ptype.int_id for m, _ in self.entries):
            raise PropertyValueError(f"{ptype.name!r} allows a single entry per object")
        self.entries.append((ptype.int_id, raw))

    def update_property(self, ptype: PropertyType, value) -> None:
        """Replace every entry of ``ptype`` with ``value`` (adding it if absent)."""
        self._mutable()
        raw = ptype.encode(value)
        tid = ptype.int_id
        replaced = False
        for i, (m, p) in enumerate(self.entries):
            if m == tid:
                self.entries[i] = (tid, raw) if not replaced else (MARK_EMPTY, p)
                replaced = True
        if not replaced:
            self.add_property(ptype, value)

    def remove_property(self, ptype: PropertyType, value=None) -> int:
        """Drop entries of ``ptype`` (only those equal to ``value`` if given)."""
        self._mutable()
        tid = ptype.int_id
        raw = None if value is None else ptype.encode(value)
        n = 0
        for i, (m, p) in enumerate(self.entries):
            if m == tid and (raw is None or p == raw):
                self.entries[i] = (MARK_EMPTY, p)
                n += 1
        if not n:
            raise NotFoundError(f"{self!r} has no matching {ptype.name!r} entry")
        return n

    # -- serialization -------------------------------------------------------
    def _ext(self) -> bytes:
        return b""

    def _lw_raw(self) -> bytes:
        return b""

    def body_len(self) -> int:
        return len(self._ext()) + len(self._lw_raw()) + len(encode_entries(self.entries))

    def encode(self, blocks=None) -> bytes:
        return encode_stream(self.magic, self.incarnation, blocks or self.blocks, self._ext(),
                             self._lw_raw(), encode_entries(self.entries))

    def _load(self, hdr, blocks, raws):
        self.blocks = list(blocks)
        self.orig_blocks = list(raws)
        stream = b"".join(raws)
        magic, _, inc, total, n_blocks, ext_len, n_edges, entries_len, _ = hdr
        self.incarnation = inc
        pos = HEADER_SIZE + 8 * (n_blocks - 1)
        ext = stream[pos:pos + ext_len]
        pos += ext_len
        lw = stream[pos:pos + n_edges * LW_SIZE]
        pos += n_edges * LW_SIZE
        self.entries = decode_entries(memoryview(stream)[pos:pos + entries_len])
        self.orig_label_ids = frozenset(self.label_ids())
        self.orig_ptype_ids = frozenset(self.ptype_ids())
        return ext, lw

    def compact(self) -> bool:
        """Drop removed entries; True if anything changed."""
        kept = [e for e in self.entries if e[0] != MARK_EMPTY]
        changed = len(kept) != len(self.entries)
        self.entries = kept
        return changed


class VertexHolder(_Holder):
    """Transaction-local access object of one vertex."""

    magic = VERTEX_MAGIC

    def __init__(self, txn: Transaction, ref: int, app_id: bytes = b""):
        super().__init__(txn, ref)
        self.app_id = bytes(app_id)
        self.lw: list[tuple] = []

    @classmethod
    def parse(cls, txn, hdr, blocks, raws) -> VertexHolder:
        h = cls(txn, blocks[0])
        ext, lw = h._load(hdr, blocks, raws)
        h.app_id = bytes(ext)
        h.lw = decode_lw(lw)
        return h

    def _ext(self):
        return self.app_id

    def _lw_raw(self):
        return encode_lw(self.lw)

    def compact(self) -> bool:
        changed = super().compact()
        kept = [e for e in self.lw if not e[3] & TOMBSTONE]
        if len(kept) != len(self.lw):
            self.lw = kept
            changed = True
        return changed

    @property
    def app_id_int(self) -> int:
        return int.from_bytes(self.app_id, "little")

    # -- edges --------------------------------------------------------------
    def edge_uids(self, orientation: Orientation = Orientation.ALL, constraint=None) -> list[EdgeUid]:
        """Live edges whose direction (seen from this vertex) is in ``orientation``."""
        self._live()
        mask = int(orientation)
        out = []
        for i, (nbr, eref, label, flags) in enumerate(self.lw):
            if flags & TOMBSTONE or not flags & DIR_MASK & mask:
                continue
            if constraint is not None and not self.txn._edge_matches(self, i, constraint):
                continue
            out.append(EdgeUid(self.ref, i))
        return out

    def neighbors(self, orientation: Orientation = Orientation.ALL, constraint=None) -> list[int]:
        """Far endpoints of the selected edges, duplicates kept."""
        if constraint is None:
            self._live()
            mask = int(orientation)
            return [e[0] for e in self.lw if not e[3] & TOMBSTONE and e[3] & mask]
        return [self.lw[u.offset][0] for u in self.edge_uids(orientation, constraint)]

    def degree(self, orientation: Orientation = Orientation.ALL) -> int:
        self._live()
        mask = int(orientation)
        return sum(1 for e in self.lw if not e[3] & TOMBSTONE and e[3] & mask)

    def _append_edge(self, nbr: int, direction: Orientation, label_id: int = 0,
                     edge_ref: int = NULL_REF) -> int:
        self.lw.append((nbr, edge_ref, label_id, int(direction)))
        self.dirty = True
        return len(self.lw) - 1

    def _find_mirror(self, nbr: int, direction: Orientation, label_id: int, edge_ref: int,
                     exclude: int = -1) -> int:
        want = int(MIRROR[direction])
        for i, (n, e, l, f) in enumerate(self.lw):
            if (i != exclude and n == nbr and e == edge_ref and l == label_id
                    and f & DIR_MASK == want and not f & TOMBSTONE):
                return i
        raise GdiError(f"mirror entry of an edge to {nbr:#x} missing in {self!r}")


class EdgeHolder(_Holder):
    """Holder of a heavyweight edge (several labels or any property)."""

    magic = EDGE_MAGIC

    def __init__(self, txn: Transaction, ref: int, origin: int = NULL_REF,
                 target: int = NULL_REF, direction: Orientation = Orientation.OUTGOING):
        super().__init__(txn, ref)
        self.origin = origin
        self.target = target
        self.direction = direction

    @classmethod
    def parse(cls, txn, hdr, blocks, raws) -> EdgeHolder:
        h = cls(txn, blocks[0])
        ext, _ = h._load(hdr, blocks, raws)
        h.origin, h.target, d = EDGE_EXT.unpack(ext)
        h.direction = Orientation(d)
        return h

    def _ext(self):
        return EDGE_EXT.pack(self.origin, self.target, int(self.direction))


class Edge:
    """Handle on one edge, seen from a base vertex slot.

    Lightweight edges keep their (single) label in both endpoint slots;
    escalation moves labels and properties into an :class:`EdgeHolder` that
    both slots point to.
    """

    def __init__(self, txn: Transaction, base: VertexHolder, offset: int):
        self.txn = txn
        self.base = base
        self.offset = offset

    @property
    def uid(self) -> EdgeUid:
        return EdgeUid(self.base.ref, self.offset)

    @property
    def _entry(self):
        e = self.base.lw[self.offset]
        if e[3] & TOMBSTONE:
            raise NotFoundError("edge has been deleted")
        return e

    @property
    def heavy(self) -> bool:
        return bool(self._entry[3] & HEAVY)

    @property
    def holder(self) -> EdgeHolder | None:
        e = self._entry
        return self.txn.associate_edge_holder(e[1]) if e[3] & HEAVY else None

    @property
    def direction(self) -> Orientation:
        return Orientation(self._entry[3] & DIR_MASK)

    def vertices(self) -> tuple[int, int]:
        """(origin, target); for undirected edges (base, neighbor)."""
        nbr, _, _, flags = self._entry
        if flags & DIR_MASK == Orientation.INCOMING:
            return nbr, self.base.ref
        return self.base.ref, nbr

    def label_ids(self) -> list[int]:
        _, eref, label, flags = self._entry
        if flags & HEAVY:
            return self.txn.associate_edge_holder(eref).label_ids()
        return [label] if label else []

    def labels(self) -> list[Label]:
        cat = self.txn.catalog
        return [cat.label_from_id(i) for i in self.label_ids() if cat.has_label_id(i)]

    def property_values(self, ptype: PropertyType) -> list:
        h = self.holder
        return h.property_values(ptype) if h is not None else []

    def properties(self, ptype: PropertyType) -> list:
        return self.property_values(ptype)

    def add_label(self, label: Label) -> None:
        self.txn._edge_add_label(self, label)

    def remove_label(self, label: Label) -> None:
        self.txn._edge_remove_label(self, label)

    def add_property(self, ptype: PropertyType, value) -> None:
        self.txn._escalate(self).add_property(ptype, value)

    def update_property(self, ptype: PropertyType, value) -> None:
        self.txn._escalate(self).update_property(ptype, value)

    def remove_property(self, ptype: PropertyType, value=None) -> int:
        h = self.holder
        if h is None:
            raise NotFoundError("lightweight edges carry no properties")
        return h.remove_property(ptype, value)
