"""The database object: storage, internal index, metadata replicas, indexes.

Metadata and index routines are collective. Inside :meth:`World.run` every
rank calls them; from the host thread they are applied to every replica in
turn, which is convenient for tests and tools.
"""
from __future__ import annotations

import json
import struct
from collections import Counter
from dataclasses import dataclass
from importlib import resources
from typing import Callable, Iterable

import jsonschema

from .blocks import BlockKind, BlockPool, format_ref, unpack_lock
from .dht import DistributedHashTable
from .errors import GdiError, MetadataError
from .graph import (DIR_MASK, EDGE_MAGIC, HEADER, HEAVY, MARK_EMPTY, MARK_LABEL, MIRROR,
                    TOMBSTONE, VERTEX_MAGIC, EdgeHolder, Orientation, VertexHolder, read_stream)
from .meta import (Datatype, EntityType, Label, MetadataCatalog, PropertyType, SizeType,
                   check_limits)
from .query import ExplicitIndex, translate_key
from .rma import World
from .txn import Kind, Mode, Status, Transaction

_LABEL = struct.Struct("<I")


@dataclass
class EngineConfig:
    block_size: int = 512
    blocks_per_rank: int = 4096
    index_capacity: int = 1 << 16
    debug: bool = True


class Database:
    """One graph database spread over all ranks of ``world``.

    Build it on the host thread, or with :meth:`create` inside ``World.run``.
    """

    def __init__(self, world: World, config: EngineConfig | None = None):
        if world.in_run:
            raise GdiError("inside World.run use Database.create(world, config)")
        self.world = world
        self.config = config or EngineConfig()
        cfg = self.config
        self.pool = BlockPool(world, cfg.block_size, cfg.blocks_per_rank, cfg.debug)
        self.internal = DistributedHashTable(world, cfg.index_capacity, debug=cfg.debug)
        self.catalogs = [MetadataCatalog(self) for _ in range(world.nranks)]
        self.indexes: list[ExplicitIndex] = []
        self._rr = list(range(world.nranks))

    @classmethod
    def create(cls, world: World, config: EngineConfig | None = None) -> Database:
        """Collective constructor usable inside ``World.run``."""
        return world.shared(lambda: cls(world, config))

    @property
    def catalog(self) -> MetadataCatalog:
        return self.catalogs[self.world.rank]

    def _next_rank(self, rank: int) -> int:
        r = self._rr[rank]
        self._rr[rank] = (r + 1) % self.world.nranks
        return r

    # -- transactions ---------------------------------------------------------
    def start_transaction(self, mode: Mode | str = Mode.WRITE,
                          rank: int | None = None) -> Transaction:
        return Transaction(self, mode, Kind.LOCAL, rank)

    def start_collective_transaction(self, mode: Mode | str = Mode.READ) -> Transaction:
        return Transaction(self, mode, Kind.COLLECTIVE)

    # -- collective plumbing ----------------------------------------------------
    def _phase(self, fn: Callable[[int], object]) -> list:
        """Run ``fn(rank)`` for every rank; returns per-rank results."""
        w = self.world
        if w.in_run:
            out = w.allgather(fn(w.rank))
            return out
        outs = []
        for r in range(w.nranks):
            with w.as_rank(r):
                outs.append(fn(r))
        return outs

    def _sweep(self, rank: int, edit: Callable, mode: Mode = Mode.WRITE) -> list:
        """Apply ``edit(holder)`` to every local vertex and edge holder."""
        txn = Transaction(self, mode, Kind.LOCAL, rank)
        out = []
        for ref in self.pool.blocks_of_kind(rank, BlockKind.VERTEX):
            out.append(edit(txn.associate_vertex(ref)))
        for ref in self.pool.blocks_of_kind(rank, BlockKind.EDGE):
            out.append(edit(txn.associate_edge_holder(ref)))
        if txn.close(True) is not Status.COMMITTED:
            raise GdiError(f"metadata sweep on rank {rank} failed: {txn.error}")
        return out

    def _agree(self, items: list, what: str):
        first = items[0]
        if any(x != first for x in items[1:]):
            raise MetadataError(f"replicas disagree on {what}: {items}")
        return first

    # -- labels -------------------------------------------------------------------
    def create_label(self, name: str) -> Label:
        made = self._phase(lambda r: self.catalogs[r].add_label(name))
        self._agree([l.int_id for l in made], f"label {name!r}")
        return made[self.world.rank]

    def free_label(self, label: Label) -> None:
        """Remove ``label`` from the catalog and from every vertex and edge."""
        self._phase(lambda r: self.catalogs[r].label_from_id(label.int_id))
        lid = label.int_id
        payload = _LABEL.pack(lid)

        def edit(h):
            for i, (m, p) in enumerate(h.entries):
                if m == MARK_LABEL and p == payload:
                    h.entries[i] = (MARK_EMPTY, p)
                    h.dirty = True
            if isinstance(h, VertexHolder):
                for i, e in enumerate(h.lw):
                    if e[2] == lid:
                        h.lw[i] = (e[0], e[1], 0, e[3])
                        h.dirty = True

        self._phase(lambda r: self._sweep(r, edit) and None)
        self._phase(lambda r: self.catalogs[r].remove_label(label))
        self._phase(lambda r: r == 0 and self._forget_in_indexes(label_id=lid))

    def label_from_name(self, name: str) -> Label:
        return self.catalog.label_from_name(name)

    # -- property types -------------------------------------------------------------
    def create_property_type(self, name: str, entity=EntityType.SINGLE, datatype=Datatype.U64,
                             size_type=SizeType.FIXED, size_limit: int = 1) -> PropertyType:
        made = self._phase(lambda r: self.catalogs[r].add_property_type(
            name, entity, datatype, size_type, size_limit))
        self._agree([p.describe() for p in made], f"property type {name!r}")
        return made[self.world.rank]

    def property_type_from_name(self, name: str) -> PropertyType:
        return self.catalog.property_type_from_name(name)

    def free_property_type(self, ptype: PropertyType) -> None:
        self._phase(lambda r: self.catalogs[r].property_type_from_id(ptype.int_id))
        tid = ptype.int_id

        def edit(h):
            for i, (m, p) in enumerate(h.entries):
                if m == tid:
                    h.entries[i] = (MARK_EMPTY, p)
                    h.dirty = True

        self._phase(lambda r: self._sweep(r, edit) and None)
        self._phase(lambda r: self.catalogs[r].remove_property_type(ptype))
        self._phase(lambda r: r == 0 and self._forget_in_indexes(ptype_id=tid))

    def update_property_type(self, ptype: PropertyType, entity=None, size_type=None,
                             size_limit: int | None = None, default=None) -> None:
        """Change the limits of ``ptype``; stored values are padded if needed.

        Values shorter than a new fixed size are padded with ``default``
        (numeric types only). Changes that would drop or cut values fail on
        every rank before anything is modified.
        """
        tid = ptype.int_id
        self._phase(lambda r: self.catalogs[r].property_type_from_id(tid))
        entity = ptype.entity if entity is None else EntityType(entity)
        size_type = ptype.size_type if size_type is None else SizeType(size_type)
        size_limit = ptype.size_limit if size_limit is None else size_limit
        check_limits(size_type, size_limit)
        width = ptype.datatype.dtype.itemsize
        pad = None
        if default is not None:
            if not ptype.datatype.numeric:
                raise MetadataError("padding is only defined for numeric property types")
            scalar = PropertyType("default", 0, EntityType.SINGLE, ptype.datatype,
                                  SizeType.FIXED, 1)
            pad = scalar.encode(default)

        def fits(n):
            return (size_type is SizeType.NONE or (size_type is SizeType.MAX and n <= size_limit)
                    or n == size_limit)

        def scan(h):
            vals = [p for m, p in h.entries if m == tid]
            if entity is EntityType.SINGLE and len(vals) > 1:
                return False
            for p in vals:
                n = len(p) // width
                if not fits(n) and not (pad is not None and size_type is SizeType.FIXED
                                        and n < size_limit):
                    return False
            return True

        ok = self._phase(lambda r: all(self._sweep(r, scan, Mode.READ)))
        if not all(ok):
            raise MetadataError(f"new limits of {ptype.name!r} would lose stored values")

        def edit(h):
            for i, (m, p) in enumerate(h.entries):
                if m == tid and not fits(len(p) // width):
                    h.entries[i] = (m, p + pad * (size_limit - len(p) // width))
                    h.dirty = True

        if pad is not None:
            self._phase(lambda r: self._sweep(r, edit) and None)

        def apply(r):
            p = self.catalogs[r].property_type_from_id(tid)
            p.entity, p.size_type, p.size_limit = entity, size_type, int(size_limit)

        self._phase(apply)

    # -- indexes --------------------------------------------------------------------
    def _forget_in_indexes(self, label_id=None, ptype_id=None):
        for ix in self.indexes:
            ix.label_ids.discard(label_id)
            ix.ptype_ids.discard(ptype_id)
            if not ix.label_ids and not ix.ptype_ids:
                ix.freed = True
        self.indexes = [ix for ix in self.indexes if not ix.freed]

    def create_index(self, labels: Iterable[Label] = (), ptypes: Iterable[PropertyType] = (),
                     capacity: int | None = None) -> ExplicitIndex:
        """Explicit index over vertices carrying any of ``labels``/``ptypes``."""
        capacity = capacity or self.config.index_capacity
        labels, ptypes = list(labels), list(ptypes)
        ix = self.world.shared(lambda: ExplicitIndex(self, labels, ptypes, capacity))
        self._phase(lambda r: r == 0 and self.indexes.append(ix))
        self._phase(ix.populate_local)
        return ix

    def extend_index(self, ix: ExplicitIndex, labels: Iterable[Label] = (),
                     ptypes: Iterable[PropertyType] = ()) -> None:
        labels, ptypes = list(labels), list(ptypes)

        def grow(r):
            if r == 0:
                ix.label_ids.update(l.int_id for l in labels)
                ix.ptype_ids.update(p.int_id for p in ptypes)

        self._phase(grow)
        self._phase(ix.populate_local)

    def free_index(self, ix: ExplicitIndex) -> None:
        def drop(r):
            if r == 0:
                ix.freed = True
                self.indexes = [i for i in self.indexes if i is not ix]

        self._phase(drop)

    def _peek(self, ref: int):
        hdr, blocks, raws = read_stream(self.pool, ref)
        cls = VertexHolder if hdr[0] == VERTEX_MAGIC else EdgeHolder
        return cls.parse(None, hdr, blocks, raws)

    def _peek_membership(self, ref: int) -> tuple[set, set]:
        """Labels and property types of a vertex, read without locking."""
        h = self._peek(ref)
        return set(h.label_ids()), h.ptype_ids()

    # -- schema ---------------------------------------------------------------------
    def load_schema(self, doc) -> dict:
        """Create the labels and property types listed in a schema document.

        ``doc`` is a dict, a JSON string or a path to a JSON file.
        """
        if isinstance(doc, str) and not doc.lstrip().startswith("{"):
            with open(doc, encoding="utf-8") as fh:
                doc = json.load(fh)
        elif isinstance(doc, (str, bytes)):
            doc = json.loads(doc)
        jsonschema.validate(doc, load_json_schema("catalog.schema.json"))
        labels = {name: self.create_label(name) for name in doc.get("labels", [])}
        ptypes = {}
        for spec in doc.get("property_types", []):
            ptypes[spec["name"]] = self.create_property_type(
                spec["name"], spec.get("entity", "single"), spec["datatype"],
                spec.get("size", "fixed"), spec.get("limit", 1))
        return {"labels": labels, "property_types": ptypes}

    # -- inspection -----------------------------------------------------------------
    def vertex_refs(self) -> list[int]:
        out = []
        for r in range(self.world.nranks):
            out.extend(self.pool.blocks_of_kind(r, BlockKind.VERTEX))
        return out

    def app_ids(self) -> list[int]:
        """Sorted integer application ids of all committed vertices."""
        return sorted(self._peek(ref).app_id_int for ref in self.vertex_refs())

    def snapshot(self) -> dict:
        """Quiescent dump of the whole graph keyed by application id."""
        cat = self.catalog
        app = {}
        holders = {}
        for ref in self.vertex_refs():
            h = holders[ref] = self._peek(ref)
            app[ref] = h.app_id
        out = {}
        for ref, h in holders.items():
            props = {}
            for m, p in h.entries:
                if m > MARK_LABEL and cat.has_property_type_id(m):
                    pt = cat.property_type_from_id(m)
                    props.setdefault(pt.name, []).append(pt.decode(p))
            edges = []
            for nbr, eref, lid, flags in h.lw:
                if flags & TOMBSTONE:
                    continue
                labels = [lid] if lid else []
                eprops = {}
                if flags & HEAVY:
                    eh = self._peek(eref)
                    labels = eh.label_ids()
                    for m, p in eh.entries:
                        if m > MARK_LABEL and cat.has_property_type_id(m):
                            pt = cat.property_type_from_id(m)
                            eprops.setdefault(pt.name, []).append(pt.decode(p))
                edges.append((Orientation(flags & DIR_MASK).name, app.get(nbr),
                              tuple(sorted(cat.label_from_id(i).name for i in labels)),
                              tuple(sorted((k, tuple(v)) for k, v in eprops.items()))))
            out[h.app_id] = {
                "labels": sorted(cat.label_from_id(i).name for i in h.label_ids()),
                "props": {k: sorted(v, key=repr) for k, v in props.items()},
                "edges": sorted(edges, key=repr),
            }
        return out

    def audit(self) -> list[str]:
        """Check structural invariants at a quiescent point; returns violations."""
        problems: list[str] = []
        pool = self.pool
        p = self.world.nranks
        for r in range(p):
            for i, word in enumerate(pool.lock_words(r).tolist()):
                write, readers, _ = unpack_lock(word)
                if write or readers:
                    problems.append(f"lock of block {r}:{i} left held ({word:#x})")
        reachable: set[int] = set()
        free_refs: set[int] = set()
        live_vertices: dict[int, VertexHolder] = {}
        live_edges: dict[int, EdgeHolder] = {}
        for r in range(p):
            try:
                free_refs.update((r << 48) | i * pool.block_size for i in pool.free_list(r))
            except GdiError as exc:
                problems.append(str(exc))
            for kind, store in ((BlockKind.VERTEX, live_vertices), (BlockKind.EDGE, live_edges)):
                for ref in pool.blocks_of_kind(r, kind):
                    hdr = HEADER.unpack_from(pool.read_block(ref, 0, HEADER.size))
                    want = VERTEX_MAGIC if kind is BlockKind.VERTEX else EDGE_MAGIC
                    if hdr[0] != want:
                        problems.append(f"{format_ref(ref)} tagged {kind.name} has bad magic")
                        continue
                    h = store[ref] = self._peek(ref)
                    for b in h.blocks:
                        if b in reachable:
                            problems.append(f"block {format_ref(b)} owned twice")
                        reachable.add(b)
                        if b != ref and pool.kind_of(b) is not BlockKind.OVERFLOW:
                            problems.append(f"overflow block {format_ref(b)} mis-tagged")
        if reachable & free_refs:
            problems.append(f"{len(reachable & free_refs)} live blocks on a free list")
        if len(reachable) + len(free_refs) != pool.capacity:
            problems.append(f"block leak: {len(reachable)} live + {len(free_refs)} free "
                            f"!= capacity {pool.capacity}")
        if pool.debug and pool.held_blocks() != reachable:
            problems.append("granted-block ledger differs from reachable blocks")
        # referential integrity: every edge slot has a live far end and a mirror
        slots: Counter = Counter()
        for ref, h in live_vertices.items():
            for nbr, eref, lid, flags in h.lw:
                if flags & TOMBSTONE:
                    continue
                if nbr not in live_vertices:
                    problems.append(f"edge of {format_ref(ref)} points at dead {format_ref(nbr)}")
                if flags & HEAVY and eref not in live_edges:
                    problems.append(f"heavy edge of {format_ref(ref)} has no holder")
                slots[(ref, nbr, eref, lid, flags & DIR_MASK)] += 1
        for (u, v, eref, lid, d), count in slots.items():
            mirror = (v, u, eref, lid, int(MIRROR[Orientation(d)]))
            if slots.get(mirror, 0) != count:
                problems.append(f"edge {format_ref(u)}->{format_ref(v)} lacks a mirror")
        for ref, eh in live_edges.items():
            if eh.origin not in live_vertices or eh.target not in live_vertices:
                problems.append(f"edge holder {format_ref(ref)} has a dead endpoint")
        # internal index
        try:
            self.internal.audit()
        except GdiError as exc:
            problems.append(f"internal index: {exc}")
        keys = {}
        for k, v in self.internal.items():
            keys.setdefault(k, set()).add(v)
        expected = {}
        for ref, h in live_vertices.items():
            if not h.app_id:
                continue
            expected.setdefault(translate_key(h.app_id), set()).add(ref)
            for lid in h.label_ids():
                expected.setdefault(translate_key(h.app_id, lid), set()).add(ref)
        if keys != expected:
            problems.append(f"internal index has {len(keys)} keys, expected {len(expected)}")
        # explicit indexes
        for ix in self.indexes:
            try:
                ix.table.audit()
            except GdiError as exc:
                problems.append(f"index: {exc}")
            have = {v for _, v in ix.table.items()}
            want = {ref for ref, h in live_vertices.items()
                    if ix.matches(h.label_ids(), h.ptype_ids())}
            if have != want:
                problems.append(f"index has {len(have)} entries, scan finds {len(want)}")
        images = {c.serialize() for c in self.catalogs}
        if len(images) != 1:
            problems.append("metadata replicas differ")
        return problems


def load_json_schema(name: str) -> dict:
    return json.loads(resources.files("gdi").joinpath("schemas", name).read_text("utf-8"))


def app_id_bytes(value) -> bytes:
    """Canonical application-id bytes: integers as u64 LE, strings as UTF-8."""
    if isinstance(value, (bytes, bytearray)):
        return bytes(value)
    if isinstance(value, int):
        return value.to_bytes(8, "little")
    s = str(value)
    return int(s).to_bytes(8, "little") if s.isdigit() else s.encode("utf-8")
