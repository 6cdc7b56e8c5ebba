"""Transactions: strict two-phase locking with no-wait conflict handling.

A local transaction belongs to one rank. Associating a vertex or edge takes
its lock (read lock in read transactions, write lock in write transactions)
and the lock is held until the transaction closes. A lock that is busy, or a
block whose incarnation moved on, dooms the transaction immediately.

Collective transactions are replicated on every rank and take no locks:
participants promise quiescence, and in write mode each rank only modifies
objects stored on its own rank. Closing one is collective and commits only
if every rank votes to commit.
"""
from __future__ import annotations

import enum
import time
from typing import TYPE_CHECKING

from .blocks import NULL_REF, BlockKind, LockMode, LockResult, format_ref, ref_rank
from .errors import (BlockError, DuplicateAppId, GdiError, LockConflict, NotFoundError,
                     ResourceError, StaleReference, TransactionCritical, TransactionError)
from .graph import (DIR_MASK, EDGE_MAGIC, HEAVY, MARK_LABEL, MAX_APP_ID, MIRROR, TOMBSTONE,
                    VERTEX_MAGIC, Edge, EdgeHolder, EdgeUid, Orientation, VertexHolder,
                    blocks_needed, encode_entries, encode_stream, read_stream)
from .meta import Label
from .query import translate_key

if TYPE_CHECKING:
    from .database import Database


class Mode(enum.Enum):
    READ = "read"
    WRITE = "write"


class Kind(enum.Enum):
    LOCAL = "local"
    COLLECTIVE = "collective"


class Status(enum.Enum):
    OPEN = "open"
    COMMITTED = "committed"
    ABORTED = "aborted"
    FAILED = "failed"


_HOLDER_KINDS = {VertexHolder: (BlockKind.VERTEX, VERTEX_MAGIC),
                 EdgeHolder: (BlockKind.EDGE, EDGE_MAGIC)}


class Transaction:
    """Unit of work on the graph data; see the module docstring for rules."""

    def __init__(self, db: Database, mode: Mode | str = Mode.WRITE,
                 kind: Kind | str = Kind.LOCAL, rank: int | None = None):
        self.db = db
        self.pool = db.pool
        self.world = db.world
        self.rank = self.world.rank if rank is None else rank
        self.mode = Mode(mode)
        self.kind = Kind(kind)
        self.catalog = db.catalogs[self.rank]
        self.vertices: dict[int, VertexHolder] = {}
        self.edges: dict[int, EdgeHolder] = {}
        self.new_blocks: list[int] = []
        self.locks: dict[int, LockMode] = {}
        self.status = Status.OPEN
        self.error: BaseException | None = None
        self._expected: dict[int, int] = {}
        self._inserted: list[tuple[int, int]] = []

    def __repr__(self):
        return (f"Transaction({self.kind.value}, {self.mode.value}, rank={self.rank}, "
                f"{self.status.value})")

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if self.status in (Status.OPEN, Status.FAILED):
            self.close(commit=exc_type is None)
        return False

    @property
    def collective(self) -> bool:
        return self.kind is Kind.COLLECTIVE

    @property
    def _lock_mode(self) -> LockMode:
        return LockMode.WRITE if self.mode is Mode.WRITE else LockMode.READ

    # -- guards ---------------------------------------------------------------
    def _check_open(self):
        if self.status is Status.FAILED:
            raise TransactionError(f"transaction failed earlier: {self.error}")
        if self.status is not Status.OPEN:
            raise TransactionError("transaction is closed")

    def _check_write_mode(self):
        self._check_open()
        if self.mode is not Mode.WRITE:
            raise TransactionError("read-only transaction cannot modify the graph")

    def _check_writable(self, ref: int):
        self._check_write_mode()
        if self.collective and ref_rank(ref) != self.rank:
            raise TransactionError(
                f"collective transaction on rank {self.rank} cannot modify {format_ref(ref)}")

    def _fail(self, exc: TransactionCritical):
        self.status = Status.FAILED
        self.error = exc
        raise exc

    # -- locking and fetching -------------------------------------------------------
    def _lock(self, ref: int, expected: int | None = None) -> bool:
        """Take this transaction's lock on ``ref``; True if newly taken."""
        if self.collective or ref in self.locks:
            return False
        result = self.pool.try_lock(ref, self._lock_mode, expected)
        if result is LockResult.BUSY:
            self._fail(LockConflict(f"{format_ref(ref)} is locked by another transaction"))
        if result is LockResult.STALE:
            self._fail(StaleReference(f"{format_ref(ref)} was deleted (incarnation changed)"))
        self.locks[ref] = self._lock_mode
        return True

    def _unlock(self, ref: int):
        mode = self.locks.pop(ref, None)
        if mode is not None:
            self.pool.unlock(ref, mode)

    def _fetch(self, ref: int, cls, expected: int | None):
        try:
            self.pool._index(ref)
        except BlockError as exc:
            raise NotFoundError(str(exc)) from None
        kind, magic = _HOLDER_KINDS[cls]
        fresh = self._lock(ref, expected)
        if self.pool.kind_of(ref) is not kind:
            if fresh:
                self._unlock(ref)
            self._fail(StaleReference(f"{format_ref(ref)} holds no live {kind.name.lower()}"))
        hdr, blocks, raws = read_stream(self.pool, ref)
        if hdr[0] != magic:
            raise GdiError(f"corrupt holder at {format_ref(ref)}")
        h = cls.parse(self, hdr, blocks, raws)
        if self.mode is Mode.WRITE and (not self.collective or ref_rank(ref) == self.rank):
            h.dirty = h.compact()
        return h

    def associate_vertex(self, ref: int, incarnation: int | None = None) -> VertexHolder:
        """Holder of vertex ``ref``; associating twice returns the same object."""
        self._check_open()
        h = self.vertices.get(ref)
        if h is not None:
            if h.deleted:
                raise NotFoundError(f"vertex {format_ref(ref)} was deleted in this transaction")
            return h
        expected = self._expected.get(ref) if incarnation is None else incarnation
        h = self._fetch(ref, VertexHolder, expected)
        self.vertices[ref] = h
        return h

    def associate_edge_holder(self, ref: int) -> EdgeHolder:
        self._check_open()
        h = self.edges.get(ref)
        if h is None:
            h = self.edges[ref] = self._fetch(ref, EdgeHolder, None)
        return h

    def translate_vertex_id(self, app_id: bytes, label: Label | None = None) -> int:
        """Internal reference of the vertex with application ID ``app_id``."""
        self._check_open()
        app_id = bytes(app_id)
        found, ref = self.db.internal.lookup(translate_key(app_id, label))
        if not found:
            raise NotFoundError(f"no vertex with application id {app_id!r}")
        if ref not in self.vertices:
            self._expected[ref] = self.pool.incarnation(ref)
        h = self.associate_vertex(ref)
        if h.app_id != app_id or (label is not None and label.int_id not in h.label_ids()):
            self._fail(StaleReference(f"vertex {app_id!r} moved while being translated"))
        return ref

    def vertex(self, app_id: bytes, label: Label | None = None) -> VertexHolder:
        """Translate and associate in one step."""
        return self.associate_vertex(self.translate_vertex_id(app_id, label))

    # -- creation ---------------------------------------------------------------
    def _acquire(self, rank: int, spill: bool = True) -> int:
        p = self.world.nranks
        targets = [(rank + i) % p for i in range(p)] if spill else [rank]
        for t in targets:
            ref = self.pool.acquire_block(t)
            if ref != NULL_REF:
                self.new_blocks.append(ref)
                return ref
        raise ResourceError("block pool exhausted; raise blocks_per_rank")

    def _new_primary(self, rank: int, block: int | None) -> int:
        if block is None:
            block = self._acquire(rank, spill=not self.collective)
        else:
            self.new_blocks.append(block)
        if not self.collective:
            # a reader holding a stale reference may briefly hold the lock
            for _ in range(100):
                if self.pool.try_lock(block, LockMode.WRITE) is LockResult.ACQUIRED:
                    self.locks[block] = LockMode.WRITE
                    break
                time.sleep(0)
            else:
                self._fail(LockConflict(f"fresh block {format_ref(block)} stays locked"))
        return block

    def create_vertex(self, app_id: bytes = b"", rank: int | None = None,
                      _block: int | None = None) -> VertexHolder:
        """New vertex, placed round-robin over ranks (own rank if collective)."""
        self._check_write_mode()
        app_id = bytes(app_id)
        if len(app_id) > MAX_APP_ID:
            raise ValueError(f"application ids are limited to {MAX_APP_ID} bytes")
        if self.collective:
            rank = self.rank
        elif rank is None:
            rank = self.db._next_rank(self.rank)
        ref = self._new_primary(rank, _block)
        h = VertexHolder(self, ref, app_id)
        h.new = h.dirty = True
        h.incarnation = self.pool.incarnation(ref)
        self.vertices[ref] = h
        return h

    def _own(self, h):
        if h.txn is not self:
            raise TransactionError(f"{h!r} belongs to another transaction")

    # -- edges --------------------------------------------------------------
    def create_edge(self, origin: VertexHolder, target: VertexHolder, directed: bool = True,
                    label: Label | None = None) -> Edge:
        """Lightweight edge origin -> target (or undirected); returns its handle."""
        self._own(origin)
        self._own(target)
        origin._mutable()
        target._mutable()
        lid = 0
        if label is not None:
            if not self.catalog.has_label_id(label.int_id):
                raise NotFoundError(f"label {label.name!r} is not in the catalog")
            lid = label.int_id
        d = Orientation.OUTGOING if directed else Orientation.UNDIRECTED
        i = origin._append_edge(target.ref, d, lid)
        target._append_edge(origin.ref, MIRROR[d], lid)
        return Edge(self, origin, i)

    def edge(self, uid: EdgeUid) -> Edge:
        base = self.associate_vertex(uid.vertex)
        if not 0 <= uid.offset < len(base.lw):
            raise NotFoundError(f"edge offset {uid.offset} out of range")
        return Edge(self, base, uid.offset)

    def edges_of(self, holder: VertexHolder, orientation: Orientation = Orientation.ALL,
                 constraint=None) -> list[Edge]:
        return [Edge(self, holder, u.offset) for u in holder.edge_uids(orientation, constraint)]

    def _edge_matches(self, holder: VertexHolder, offset: int, constraint) -> bool:
        return constraint.evaluate(Edge(self, holder, offset), self.catalog)

    def _mirror(self, edge: Edge) -> tuple[VertexHolder, int]:
        nbr, eref, label, flags = edge._entry
        base = edge.base
        other = base if nbr == base.ref else self.associate_vertex(nbr)
        exclude = edge.offset if other is base else -1
        return other, other._find_mirror(base.ref, Orientation(flags & DIR_MASK), label, eref,
                                         exclude)

    @staticmethod
    def _set_entry(holder: VertexHolder, offset: int, **changes):
        nbr, eref, label, flags = holder.lw[offset]
        holder.lw[offset] = (changes.get("nbr", nbr), changes.get("edge", eref),
                             changes.get("label", label), changes.get("flags", flags))
        holder.dirty = True

    def _edge_add_label(self, edge: Edge, label: Label):
        _, eref, lid, flags = edge._entry
        if flags & HEAVY:
            self.associate_edge_holder(eref).add_label(label)
            return
        if lid == label.int_id:
            raise GdiError(f"edge already has label {label.name!r}")
        if not self.catalog.has_label_id(label.int_id):
            raise NotFoundError(f"label {label.name!r} is not in the catalog")
        if lid:
            self._escalate(edge).add_label(label)
            return
        other, j = self._mirror(edge)
        edge.base._mutable()
        other._mutable()
        self._set_entry(edge.base, edge.offset, label=label.int_id)
        self._set_entry(other, j, label=label.int_id)

    def _edge_remove_label(self, edge: Edge, label: Label):
        _, eref, lid, flags = edge._entry
        if flags & HEAVY:
            self.associate_edge_holder(eref).remove_label(label)
            return
        if lid != label.int_id:
            raise NotFoundError(f"edge has no label {label.name!r}")
        other, j = self._mirror(edge)
        edge.base._mutable()
        other._mutable()
        self._set_entry(edge.base, edge.offset, label=0)
        self._set_entry(other, j, label=0)

    def _escalate(self, edge: Edge) -> EdgeHolder:
        """Move a lightweight edge into its own holder (done at most once)."""
        nbr, eref, lid, flags = edge._entry
        if flags & HEAVY:
            return self.associate_edge_holder(eref)
        base = edge.base
        other, j = self._mirror(edge)
        base._mutable()
        other._mutable()
        origin, target = edge.vertices()
        d = Orientation(flags & DIR_MASK)
        ref = self._new_primary(ref_rank(base.ref), None)
        eh = EdgeHolder(self, ref, origin, target,
                        Orientation.UNDIRECTED if d is Orientation.UNDIRECTED
                        else Orientation.OUTGOING)
        eh.new = eh.dirty = True
        eh.incarnation = self.pool.incarnation(ref)
        if lid:
            eh.entries.append((MARK_LABEL, lid.to_bytes(4, "little")))
        self.edges[ref] = eh
        self._set_entry(base, edge.offset, edge=ref, label=0, flags=int(d) | HEAVY)
        self._set_entry(other, j, edge=ref, label=0,
                        flags=(other.lw[j][3] & DIR_MASK) | HEAVY)
        return eh

    def free_edge(self, edge: Edge) -> None:
        self._own(edge.base)
        _, eref, _, flags = edge._entry
        other, j = self._mirror(edge)
        edge.base._mutable()
        other._mutable()
        self._set_entry(edge.base, edge.offset, flags=flags | TOMBSTONE)
        self._set_entry(other, j, flags=other.lw[j][3] | TOMBSTONE)
        if flags & HEAVY:
            eh = self.associate_edge_holder(eref)
            eh._mutable()
            eh.deleted = True

    def free_vertex(self, holder: VertexHolder) -> None:
        """Delete a vertex together with all its incident edges."""
        self._own(holder)
        holder._mutable()
        for i, (nbr, eref, _, flags) in enumerate(holder.lw):
            if flags & TOMBSTONE:
                continue
            if nbr != holder.ref:
                other, j = self._mirror(Edge(self, holder, i))
                other._mutable()
                self._set_entry(other, j, flags=other.lw[j][3] | TOMBSTONE)
            self._set_entry(holder, i, flags=flags | TOMBSTONE)
            if flags & HEAVY:
                eh = self.associate_edge_holder(eref)
                if not eh.deleted:
                    eh._mutable()
                    eh.deleted = True
        holder.deleted = True

    def free_edge_holder(self, holder: EdgeHolder) -> None:
        self._own(holder)
        origin = self.associate_vertex(holder.origin)
        for u in origin.edge_uids():
            if origin.lw[u.offset][1] == holder.ref:
                self.free_edge(Edge(self, origin, u.offset))
                return
        raise GdiError(f"no vertex slot refers to {holder!r}")

    # -- scans ------------------------------------------------------------------
    def local_vertices(self) -> list[int]:
        """Committed vertices stored on this rank, plus ones created here."""
        self._check_open()
        refs = set(self.pool.blocks_of_kind(self.rank, BlockKind.VERTEX))
        for ref, h in self.vertices.items():
            if ref_rank(ref) == self.rank and h.new:
                refs.add(ref)
        return sorted(r for r in refs if not (r in self.vertices and self.vertices[r].deleted))

    # -- commit -----------------------------------------------------------------
    def commit(self) -> Status:
        return self.close(True)

    def abort(self) -> Status:
        return self.close(False)

    def close(self, commit: bool = True) -> Status:
        """Finish the transaction; returns COMMITTED or ABORTED.

        A failed transaction always aborts. Closing a collective transaction
        is collective, and it commits only if every rank commits.
        """
        if self.status in (Status.COMMITTED, Status.ABORTED):
            raise TransactionError("transaction already closed")
        ok = commit and self.status is Status.OPEN
        plan = None
        if ok:
            try:
                plan = self._prepare()
            except (TransactionCritical, ResourceError) as exc:
                self.error = exc
                ok = False
        if self.collective:
            ok = bool(self.world.allreduce(int(ok), "min"))
        if ok:
            self._apply(plan)
            self.status = Status.COMMITTED
        else:
            self._rollback()
            self.status = Status.ABORTED
        for ref in list(self.locks):
            self._unlock(ref)
        if self.collective:
            self.world.barrier()
        self.vertices.clear()
        self.edges.clear()
        self.new_blocks.clear()
        self._inserted.clear()
        self._expected.clear()
        return self.status

    def _holders(self):
        yield from self.vertices.values()
        yield from self.edges.values()

    def _prepare(self):
        """Reserve everything that can fail before any shared state changes."""
        bs = self.pool.block_size
        images = []
        for h in self._holders():
            if h.deleted or not (h.dirty or h.new):
                continue
            ext, lw, ent = h._ext(), h._lw_raw(), encode_entries(h.entries)
            k = blocks_needed(len(ext) + len(lw) + len(ent), bs)
            blocks = list(h.blocks[:k])
            home = ref_rank(h.ref)
            while len(blocks) < k:
                blocks.append(self._acquire(home, spill=not self.collective))
            images.append((h, blocks, encode_stream(h.magic, h.incarnation, blocks, ext, lw, ent)))
        internal = self.db.internal
        for h in self.vertices.values():
            if h.new and not h.deleted and h.app_id:
                key = translate_key(h.app_id)
                if not internal.insert_unique(key, h.ref):
                    self._fail(DuplicateAppId(f"application id {h.app_id!r} already exists"))
                self._inserted.append((key, h.ref))
        return images

    def _apply(self, images):
        pool, bs = self.pool, self.pool.block_size
        surplus = []
        for h, blocks, stream in images:
            old = h.orig_blocks
            for i, ref in enumerate(blocks):
                chunk = stream[i * bs:(i + 1) * bs].ljust(bs, b"\0")
                if i >= len(old) or h.blocks[i] != ref or old[i] != chunk:
                    pool.write_block(ref, chunk, flush=False)
            surplus.extend(h.blocks[len(blocks):])
        pool.data.flush_all()
        for h, blocks, _ in images:
            if h.new:
                pool.set_kind(h.ref, BlockKind.VERTEX if isinstance(h, VertexHolder)
                              else BlockKind.EDGE, flush=False)
            for ref in blocks[len(h.blocks):]:
                pool.set_kind(ref, BlockKind.OVERFLOW, flush=False)
            h.blocks = blocks
        pool.kinds.flush_all()
        self._update_keys_and_indexes()
        for h in list(self._holders()):
            if h.deleted:
                self._destroy(h)
        for ref in surplus:
            pool.release_block(ref)

    def _update_keys_and_indexes(self):
        internal = self.db.internal
        indexes = [ix for ix in self.db.indexes if not ix.freed]
        for h in self.vertices.values():
            if h.new and h.deleted:
                continue
            old_l, old_p = (set(), set()) if h.new else (h.orig_label_ids, h.orig_ptype_ids)
            new_l, new_p = (set(), set()) if h.deleted else (set(h.label_ids()), h.ptype_ids())
            if h.app_id:
                for lid in old_l - new_l:
                    internal.delete(translate_key(h.app_id, lid), h.ref)
                for lid in new_l - old_l:
                    internal.insert(translate_key(h.app_id, lid), h.ref)
                if h.deleted:
                    internal.delete(translate_key(h.app_id), h.ref)
            for ix in indexes:
                was = not h.new and ix.matches(old_l, old_p)
                now = ix.matches(new_l, new_p)
                if was and not now:
                    ix.remove(h.ref)
                elif now and not was:
                    ix.insert(h.ref)

    def _destroy(self, h):
        """Retire a deleted holder: invalidate, bump incarnation, free blocks."""
        pool = self.pool
        if not h.new:
            for ref in h.blocks:
                pool.set_kind(ref, BlockKind.FREE, flush=False)
            pool.kinds.flush_all()
            if self.collective:
                if pool.try_lock(h.ref, LockMode.WRITE) is not LockResult.ACQUIRED:
                    raise GdiError(f"collective delete of {h!r} found it locked")
                self.locks[h.ref] = LockMode.WRITE
            pool.bump_incarnation(h.ref)
        self._unlock(h.ref)
        for ref in h.blocks:
            pool.release_block(ref)

    def _rollback(self):
        for key, ref in self._inserted:
            self.db.internal.delete(key, ref)
        for ref in self.new_blocks:
            self._unlock(ref)
            self.pool.release_block(ref)
