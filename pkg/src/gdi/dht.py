"""Lock-free, sharded, chained distributed hash table.

The table window holds one 8-byte chain head per bucket. Entries live in a
per-rank heap (a :class:`~gdi.blocks.BlockPool` of 32-byte blocks) and carry
``key | value | next``. All three operations use only gets, puts, flushes and
CAS on remote memory.

Deletion takes two CASes. The first points the victim's ``next`` at the
victim itself, which tells concurrent readers to restart; the second swings
the predecessor's link past the victim. If the second CAS loses (the
predecessor is being deleted too), the deleter keeps the victim's successor
and retries the unlink from a fresh traversal.

Entries are recycled without deferred reclamation. A traversal that reaches
an entry whose key belongs to another bucket has followed a recycled block
and restarts.
"""
from __future__ import annotations

import hashlib
import math
import struct
import time

from .blocks import NULL_REF, BlockPool, ref_offset, ref_rank
from .errors import GdiError, ResourceError
from .rma import World

ENTRY_SIZE = 32
NEXT_FIELD = 16
MAX_RETRIES = 10_000
_ENTRY = struct.Struct("<QQQ")
_U64 = struct.Struct("<Q")
_M64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _M64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _M64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _M64
    return x ^ (x >> 31)


def hash_bytes(*parts: bytes) -> int:
    """Stable 64-bit digest of a sequence of byte strings."""
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        h.update(len(p).to_bytes(4, "little"))
        h.update(p)
    return int.from_bytes(h.digest(), "little")


class _Restart(Exception):
    pass


class DistributedHashTable:
    """Maps u64 keys to u64 values across all ranks.

    ``placement="hash"`` spreads buckets over ranks by key hash;
    ``placement="key_rank"`` keeps every key on the rank encoded in its top
    16 bits (keys are global references), which makes per-rank scans local.
    """

    def __init__(self, world: World, capacity: int, buckets: int | None = None,
                 placement: str = "hash", debug: bool = True):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        if placement not in ("hash", "key_rank"):
            raise ValueError(f"unknown placement {placement!r}")
        p = world.nranks
        self.world = world
        self.capacity = capacity
        self.placement = placement
        self.buckets_per_rank = max(1, math.ceil((buckets or capacity) / p))
        self.n_buckets = self.buckets_per_rank * p
        heap_per_rank = math.ceil(capacity / p * 1.25) + 64
        self.table = world.win_alloc(8 * self.buckets_per_rank)
        self.heap = BlockPool(world, block_size=ENTRY_SIZE, blocks_per_rank=heap_per_rank,
                              debug=debug)
        ranks = [world.rank] if world.in_run else range(p)
        for r in ranks:
            self.table.local_view(r)[:] = b"\xff" * (8 * self.buckets_per_rank)
        if world.in_run:
            world.barrier()
        self.retry_high_water = 0

    # -- addressing ---------------------------------------------------------
    def bucket_of(self, key: int) -> tuple[int, int]:
        """(rank, byte offset) of the chain head for ``key``."""
        h = splitmix64(key)
        if self.placement == "key_rank":
            return ref_rank(key), (h % self.buckets_per_rank) * 8
        b = h % self.n_buckets
        return b // self.buckets_per_rank, (b % self.buckets_per_rank) * 8

    def _read_entry(self, ptr: int) -> tuple[int, int, int]:
        return _ENTRY.unpack(self.heap.data.get(ref_rank(ptr), ref_offset(ptr), 24))

    def _link_cas(self, link, compare, new):
        win, rank, off = link
        return win.atomic_cas(rank, off, compare, new)

    def _next_link(self, ptr):
        return self.heap.data, ref_rank(ptr), ref_offset(ptr) + NEXT_FIELD

    def _backoff(self, attempt):
        if attempt >= MAX_RETRIES:
            raise GdiError(f"hash table operation exceeded {MAX_RETRIES} retries")
        if attempt > self.retry_high_water:
            self.retry_high_water = attempt
        time.sleep(0 if attempt < 64 else 1e-5)

    def _alloc(self, home: int) -> int:
        p = self.world.nranks
        for i in range(p):
            ref = self.heap.acquire_block((home + i) % p)
            if ref != NULL_REF:
                return ref
        raise ResourceError(f"hash table heap exhausted (capacity {self.capacity})")

    # -- operations -----------------------------------------------------------
    def insert(self, key: int, value: int) -> int:
        """Prepend ``key -> value`` to its chain; returns the entry address."""
        rank, off = self.bucket_of(key)
        entry = self._alloc(rank)
        erank, eoff = ref_rank(entry), ref_offset(entry)
        data = self.heap.data
        head = self.table.atomic_get(rank, off)
        attempt = 0
        while True:
            data.put(erank, eoff, _ENTRY.pack(key, value, head))
            data.flush(erank)
            prior = self.table.atomic_cas(rank, off, head, entry)
            if prior == head:
                return entry
            head = prior
            attempt += 1
            if attempt >= MAX_RETRIES:
                raise GdiError("insert exceeded retry budget")

    def insert_unique(self, key: int, value: int) -> bool:
        """Insert unless an older entry holds ``key``; True iff this call won.

        Inserts always go to the chain head, so chain order is insertion
        order. After inserting, any entry with the same key further down the
        chain predates ours and wins; we then retract our entry.
        """
        mine = self.insert(key, value)
        rank, off = self.bucket_of(key)
        attempt = 0
        while True:
            ptr = self.table.atomic_get(rank, off)
            seen_mine = False
            try:
                while ptr != NULL_REF:
                    k, _, nxt = self._read_entry(ptr)
                    if nxt == ptr or self.bucket_of(k) != (rank, off):
                        raise _Restart
                    if ptr == mine:
                        seen_mine = True
                    elif seen_mine and k == key:
                        self.delete(key, value, entry=mine)
                        return False
                    ptr = nxt
            except _Restart:
                attempt += 1
                self._backoff(attempt)
                continue
            if not seen_mine:
                raise GdiError("freshly inserted entry vanished from its chain")
            return True

    def lookup(self, key: int) -> tuple[bool, int | None]:
        rank, off = self.bucket_of(key)
        attempt = 0
        while True:
            ptr = self.table.atomic_get(rank, off)
            try:
                while ptr != NULL_REF:
                    k, v, nxt = self._read_entry(ptr)
                    if nxt == ptr or self.bucket_of(k) != (rank, off):
                        raise _Restart
                    if k == key:
                        return True, v
                    ptr = nxt
                return False, None
            except _Restart:
                attempt += 1
                self._backoff(attempt)

    def delete(self, key: int, value: int | None = None, entry: int | None = None) -> bool:
        """Unlink one entry with ``key``; True iff this call removed it.

        ``value`` (or the entry address) narrows the match when a key may
        transiently appear more than once.
        """
        rank, off = self.bucket_of(key)
        bucket = (self.table, rank, off)
        attempt = 0
        pending = None
        while True:
            if attempt:
                self._backoff(attempt)
            attempt += 1
            if pending is not None:
                victim, succ = pending
                link = self._find_link_to(bucket, victim)
                if link is None:
                    continue
                if self._link_cas(link, victim, succ) == victim:
                    self.heap.release_block(victim)
                    return True
                continue
            link = bucket
            ptr = self.table.atomic_get(rank, off)
            restart = False
            while ptr != NULL_REF:
                k, v, nxt = self._read_entry(ptr)
                if nxt == ptr or self.bucket_of(k) != (rank, off):
                    restart = True
                    break
                if k == key and (value is None or v == value) and (entry is None or ptr == entry):
                    if self._link_cas(self._next_link(ptr), nxt, ptr) != nxt:
                        restart = True
                        break
                    if self._link_cas(link, ptr, nxt) == ptr:
                        self.heap.release_block(ptr)
                        return True
                    pending = (ptr, nxt)
                    break
                link = self._next_link(ptr)
                ptr = nxt
            if not restart and pending is None:
                return False

    def _find_link_to(self, bucket, victim):
        """Location currently pointing at ``victim``, or None to retry."""
        link = bucket
        win, rank, off = bucket
        ptr = win.atomic_get(rank, off)
        while ptr != NULL_REF:
            if ptr == victim:
                return link
            k, _, nxt = self._read_entry(ptr)
            if nxt == ptr or self.bucket_of(k) != (rank, off):
                return None
            link = self._next_link(ptr)
            ptr = nxt
        raise GdiError("marked entry became unreachable before it was unlinked")

    # -- scans (quiescent) ----------------------------------------------------
    def _chain(self, rank, off):
        ptr = self.table.atomic_get(rank, off)
        seen = set()
        while ptr != NULL_REF:
            if ptr in seen:
                raise GdiError("cycle in hash table chain")
            seen.add(ptr)
            k, v, nxt = self._read_entry(ptr)
            yield ptr, k, v, nxt == ptr
            if nxt == ptr:
                return
            ptr = nxt

    def local_items(self, rank: int | None = None) -> list[tuple[int, int]]:
        """(key, value) pairs stored in ``rank``'s buckets."""
        rank = self.world.rank if rank is None else rank
        heads = self.table.get(rank, 0, 8 * self.buckets_per_rank)
        out = []
        for i in range(self.buckets_per_rank):
            if heads[8 * i:8 * i + 8] == b"\xff" * 8:
                continue
            for _, k, v, marked in self._chain(rank, 8 * i):
                if not marked:
                    out.append((k, v))
        return out

    def items(self) -> list[tuple[int, int]]:
        out = []
        for r in range(self.world.nranks):
            out.extend(self.local_items(r))
        return out

    def __len__(self):
        return len(self.items())

    def audit(self) -> int:
        """Check chains against the heap at a quiescent point; return live count.

        Every reachable entry must be granted by the heap (never on a free
        list), no entry may be marked, and with debug bookkeeping on every
        granted entry must be reachable.
        """
        reachable = set()
        for r in range(self.world.nranks):
            for i in range(self.buckets_per_rank):
                for ptr, _, _, marked in self._chain(r, 8 * i):
                    if marked:
                        raise GdiError("marked entry left in a chain at quiescence")
                    if ptr in reachable:
                        raise GdiError("entry reachable from two chains")
                    reachable.add(ptr)
        for r in range(self.world.nranks):
            bs = self.heap.block_size
            for idx in self.heap.free_list(r):
                if (r << 48 | idx * bs) in reachable:
                    raise GdiError("heap free list hands out a reachable entry")
        if self.heap.debug and self.heap.held_blocks() != reachable:
            raise GdiError("heap entries leaked or double counted")
        return len(reachable)
