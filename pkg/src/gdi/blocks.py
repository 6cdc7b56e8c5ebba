"""Blocked graph data layout: a fixed-size block pool on every rank.

Three windows back the pool. The *data* window holds the blocks, the *usage*
window is a singly linked list of 4-byte "next free block" indices, and the
*system* window holds one lock word per block followed by the tagged head of
the free list. A fourth one-byte-per-block window records what a block
currently holds so a rank can enumerate its own vertices.

Blocks are addressed by 64-bit global references: the top 16 bits name the
rank, the low 48 bits the byte offset of the block in that rank's data window.
"""
from __future__ import annotations

import enum
import struct
import threading

import numpy as np

from .errors import BlockError
from .rma import World

RANK_BITS = 16
OFFSET_BITS = 48
OFFSET_MASK = (1 << OFFSET_BITS) - 1
NULL_REF = (1 << 64) - 1

NULL_INDEX = 0xFFFFFFFF
_U32 = struct.Struct("<I")

WRITE_BIT = 1 << 63
READER_SHIFT = 32
READER_MASK = (1 << 31) - 1
INCARNATION_MASK = 0xFFFFFFFF


def make_ref(rank: int, offset: int) -> int:
    if not 0 <= rank < (1 << RANK_BITS) or not 0 <= offset <= OFFSET_MASK:
        raise BlockError(f"cannot encode rank={rank} offset={offset}")
    return (rank << OFFSET_BITS) | offset


def ref_rank(ref: int) -> int:
    return ref >> OFFSET_BITS


def ref_offset(ref: int) -> int:
    return ref & OFFSET_MASK


def format_ref(ref: int) -> str:
    if ref == NULL_REF:
        return "NULL"
    return f"{ref_rank(ref)}:{ref_offset(ref):#x}"


# free-list head: low 32 bits = index of the first free block, high 32 = tag
def pack_head(index: int, tag: int) -> int:
    return ((tag & 0xFFFFFFFF) << 32) | (index & 0xFFFFFFFF)


def unpack_head(word: int) -> tuple[int, int]:
    return word & 0xFFFFFFFF, word >> 32


def pack_lock(write: bool, readers: int, incarnation: int) -> int:
    return ((WRITE_BIT if write else 0) | ((readers & READER_MASK) << READER_SHIFT)
            | (incarnation & INCARNATION_MASK))


def unpack_lock(word: int) -> tuple[bool, int, int]:
    return (bool(word & WRITE_BIT), (word >> READER_SHIFT) & READER_MASK,
            word & INCARNATION_MASK)


class LockMode(enum.Enum):
    READ = "read"
    WRITE = "write"


class LockResult(enum.Enum):
    ACQUIRED = "acquired"
    BUSY = "busy"
    STALE = "stale"


class BlockKind(enum.IntEnum):
    FREE = 0
    OVERFLOW = 1
    VERTEX = 2
    EDGE = 3


class BlockPool:
    """Per-rank pool of ``blocks_per_rank`` blocks of ``block_size`` bytes.

    Construct from the host thread or collectively on every rank. With
    ``debug`` on, a shadow set of granted blocks catches double releases.
    """

    def __init__(self, world: World, block_size: int = 512, blocks_per_rank: int = 1024,
                 debug: bool = True):
        if block_size < 8 or block_size & (block_size - 1):
            raise ValueError(f"block_size must be a power of two >= 8, got {block_size}")
        if not 0 < blocks_per_rank < NULL_INDEX:
            raise ValueError(f"blocks_per_rank out of range: {blocks_per_rank}")
        if block_size * blocks_per_rank > OFFSET_MASK:
            raise ValueError("data window exceeds the 48-bit offset range")
        self.world = world
        self.block_size = block_size
        self.blocks_per_rank = blocks_per_rank
        self.debug = debug
        self.data = world.win_alloc(block_size * blocks_per_rank)
        self.usage = world.win_alloc(4 * blocks_per_rank)
        self.system = world.win_alloc(8 * blocks_per_rank + 8)
        self.kinds = world.win_alloc(blocks_per_rank)
        self.head_offset = 8 * blocks_per_rank
        self._held: set[int] = set()
        self._held_lock = threading.Lock()
        if world.in_run:
            self._init_rank(world.rank)
            world.barrier()
        else:
            for r in range(world.nranks):
                self._init_rank(r)

    def _init_rank(self, rank):
        links = np.arange(1, self.blocks_per_rank + 1, dtype="<u4")
        links[-1] = NULL_INDEX
        self.usage.local_view(rank)[:] = links.tobytes()
        self.system.atomic_put(rank, self.head_offset, pack_head(0, 0))

    @property
    def capacity(self) -> int:
        return self.blocks_per_rank * self.world.nranks

    def _index(self, ref: int) -> int:
        if ref == NULL_REF:
            raise BlockError("NULL block reference")
        offset = ref_offset(ref)
        if ref_rank(ref) >= self.world.nranks or offset % self.block_size:
            raise BlockError(f"invalid block reference {format_ref(ref)}")
        index = offset // self.block_size
        if index >= self.blocks_per_rank:
            raise BlockError(f"block reference {format_ref(ref)} beyond pool")
        return index

    # -- free list ----------------------------------------------------------
    def acquire_block(self, target: int) -> int:
        """Pop a free block of ``target``; ``NULL_REF`` if it has none."""
        sysw, usage = self.system, self.usage
        head = sysw.atomic_get(target, self.head_offset)
        while True:
            index, tag = unpack_head(head)
            if index == NULL_INDEX:
                return NULL_REF
            nxt = _U32.unpack(usage.get(target, index * 4, 4))[0]
            prior = sysw.atomic_cas(target, self.head_offset, head, pack_head(nxt, tag + 1))
            if prior == head:
                break
            head = prior
        ref = make_ref(target, index * self.block_size)
        if self.debug:
            with self._held_lock:
                if ref in self._held:
                    raise BlockError(f"block {format_ref(ref)} granted twice")
                self._held.add(ref)
        return ref

    def release_block(self, ref: int) -> None:
        """Push ``ref`` back onto its rank's free list."""
        index = self._index(ref)
        target = ref_rank(ref)
        if self.debug:
            with self._held_lock:
                if ref not in self._held:
                    raise BlockError(f"release of block {format_ref(ref)} that is not held")
                self._held.discard(ref)
        self.kinds.put(target, index, b"\x00")
        self.kinds.flush(target)
        sysw, usage = self.system, self.usage
        head = sysw.atomic_get(target, self.head_offset)
        while True:
            first, tag = unpack_head(head)
            usage.put(target, index * 4, _U32.pack(first))
            usage.flush(target)
            prior = sysw.atomic_cas(target, self.head_offset, head, pack_head(index, tag + 1))
            if prior == head:
                return
            head = prior

    def free_list(self, rank: int) -> list[int]:
        """Walk ``rank``'s free list (quiescent audit); raises on a cycle."""
        index, _ = unpack_head(self.system.atomic_get(rank, self.head_offset))
        links = np.frombuffer(self.usage.get(rank, 0, 4 * self.blocks_per_rank), dtype="<u4")
        seen = []
        visited = set()
        while index != NULL_INDEX:
            if index >= self.blocks_per_rank:
                raise BlockError(f"free list of rank {rank} points outside the pool: {index}")
            if index in visited:
                raise BlockError(f"free list of rank {rank} has a cycle at {index}")
            visited.add(index)
            seen.append(index)
            index = int(links[index])
        return seen

    def free_count(self, rank: int | None = None) -> int:
        ranks = range(self.world.nranks) if rank is None else [rank]
        return sum(len(self.free_list(r)) for r in ranks)

    def held_blocks(self) -> set[int]:
        with self._held_lock:
            return set(self._held)

    # -- block contents --------------------------------------------------------
    def read_block(self, ref: int, offset: int = 0, length: int | None = None) -> bytes:
        index = self._index(ref)
        if length is None:
            length = self.block_size - offset
        if offset < 0 or length < 0 or offset + length > self.block_size:
            raise BlockError(f"block access [{offset}, {offset + length}) out of bounds")
        return self.data.get(ref_rank(ref), index * self.block_size + offset, length)

    def write_block(self, ref: int, data, offset: int = 0, flush: bool = True) -> None:
        index = self._index(ref)
        if offset < 0 or offset + len(data) > self.block_size:
            raise BlockError(f"block write [{offset}, {offset + len(data)}) out of bounds")
        self.data.put(ref_rank(ref), index * self.block_size + offset, data)
        if flush:
            self.data.flush(ref_rank(ref))

    def set_kind(self, ref: int, kind: BlockKind, flush: bool = True) -> None:
        rank = ref_rank(ref)
        self.kinds.put(rank, self._index(ref), bytes((int(kind),)))
        if flush:
            self.kinds.flush(rank)

    def kind_of(self, ref: int) -> BlockKind:
        return BlockKind(self.kinds.get(ref_rank(ref), self._index(ref), 1)[0])

    def blocks_of_kind(self, rank: int, kind: BlockKind) -> list[int]:
        """References of ``rank``'s blocks currently tagged ``kind``."""
        kinds = np.frombuffer(self.kinds.get(rank, 0, self.blocks_per_rank), dtype=np.uint8)
        base = rank << OFFSET_BITS
        return [base | int(i) * self.block_size for i in np.flatnonzero(kinds == int(kind))]

    # -- lock words -----------------------------------------------------------
    def _lock_loc(self, ref):
        return ref_rank(ref), self._index(ref) * 8

    def lock_word(self, ref: int) -> int:
        return self.system.atomic_get(*self._lock_loc(ref))

    def incarnation(self, ref: int) -> int:
        return self.lock_word(ref) & INCARNATION_MASK

    def try_lock(self, ref: int, mode: LockMode,
                 expected_incarnation: int | None = None) -> LockResult:
        """One non-blocking attempt to take the reader-writer lock of ``ref``."""
        rank, off = self._lock_loc(ref)
        sysw = self.system
        word = sysw.atomic_get(rank, off)
        while True:
            write, readers, inc = unpack_lock(word)
            if expected_incarnation is not None and inc != expected_incarnation:
                return LockResult.STALE
            if write:
                return LockResult.BUSY
            if mode is LockMode.READ:
                if readers == READER_MASK:
                    return LockResult.BUSY
                new = pack_lock(False, readers + 1, inc)
            else:
                if readers:
                    return LockResult.BUSY
                new = pack_lock(True, 0, inc)
            prior = sysw.atomic_cas(rank, off, word, new)
            if prior == word:
                return LockResult.ACQUIRED
            word = prior

    def unlock(self, ref: int, mode: LockMode) -> None:
        rank, off = self._lock_loc(ref)
        sysw = self.system
        word = sysw.atomic_get(rank, off)
        while True:
            write, readers, inc = unpack_lock(word)
            if mode is LockMode.READ:
                if write or readers == 0:
                    raise BlockError(f"read unlock of {format_ref(ref)} without a read lock")
                new = pack_lock(False, readers - 1, inc)
            else:
                if not write:
                    raise BlockError(f"write unlock of {format_ref(ref)} without a write lock")
                new = pack_lock(False, 0, inc)
            prior = sysw.atomic_cas(rank, off, word, new)
            if prior == word:
                return
            word = prior

    def bump_incarnation(self, ref: int) -> int:
        """Advance the incarnation of a write-locked block; returns the new value."""
        rank, off = self._lock_loc(ref)
        word = self.system.atomic_get(rank, off)
        while True:
            write, readers, inc = unpack_lock(word)
            if not write:
                raise BlockError(f"incarnation bump of {format_ref(ref)} without a write lock")
            new_inc = (inc + 1) & INCARNATION_MASK
            prior = self.system.atomic_cas(rank, off, word, pack_lock(True, 0, new_inc))
            if prior == word:
                return new_inc
            word = prior

    def lock_words(self, rank: int) -> np.ndarray:
        """All lock words of ``rank`` (audit helper)."""
        return np.frombuffer(self.system.get(rank, 0, 8 * self.blocks_per_rank), dtype="<u8")
