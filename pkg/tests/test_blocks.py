import pytest

from gdi import NULL_REF, BlockKind, BlockPool, LockMode, LockResult, World
from gdi.blocks import (make_ref, pack_head, pack_lock, ref_offset, ref_rank, unpack_head,
                        unpack_lock)
from gdi.errors import BlockError


def test_ref_round_trip():
    ref = make_ref(513, 4096)
    assert (ref_rank(ref), ref_offset(ref)) == (513, 4096)
    assert unpack_head(pack_head(17, 99)) == (17, 99)
    assert unpack_lock(pack_lock(True, 0, 12)) == (True, 0, 12)
    assert unpack_lock(pack_lock(False, 5, 3)) == (False, 5, 3)


def test_constructor_validates_geometry():
    with pytest.raises(ValueError):
        BlockPool(World(1), block_size=100)
    with pytest.raises(ValueError):
        BlockPool(World(1), blocks_per_rank=0)


def test_exhaustion_then_full_release():
    pool = BlockPool(World(2), block_size=64, blocks_per_rank=8)
    got = [pool.acquire_block(1) for _ in range(8)]
    assert all(ref_rank(r) == 1 for r in got)
    assert pool.acquire_block(1) == NULL_REF
    assert pool.free_count(0) == 8
    for r in got:
        pool.release_block(r)
    assert pool.free_count() == pool.capacity


def test_double_release_is_caught():
    pool = BlockPool(World(1), block_size=64, blocks_per_rank=4)
    ref = pool.acquire_block(0)
    pool.release_block(ref)
    with pytest.raises(BlockError):
        pool.release_block(ref)


def test_invalid_refs_are_rejected():
    pool = BlockPool(World(1), block_size=64, blocks_per_rank=4)
    for bad in (NULL_REF, make_ref(0, 65), make_ref(0, 64 * 4), make_ref(3, 0)):
        with pytest.raises(BlockError):
            pool.read_block(bad)


def test_concurrent_storm_grants_each_block_once():
    w = World(8)
    pool = BlockPool(w, block_size=64, blocks_per_rank=64)

    def body():
        mine = []
        for i in range(200):
            ref = pool.acquire_block(i % 2)
            if ref != NULL_REF:
                mine.append(ref)
            if i % 3 == 0 and mine:
                pool.release_block(mine.pop(0))
        return mine

    held = [r for part in w.run(body) for r in part]
    assert len(held) == len(set(held))
    assert set(held) == pool.held_blocks()
    for r in held:
        pool.release_block(r)
    assert pool.free_count() == pool.capacity


def test_tagged_head_defeats_stale_cas():
    pool = BlockPool(World(1), block_size=64, blocks_per_rank=4)
    stale = pool.system.atomic_get(0, pool.head_offset)
    a = pool.acquire_block(0)
    b = pool.acquire_block(0)
    pool.release_block(a)
    now = pool.system.atomic_get(0, pool.head_offset)
    # same block index back on top, different tag
    assert unpack_head(now)[0] == unpack_head(stale)[0]
    assert now != stale
    prior = pool.system.atomic_cas(0, pool.head_offset, stale, pack_head(3, 0))
    assert prior != stale
    assert pool.system.atomic_get(0, pool.head_offset) == now
    pool.release_block(b)
    assert pool.free_count() == 4


def test_reader_writer_lock_word():
    pool = BlockPool(World(1), block_size=64, blocks_per_rank=4)
    ref = pool.acquire_block(0)
    assert pool.try_lock(ref, LockMode.READ) is LockResult.ACQUIRED
    assert pool.try_lock(ref, LockMode.READ) is LockResult.ACQUIRED
    assert pool.try_lock(ref, LockMode.WRITE) is LockResult.BUSY
    pool.unlock(ref, LockMode.READ)
    pool.unlock(ref, LockMode.READ)
    assert pool.try_lock(ref, LockMode.WRITE) is LockResult.ACQUIRED
    assert pool.try_lock(ref, LockMode.READ) is LockResult.BUSY
    inc = pool.bump_incarnation(ref)
    pool.unlock(ref, LockMode.WRITE)
    assert pool.try_lock(ref, LockMode.READ, expected_incarnation=inc - 1) is LockResult.STALE
    assert pool.lock_word(ref) == pack_lock(False, 0, inc)
    with pytest.raises(BlockError):
        pool.unlock(ref, LockMode.WRITE)
    with pytest.raises(BlockError):
        pool.bump_incarnation(ref)


def test_block_io_and_kinds():
    pool = BlockPool(World(2), block_size=64, blocks_per_rank=4)
    ref = pool.acquire_block(1)
    pool.write_block(ref, b"xyz", offset=10)
    assert pool.read_block(ref, 10, 3) == b"xyz"
    with pytest.raises(BlockError):
        pool.write_block(ref, b"x" * 8, offset=60)
    pool.set_kind(ref, BlockKind.VERTEX)
    assert pool.kind_of(ref) is BlockKind.VERTEX
    assert pool.blocks_of_kind(1, BlockKind.VERTEX) == [ref]
    pool.release_block(ref)
    assert pool.kind_of(ref) is BlockKind.FREE
