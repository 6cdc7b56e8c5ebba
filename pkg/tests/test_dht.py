import random

import pytest

from gdi import DistributedHashTable, World
from gdi.blocks import make_ref, ref_rank
from gdi.errors import ResourceError

from _support import dht_delete_race, dht_disjoint_run, dht_oracle_run


def test_basic_operations():
    t = DistributedHashTable(World(1), capacity=16)
    assert t.lookup(5) == (False, None)
    t.insert(5, 50)
    assert t.lookup(5) == (True, 50)
    assert t.delete(5)
    assert not t.delete(5)
    assert t.lookup(5) == (False, None)


def test_colliding_keys_from_two_ranks():
    w = World(2)
    t = DistributedHashTable(w, capacity=64, buckets=1)

    def body():
        for i in range(20):
            t.insert(w.rank * 100 + i, i)
        w.barrier()
        return all(t.lookup(r * 100 + i) == (True, i) for r in range(2) for i in range(20))

    assert w.run(body) == [True, True]
    assert t.audit() == 40


def test_newest_entry_shadows_older_one():
    t = DistributedHashTable(World(1), capacity=8, buckets=1)
    t.insert(1, 10)
    t.insert(1, 11)
    assert t.lookup(1) == (True, 11)
    assert t.delete(1, value=10)
    assert t.lookup(1) == (True, 11)


def test_sequential_oracle_small():
    assert dht_oracle_run(20_000, seed=3, keys=512) == 0


def test_disjoint_concurrent_conservation():
    table, results = dht_disjoint_run(ranks=4, ops=2000)
    live = {k: v for part, *_ in results for k, v in part.items()}
    assert sum(r[3] for r in results) == 0
    assert len(table) == sum(r[1] - r[2] for r in results) == len(live)
    assert dict(table.items()) == live
    assert table.audit() == len(live)


def test_racing_deletes_have_one_winner():
    assert set(dht_delete_race(ranks=4, keys=200)) == {1}


def test_insert_unique_keeps_the_first_writer():
    w = World(6)
    t = DistributedHashTable(w, capacity=512, buckets=4)

    def body():
        order = list(range(50))
        random.Random(w.rank).shuffle(order)
        return {k for k in order if t.insert_unique(k, w.rank)}

    wins = w.run(body)
    for k in range(50):
        assert sum(k in s for s in wins) == 1
        winner = next(r for r, s in enumerate(wins) if k in s)
        assert t.lookup(k) == (True, winner)
    assert t.audit() == 50


def test_key_rank_placement_is_local():
    w = World(3)
    t = DistributedHashTable(w, capacity=64, placement="key_rank")
    keys = [make_ref(r, 64 * i) for r in range(3) for i in range(5)]
    for k in keys:
        t.insert(k, k)
    for r in range(3):
        assert sorted(k for k, _ in t.local_items(r)) == sorted(k for k in keys if ref_rank(k) == r)


def test_heap_exhaustion():
    t = DistributedHashTable(World(1), capacity=1)
    with pytest.raises(ResourceError):
        for i in range(1000):
            t.insert(i, i)


def test_bad_arguments():
    with pytest.raises(ValueError):
        DistributedHashTable(World(1), capacity=0)
    with pytest.raises(ValueError):
        DistributedHashTable(World(1), capacity=4, placement="modulo")


def test_traversal_survives_entry_recycled_into_another_bucket():
    table = DistributedHashTable(World(1), capacity=64, buckets=8)
    home = table.bucket_of(1)
    same = [k for k in range(2, 500) if table.bucket_of(k) == home]
    other = next(k for k in range(2, 500) if table.bucket_of(k) != home)
    target, doomed = same[0], same[1]
    table.insert(target, 10)
    table.insert(doomed, 20)
    head = table.table.atomic_get(*home)
    real_read = table._read_entry
    fired = []

    def read(ptr):
        if ptr == head and not fired:
            # another rank deletes the head entry and its block is reused elsewhere
            fired.append(1)
            table.delete(doomed)
            assert table.insert(other, 30) == head
        return real_read(ptr)

    table._read_entry = read
    assert table.lookup(target) == (True, 10)
    table._read_entry = real_read
    table.delete(other)
    table.insert(doomed, 20)
    head = table.table.atomic_get(*home)
    fired.clear()
    table._read_entry = read
    assert table.delete(target)
    table._read_entry = real_read
    assert table.lookup(target) == (False, None)
    assert sorted(table.items()) == [(other, 30)]
