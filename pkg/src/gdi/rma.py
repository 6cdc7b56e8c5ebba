"""One-sided communication layer with a simulated multi-rank backend.

Every rank is a thread of the current process. Windows are per-rank byte
arrays that any rank may read, write or update atomically. Puts are deferred
until the origin flushes the target, gets complete immediately, and 8-byte
atomics are linearizable per target segment.

Typical use::

    world = World(4)

    def body():
        win = world.win_alloc(1024)
        if world.rank == 3:
            win.put(0, 0, b"hello")
            win.flush(0)
        world.barrier()
        return win.get(0, 0, 5)

    world.run(body)
"""
from __future__ import annotations

import contextlib
import operator
import struct
import threading
import time
from collections import defaultdict
from functools import reduce as _reduce
from typing import Any, Callable

from .errors import CollectiveError, ResourceError, RmaAlignmentError, RmaBoundsError

MAX_RANKS = 1 << 16
_U64 = struct.Struct("<Q")
_MASK64 = (1 << 64) - 1

_OPS = {
    "sum": operator.add,
    "max": max,
    "min": min,
    "land": lambda a, b: a and b,
    "lor": lambda a, b: a or b,
}


class _Slot:
    __slots__ = ("tag", "values", "arrived", "departed")

    def __init__(self, tag, nranks):
        self.tag = tag
        self.values = [None] * nranks
        self.arrived = 0
        self.departed = 0


class _Rendezvous:
    """Centralized meeting point behind every collective call."""

    def __init__(self, nranks: int, timeout: float):
        self.nranks = nranks
        self.timeout = timeout
        self._cond = threading.Condition()
        self._slots: dict[int, _Slot] = {}
        self._epoch = [0] * nranks
        self._failure: str | None = None

    def abort(self, reason: str):
        with self._cond:
            if self._failure is None:
                self._failure = reason
            self._cond.notify_all()

    def exchange(self, rank: int, tag: str, value):
        with self._cond:
            if self._failure is not None:
                raise CollectiveError(f"collective aborted: {self._failure}")
            epoch = self._epoch[rank]
            self._epoch[rank] += 1
            slot = self._slots.get(epoch)
            if slot is None:
                slot = self._slots[epoch] = _Slot(tag, self.nranks)
            elif slot.tag != tag:
                msg = (f"collective mismatch at call #{epoch}: rank {rank} "
                       f"called {tag!r}, peers called {slot.tag!r}")
                self._failure = msg
                self._cond.notify_all()
                raise CollectiveError(msg)
            slot.values[rank] = value
            slot.arrived += 1
            if slot.arrived == self.nranks:
                self._cond.notify_all()
            else:
                done = self._cond.wait_for(
                    lambda: slot.arrived == self.nranks or self._failure is not None,
                    self.timeout)
                if not done:
                    self._failure = f"timeout in {tag!r} (call #{epoch}); likely deadlock"
                    self._cond.notify_all()
                    raise CollectiveError(self._failure)
                if slot.arrived < self.nranks:
                    raise CollectiveError(f"collective aborted: {self._failure}")
            values = list(slot.values)
            slot.departed += 1
            if slot.departed == self.nranks:
                del self._slots[epoch]
            return values


class World:
    """A group of ``nranks`` execution agents sharing RMA windows.

    ``delay`` is a per-operation latency in seconds (modelled network cost);
    sleeping releases the interpreter lock, so ranks overlap while they wait.
    """

    def __init__(self, nranks: int = 1, delay: float = 0.0,
                 collective_timeout: float = 120.0):
        if not 1 <= nranks <= MAX_RANKS:
            raise ValueError(f"nranks must be in [1, {MAX_RANKS}], got {nranks}")
        self.nranks = nranks
        self.delay = float(delay)
        self.collective_timeout = collective_timeout
        self._tls = threading.local()
        self._rdv = _Rendezvous(nranks, collective_timeout)
        self._windows: list[Window] = []
        self._alloc_lock = threading.Lock()

    # -- rank context ---------------------------------------------------
    @property
    def rank(self) -> int:
        return getattr(self._tls, "rank", 0)

    @property
    def in_run(self) -> bool:
        return getattr(self._tls, "in_run", False)

    @contextlib.contextmanager
    def as_rank(self, rank: int):
        """Act as ``rank`` in the calling thread (host-side driving)."""
        if not 0 <= rank < self.nranks:
            raise ValueError(f"rank {rank} out of range")
        prev = getattr(self._tls, "rank", None)
        self._tls.rank = rank
        try:
            yield self
        finally:
            if prev is None:
                del self._tls.rank
            else:
                self._tls.rank = prev

    def run(self, fn: Callable[..., Any], *args, **kwargs) -> list:
        """Run ``fn`` on every rank concurrently; return per-rank results."""
        if self.in_run:
            raise RuntimeError("World.run is not reentrant")
        self._rdv = _Rendezvous(self.nranks, self.collective_timeout)
        results: list[Any] = [None] * self.nranks
        errors: list[BaseException | None] = [None] * self.nranks

        def body(r):
            self._tls.rank = r
            self._tls.in_run = True
            try:
                results[r] = fn(*args, **kwargs)
            except BaseException as exc:  # noqa: BLE001 - reraised below
                errors[r] = exc
                self._rdv.abort(f"rank {r} raised {type(exc).__name__}: {exc}")

        threads = [threading.Thread(target=body, args=(r,), name=f"rank-{r}", daemon=True)
                   for r in range(self.nranks)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        real = [e for e in errors if e is not None and not isinstance(e, CollectiveError)]
        failed = real or [e for e in errors if e is not None]
        if failed:
            raise failed[0]
        return results

    # -- windows ----------------------------------------------------------
    def win_alloc(self, size_per_rank: int) -> Window:
        """Allocate a zeroed window; collective inside :meth:`run`."""
        if size_per_rank < 0:
            raise ValueError("window size must be non-negative")
        if not self.in_run:
            return self._new_window(size_per_rank)
        sizes = self._rdv.exchange(self.rank, "win_alloc", size_per_rank)
        if len(set(sizes)) != 1:
            raise CollectiveError(f"win_alloc called with differing sizes {sizes}")
        win = self._new_window(size_per_rank) if self.rank == 0 else None
        return self._rdv.exchange(self.rank, "win_alloc.bcast", win)[0]

    def _new_window(self, size):
        try:
            win = Window(self, len(self._windows), size)
        except MemoryError as exc:
            raise ResourceError(f"cannot allocate window of {size} bytes/rank") from exc
        with self._alloc_lock:
            self._windows.append(win)
        return win

    def shared(self, factory: Callable[[], Any]) -> Any:
        """Build one object for all ranks: rank 0 calls ``factory``, peers get it.

        Inside :meth:`run` this is collective; ``factory`` runs with host
        semantics, so window allocations in it are not collective.
        """
        if not self.in_run:
            return factory()
        obj = None
        if self.rank == 0:
            self._tls.in_run = False
            try:
                obj = factory()
            finally:
                self._tls.in_run = True
        return self._rdv.exchange(self.rank, "shared", obj)[0]

    # -- collectives ------------------------------------------------------
    def _exchange(self, tag, value):
        if not self.in_run:
            if self.nranks == 1:
                return [value]
            raise CollectiveError(f"{tag} must be called by every rank inside World.run")
        self._pause()
        return self._rdv.exchange(self.rank, tag, value)

    def barrier(self) -> None:
        self._exchange("barrier", None)

    def allgather(self, value) -> list:
        return self._exchange("allgather", value)

    def allreduce(self, value, op: str = "sum"):
        return _reduce(_OPS[op], self._exchange(f"allreduce.{op}", value))

    def reduce(self, value, root: int = 0, op: str = "sum"):
        """Combined value at ``root``, ``None`` elsewhere."""
        out = _reduce(_OPS[op], self._exchange(f"reduce.{op}.{root}", value))
        return out if self.rank == root else None

    def broadcast(self, value, root: int = 0):
        return self._exchange(f"broadcast.{root}", value)[root]

    def alltoall(self, outgoing: list) -> list:
        """``outgoing[d]`` goes to rank d; returns what each rank sent here."""
        if len(outgoing) != self.nranks:
            raise ValueError("alltoall needs one item per destination rank")
        rows = self._exchange("alltoall", list(outgoing))
        return [rows[src][self.rank] for src in range(self.nranks)]

    def _pause(self):
        if self.delay:
            time.sleep(self.delay)


class Window:
    """A remotely accessible byte array on every rank."""

    def __init__(self, world: World, wid: int, size_per_rank: int):
        self.world = world
        self.id = wid
        self.size = size_per_rank
        self._mem = [bytearray(size_per_rank) for _ in range(world.nranks)]
        self._locks = [threading.Lock() for _ in range(world.nranks)]
        self._tls = threading.local()

    def __repr__(self):
        return f"Window(id={self.id}, size_per_rank={self.size})"

    def _check(self, target, offset, length):
        if not 0 <= target < self.world.nranks:
            raise RmaBoundsError(f"rank {target} out of range")
        if offset < 0 or length < 0 or offset + length > self.size or (
                length == 0 and offset >= self.size):
            raise RmaBoundsError(
                f"access [{offset}, {offset + length}) outside window of {self.size} bytes")

    def _check_word(self, target, offset):
        if offset % 8:
            raise RmaAlignmentError(f"atomic at offset {offset} is not 8-byte aligned")
        self._check(target, offset, 8)

    def _pending(self) -> dict:
        ops = getattr(self._tls, "ops", None)
        if ops is None:
            ops = self._tls.ops = defaultdict(list)
        return ops

    # -- data movement ------------------------------------------------------
    def put(self, target: int, offset: int, data) -> None:
        """Deferred write; visible to other ranks after ``flush(target)``."""
        data = bytes(data)
        self._check(target, offset, len(data))
        self._pending()[target].append((offset, data))

    def get(self, target: int, offset: int, length: int) -> bytes:
        self._check(target, offset, length)
        self.world._pause()
        with self._locks[target]:
            return bytes(self._mem[target][offset:offset + length])

    def flush(self, target: int) -> None:
        """Complete every outstanding put issued by the caller to ``target``."""
        ops = self._pending().pop(target, None)
        if not ops:
            return
        self.world._pause()
        mem = self._mem[target]
        with self._locks[target]:
            for offset, data in ops:
                mem[offset:offset + len(data)] = data

    def flush_all(self) -> None:
        for target in list(self._pending()):
            self.flush(target)

    # -- atomics ------------------------------------------------------------
    def atomic_get(self, target: int, offset: int) -> int:
        self._check_word(target, offset)
        self.world._pause()
        with self._locks[target]:
            return _U64.unpack_from(self._mem[target], offset)[0]

    def atomic_put(self, target: int, offset: int, value: int) -> None:
        self._check_word(target, offset)
        self.world._pause()
        with self._locks[target]:
            _U64.pack_into(self._mem[target], offset, value & _MASK64)

    def atomic_cas(self, target: int, offset: int, compare: int, new: int) -> int:
        """Swap in ``new`` iff the word equals ``compare``; return the prior word."""
        self._check_word(target, offset)
        self.world._pause()
        mem = self._mem[target]
        with self._locks[target]:
            prior = _U64.unpack_from(mem, offset)[0]
            if prior == compare:
                _U64.pack_into(mem, offset, new & _MASK64)
            return prior

    def fetch_add(self, target: int, offset: int, value: int) -> int:
        self._check_word(target, offset)
        self.world._pause()
        mem = self._mem[target]
        with self._locks[target]:
            prior = _U64.unpack_from(mem, offset)[0]
            _U64.pack_into(mem, offset, (prior + value) & _MASK64)
            return prior

    # -- owner-side access ----------------------------------------------------
    def local_view(self, rank: int) -> memoryview:
        """Direct view of ``rank``'s segment, for its owner at quiescent points."""
        return memoryview(self._mem[rank])
