"""Transactional workload mixes and their driver."""
from __future__ import annotations

import bisect
import hashlib
import math
import time
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from ..database import Database
from ..errors import NotFoundError, StaleReference, TransactionCritical
from ..meta import Datatype, EntityType
from ..txn import Mode, Status

OPS = ("get_props", "count_edges", "get_edges", "add_vertex", "del_vertex", "upd_prop",
       "add_edge")
READ_OPS = frozenset(OPS[:3])


@dataclass(frozen=True)
class OltpMix:
    """Named operation mix; ``weights`` are exact fractions over :data:`OPS`."""
    name: str
    weights: tuple

    def __post_init__(self):
        if len(self.weights) != len(OPS):
            raise ValueError(f"a mix needs {len(OPS)} weights")
        if any(w < 0 for w in self.weights):
            raise ValueError("weights must be non-negative")
        if sum(self.weights) != 1:
            raise ValueError(f"mix {self.name} sums to {sum(self.weights)}, not 1")

    @classmethod
    def from_percent(cls, name: str, percents) -> OltpMix:
        return cls(name, tuple(Fraction(str(p)) / 100 for p in percents))

    @property
    def read_only(self) -> bool:
        return all(w == 0 for op, w in zip(OPS, self.weights) if op not in READ_OPS)

    def sampler(self, rng: np.random.Generator):
        """Callable drawing op names with exactly these probabilities."""
        denom = math.lcm(*(w.denominator for w in self.weights))
        cum = np.cumsum([int(w * denom) for w in self.weights]).tolist()

        def draw() -> str:
            return OPS[bisect.bisect_right(cum, int(rng.integers(denom)))]
        return draw


MIXES = {
    "rm": OltpMix.from_percent("read mostly", [28.8, 11.7, 59.3, 0, 0, 0, 0.2]),
    "ri": OltpMix.from_percent("read intensive", [21.7, 8.8, 44.5, 0, 0, 0, 25]),
    "wi": OltpMix.from_percent("write intensive", [9.1, 0, 10.9, 20, 6.7, 13.3, 40]),
    "lb": OltpMix.from_percent("linkbench", [12.9, 4.9, 51.2, 2.6, 1.0, 7.4, 20]),
    "read": OltpMix.from_percent("get properties", [100, 0, 0, 0, 0, 0, 0]),
}

# log spaced latency buckets from 100 ns to 1 s, ten per decade
BUCKET_EDGES_NS = np.logspace(2, 9, 71).round().astype(np.int64)


def histogram(latencies_ns) -> list[int]:
    """Counts per bucket; out-of-range samples land in the end buckets."""
    idx = np.searchsorted(BUCKET_EDGES_NS, np.asarray(latencies_ns, dtype=np.int64), "right") - 1
    idx = np.clip(idx, 0, len(BUCKET_EDGES_NS) - 2)
    return np.bincount(idx, minlength=len(BUCKET_EDGES_NS) - 1).tolist()


def percentile(hist: list[int], q: float) -> float:
    """Upper bucket edge (ns) below which a fraction ``q`` of samples fall."""
    total = sum(hist)
    if not total:
        return 0.0
    cum = np.cumsum(hist)
    i = int(np.searchsorted(cum, q * total))
    return float(BUCKET_EDGES_NS[min(i + 1, len(BUCKET_EDGES_NS) - 1)])


class _Reservoir:
    """Application ids believed live on this rank's view, O(1) add/remove/sample."""

    def __init__(self, ids):
        self.ids = list(ids)
        self.pos = {a: i for i, a in enumerate(self.ids)}

    def sample(self, rng) -> int:
        return self.ids[int(rng.integers(len(self.ids)))]

    def add(self, a: int):
        if a not in self.pos:
            self.pos[a] = len(self.ids)
            self.ids.append(a)

    def discard(self, a: int):
        i = self.pos.pop(a, None)
        if i is None:
            return
        last = self.ids.pop()
        if last != a:
            self.ids[i] = last
            self.pos[last] = i

    def __len__(self):
        return len(self.ids)


class _Driver:
    def __init__(self, db: Database, app_ids, seed: int):
        world = db.world
        self.db = db
        self.rank, self.p = world.rank, world.nranks
        self.rng = np.random.default_rng([seed, self.rank, 0x4F4C])
        self.live = _Reservoir(app_ids)
        self.next_new = max(app_ids, default=-1) + 1 + self.rank
        cat = db.catalog
        self.labels = cat.labels
        self.ptype = next((t for t in cat.property_types
                           if t.datatype is Datatype.U64 and t.entity is EntityType.SINGLE), None)

    def _key(self, a: int) -> bytes:
        return a.to_bytes(8, "little")

    def run(self, op: str) -> str:
        """Execute one op in its own transaction; returns an outcome name."""
        mode = Mode.READ if op in READ_OPS else Mode.WRITE
        if not len(self.live) and op != "add_vertex":
            return "not_found"
        txn = self.db.start_transaction(mode)
        try:
            after = getattr(self, "_" + op)(txn)
        except NotFoundError:
            txn.close(False)
            return "not_found"
        except StaleReference:
            txn.close(False)
            return "stale"
        except TransactionCritical:
            txn.close(False)
            return "conflict"
        if txn.close(True) is not Status.COMMITTED:
            return "conflict"
        if after:
            after()
        return "ok"

    def _get_props(self, txn):
        v = txn.vertex(self._key(self.live.sample(self.rng)))
        v.labels()
        v.all_properties()

    def _count_edges(self, txn):
        txn.vertex(self._key(self.live.sample(self.rng))).degree()

    def _get_edges(self, txn):
        v = txn.vertex(self._key(self.live.sample(self.rng)))
        for e in txn.edges_of(v):
            e.vertices()
            e.label_ids()

    def _add_vertex(self, txn):
        a = self.next_new
        self.next_new += self.p
        v = txn.create_vertex(self._key(a))
        if self.labels:
            v.add_label(self.labels[int(self.rng.integers(len(self.labels)))])
        if self.ptype is not None:
            v.add_property(self.ptype, int(self.rng.integers(1 << 32)))
        return lambda: self.live.add(a)

    def _del_vertex(self, txn):
        a = self.live.sample(self.rng)
        txn.free_vertex(txn.vertex(self._key(a)))
        return lambda: self.live.discard(a)

    def _upd_prop(self, txn):
        v = txn.vertex(self._key(self.live.sample(self.rng)))
        if self.ptype is not None:
            v.update_property(self.ptype, int(self.rng.integers(1 << 32)))

    def _add_edge(self, txn):
        u = txn.vertex(self._key(self.live.sample(self.rng)))
        w = txn.vertex(self._key(self.live.sample(self.rng)))
        txn.create_edge(u, w)


def run_oltp(db: Database, mix: OltpMix | str, queries: int = 1000, app_ids=None,
             seed: int = 1, warmup: int = 100) -> dict:
    """Run ``warmup + queries`` operations per rank; collective or self-launching.

    ``app_ids`` are the integer ids of existing vertices (default: all of them).
    Failed operations are counted by reason and never retried.
    """
    world = db.world
    if isinstance(mix, str):
        mix = MIXES[mix]
    if not world.in_run:
        return world.run(run_oltp, db, mix, queries, app_ids, seed, warmup)[0]
    if app_ids is None:
        app_ids = world.broadcast(db.app_ids() if world.rank == 0 else None)
    app_ids = list(app_ids)
    driver = _Driver(db, app_ids, seed)
    draw = mix.sampler(np.random.default_rng([seed, world.rank, 0x4D49]))
    for _ in range(warmup):
        driver.run(draw())
    sequence = hashlib.sha256()

    lat = {op: [] for op in OPS}
    outcomes = {op: {} for op in OPS}
    world.barrier()
    t0 = time.perf_counter()
    for _ in range(queries):
        op = draw()
        sequence.update(op.encode() + b";")
        s = time.perf_counter_ns()
        res = driver.run(op)
        lat[op].append(time.perf_counter_ns() - s)
        outcomes[op][res] = outcomes[op].get(res, 0) + 1
    mine = time.perf_counter() - t0
    world.barrier()
    elapsed = world.allreduce(time.perf_counter() - t0, "max")

    parts = world.allgather({"lat": {op: histogram(v) for op, v in lat.items()},
                             "out": outcomes, "time": mine, "seq": sequence.hexdigest()})
    ops = {}
    for op in OPS:
        hist = np.sum([pt["lat"][op] for pt in parts], axis=0).tolist()
        merged: dict[str, int] = {}
        for pt in parts:
            for k, c in pt["out"][op].items():
                merged[k] = merged.get(k, 0) + c
        attempted = sum(merged.values())
        ops[op] = {"attempted": attempted, "failed": attempted - merged.get("ok", 0),
                   "outcomes": dict(sorted(merged.items())), "histogram": hist,
                   "p50_ns": percentile(hist, 0.5), "p99_ns": percentile(hist, 0.99)}
    total = sum(o["attempted"] for o in ops.values())
    failed = sum(o["failed"] for o in ops.values())
    return {
        "mix": mix.name,
        "weights": {op: str(w) for op, w in zip(OPS, mix.weights)},
        "ranks": world.nranks,
        "queries_per_rank": queries,
        "warmup_per_rank": warmup,
        "attempted": total,
        "failed": failed,
        "failed_fraction": failed / total if total else 0.0,
        "elapsed_s": elapsed,
        "throughput_ops": total / elapsed if elapsed > 0 else 0.0,
        "per_rank_s": [pt["time"] for pt in parts],
        "op_sequence_sha256": [pt["seq"] for pt in parts],
        "bucket_edges_ns": BUCKET_EDGES_NS.tolist(),
        "ops": ops,
    }
