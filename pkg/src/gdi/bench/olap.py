"""Whole-graph analytics on the engine: BFS, k-hop, PageRank, WCC, CDLP, LCC, GCN, BI.

Every routine is collective. Called from the host thread it launches itself
on all ranks and returns rank 0's result (results are identical everywhere).
Traversals use the undirected view: each edge can be followed both ways.
Except for GCN, which aggregates over every edge slot, the algorithms work on
the simple graph (parallel edges merged, self loops dropped). Results are keyed
by integer application id.
"""
from __future__ import annotations

import contextlib
import functools
from collections import Counter
from typing import Callable

import numpy as np

from ..blocks import ref_offset, ref_rank
from ..database import Database
from ..dht import splitmix64
from ..errors import NotFoundError
from ..graph import Orientation
from ..meta import Datatype, EntityType, SizeType
from ..query import Constraint, has_label, local_vertices_of_index
from ..txn import Mode, Status, Transaction


def collective(fn: Callable) -> Callable:
    @functools.wraps(fn)
    def wrapper(db: Database, *args, **kwargs):
        if not db.world.in_run:
            return db.world.run(fn, db, *args, **kwargs)[0]
        return fn(db, *args, **kwargs)
    return wrapper


class LocalGraph:
    """This rank's slice of the undirected view, read in a collective transaction."""

    def __init__(self, txn: Transaction, simple: bool = True):
        world = txn.world
        self.txn = txn
        self.world = world
        self.pool = txn.pool
        self.refs = txn.local_vertices()
        self.app: dict[int, int] = {}
        self.adj: dict[int, list[int]] = {}
        for ref in self.refs:
            h = txn.associate_vertex(ref)
            self.app[ref] = h.app_id_int
            nbrs = h.neighbors(Orientation.ALL)
            self.adj[ref] = sorted(set(nbrs) - {ref}) if simple else nbrs
        self.app_of: dict[int, int] = {}
        for part in world.allgather(self.app):
            self.app_of.update(part)
        self.ref_of = {a: r for r, a in self.app_of.items()}
        self.n = len(self.app_of)
        self.frontier = world.win_alloc(self.pool.blocks_per_rank)

    def root_ref(self, app: int) -> int:
        try:
            return self.ref_of[app]
        except KeyError:
            raise NotFoundError(f"unknown root vertex {app}") from None

    def gather(self, local: dict) -> dict:
        """Union of per-rank {ref: value} maps, rekeyed by application id."""
        out = {}
        for part in self.world.allgather(local):
            for ref, v in part.items():
                out[self.app_of[ref]] = v
        return out

    def all_values(self, local: dict) -> dict:
        out = {}
        for part in self.world.allgather(local):
            out.update(part)
        return out


@contextlib.contextmanager
def _graph(db: Database, graph: LocalGraph | None):
    if graph is not None:
        yield graph
        return
    txn = db.start_collective_transaction(Mode.READ)
    try:
        yield LocalGraph(txn)
    finally:
        txn.close(True)


# -- traversals ---------------------------------------------------------------

def _bfs(g: LocalGraph, root: int, max_depth: int | None) -> dict[int, int]:
    world, rank, bs = g.world, g.world.rank, g.pool.block_size
    root_ref = g.root_ref(root)
    depth: dict[int, int] = {}
    frontier = [root_ref] if ref_rank(root_ref) == rank else []
    for r in frontier:
        depth[r] = 0
    level = 0
    while world.allreduce(len(frontier), "sum"):
        if max_depth is not None and level >= max_depth:
            break
        targets = {v for u in frontier for v in g.adj[u]}
        for v in targets:
            g.frontier.put(ref_rank(v), ref_offset(v) // bs, b"\x01")
        g.frontier.flush_all()
        world.barrier()
        seg = g.frontier.local_view(rank)
        hits = np.flatnonzero(np.frombuffer(seg, dtype=np.uint8))
        seg[:] = bytes(len(seg))
        level += 1
        frontier = []
        for idx in hits.tolist():
            ref = (rank << 48) | idx * bs
            if ref not in depth:
                depth[ref] = level
                frontier.append(ref)
    world.barrier()
    return g.gather(depth)


@collective
def run_bfs(db: Database, root: int, graph: LocalGraph | None = None) -> dict[int, int]:
    """Depth of every vertex reachable from ``root``."""
    with _graph(db, graph) as g:
        return _bfs(g, root, None)


@collective
def run_khop(db: Database, root: int, k: int = 2, graph: LocalGraph | None = None) -> set[int]:
    """Vertices within ``k`` hops of ``root``."""
    if k < 0:
        raise ValueError("k must be non-negative")
    with _graph(db, graph) as g:
        return set(_bfs(g, root, k))


# -- iterative kernels --------------------------------------------------------

@collective
def run_pagerank(db: Database, iters: int = 20, damping: float = 0.85,
                 graph: LocalGraph | None = None) -> dict[int, float]:
    """Synchronous PageRank; dangling mass is spread uniformly."""
    with _graph(db, graph) as g:
        world, p = g.world, g.world.nranks
        n = g.n
        rank_of = {u: 1.0 / n for u in g.refs}
        for _ in range(iters):
            outgoing = [dict() for _ in range(p)]
            dangling = 0.0
            for u in g.refs:
                nbrs = g.adj[u]
                if not nbrs:
                    dangling += rank_of[u]
                    continue
                share = rank_of[u] / len(nbrs)
                for v in nbrs:
                    box = outgoing[ref_rank(v)]
                    box[v] = box.get(v, 0.0) + share
            dangling = world.allreduce(dangling, "sum")
            incoming = {u: 0.0 for u in g.refs}
            for box in world.alltoall(outgoing):
                for v, x in box.items():
                    incoming[v] += x
            base = (1.0 - damping) / n + damping * dangling / n
            rank_of = {u: base + damping * incoming[u] for u in g.refs}
        return g.gather(rank_of)


def _propagate(g: LocalGraph, init: dict, step: Callable, rounds: int | None) -> dict:
    labels = dict(init)
    done = 0
    while rounds is None or done < rounds:
        view = g.all_values(labels)
        new = {u: step(u, labels[u], [view[v] for v in g.adj[u]]) for u in g.refs}
        changed = any(new[u] != labels[u] for u in g.refs)
        labels = new
        done += 1
        if not g.world.allreduce(changed, "lor"):
            break
    return labels


@collective
def run_wcc(db: Database, graph: LocalGraph | None = None) -> dict[int, int]:
    """Component of each vertex, named by its smallest application id."""
    with _graph(db, graph) as g:
        init = {u: g.app[u] for u in g.refs}
        labels = _propagate(g, init, lambda u, own, nb: min([own, *nb]), None)
        return g.gather(labels)


def _mode_label(u, own, nb):
    if not nb:
        return own
    counts = Counter(nb)
    best = max(counts.values())
    return min(lab for lab, c in counts.items() if c == best)


@collective
def run_cdlp(db: Database, iters: int = 10, graph: LocalGraph | None = None) -> dict[int, int]:
    """Label propagation: adopt the most frequent neighbour label, ties to the smallest."""
    with _graph(db, graph) as g:
        init = {u: g.app[u] for u in g.refs}
        labels = init
        for _ in range(iters):
            view = g.all_values(labels)
            labels = {u: _mode_label(u, labels[u], [view[v] for v in g.adj[u]]) for u in g.refs}
        return g.gather(labels)


@collective
def run_lcc(db: Database, graph: LocalGraph | None = None) -> dict[int, float]:
    """Local clustering coefficient of every vertex."""
    with _graph(db, graph) as g:
        nbr_sets = g.all_values({u: frozenset(g.adj[u]) for u in g.refs})
        out = {}
        for u in g.refs:
            mine = nbr_sets[u]
            d = len(mine)
            if d < 2:
                out[u] = 0.0
                continue
            links = sum(len(mine & nbr_sets[v]) for v in mine)
            out[u] = links / (d * (d - 1))
        return g.gather(out)


# -- GCN --------------------------------------------------------------------------

def gcn_weights(dim: int, seed: int = 7) -> tuple[np.ndarray, np.ndarray]:
    """Fixed affine map standing in for the per-layer MLP."""
    rng = np.random.default_rng([seed, dim])
    return rng.normal(0.0, 1.0 / dim, (dim, dim)), rng.normal(0.0, 0.1, dim)


def feature_of(app: int, dim: int, seed: int = 7) -> list[float]:
    return np.random.default_rng([seed, app]).uniform(-1.0, 1.0, dim).tolist()


@collective
def add_features(db: Database, dim: int = 4, seed: int = 7, name: str = "feature"):
    """Give every vertex a fixed-size f64 feature vector."""
    ptype = db.create_property_type(name, EntityType.SINGLE, Datatype.F64, SizeType.FIXED, dim)
    txn = db.start_collective_transaction(Mode.WRITE)
    for ref in txn.local_vertices():
        h = txn.associate_vertex(ref)
        h.update_property(ptype, feature_of(h.app_id_int, dim, seed))
    if txn.close(True) is not Status.COMMITTED:
        raise RuntimeError(f"feature assignment failed: {txn.error}")
    return ptype


@collective
def run_gcn(db: Database, layers: int = 2, weights=None, name: str = "feature",
            orientation: Orientation = Orientation.ALL) -> dict[int, tuple]:
    """Forward pass: h' = relu(W (h + sum of neighbour h) + b), one collective txn per layer."""
    ptype = db.catalog.property_type_from_name(name)
    dim = ptype.size_limit
    w, b = gcn_weights(dim) if weights is None else weights
    w, b = np.asarray(w, dtype=float), np.asarray(b, dtype=float)
    for _ in range(layers):
        txn = db.start_collective_transaction(Mode.WRITE)
        updates = {}
        for ref in txn.local_vertices():
            h = txn.associate_vertex(ref)
            vals = h.property_values(ptype)
            if not vals:
                raise NotFoundError(f"vertex {h.app_id_int} has no {name!r} property")
            acc = np.array(vals[0], dtype=float)
            for nbr in h.neighbors(orientation):
                acc += np.array(txn.associate_vertex(nbr).property_values(ptype)[0])
            updates[h] = np.maximum(w @ acc + b, 0.0)
        for h, vec in updates.items():
            h.update_property(ptype, vec.tolist())
        if txn.close(True) is not Status.COMMITTED:
            raise RuntimeError(f"GCN layer failed: {txn.error}")
    txn = db.start_collective_transaction(Mode.READ)
    local = {}
    for ref in txn.local_vertices():
        h = txn.associate_vertex(ref)
        local[h.app_id_int] = tuple(h.property_values(ptype)[0])
    txn.close(True)
    out = {}
    for part in db.world.allgather(local):
        out.update(part)
    return out


# -- BI query -------------------------------------------------------------------

COLORS = ("red", "blue", "green", "black")


def bi_role(app: int, seed: int = 11) -> tuple[str, int, str]:
    """(role, age, color) of a vertex; role is person, car or other."""
    h = splitmix64(app ^ (seed << 40))
    kind = h % 100
    role = "person" if kind < 45 else "car" if kind < 75 else "other"
    return role, 18 + (h >> 8) % 50, COLORS[(h >> 16) % len(COLORS)]


def bi_owns(u: int, v: int, seed: int = 11) -> bool:
    """Whether the edge u -> v carries the OWN label (person origins only)."""
    return bi_role(u, seed)[0] == "person" and splitmix64((u << 32) ^ v ^ seed) % 3 != 0


@collective
def prepare_bi(db: Database, seed: int = 11):
    """Label vertices as Person/Car with age/color and mark OWN edges; index persons."""
    person = db.create_label("Person")
    car = db.create_label("Car")
    own = db.create_label("OWN")
    age = db.create_property_type("age", EntityType.SINGLE, Datatype.U64, SizeType.FIXED, 1)
    color = db.create_property_type("color", EntityType.SINGLE, Datatype.UTF8, SizeType.MAX, 16)
    txn = db.start_collective_transaction(Mode.WRITE)
    refs = txn.local_vertices()
    app = {}
    for ref in refs:
        app[ref] = txn.associate_vertex(ref).app_id_int
    app_of = {}
    for part in db.world.allgather(app):
        app_of.update(part)
    for ref in refs:
        h = txn.associate_vertex(ref)
        me = app[ref]
        role, a, c = bi_role(me, seed)
        if role == "person":
            h.add_label(person)
            h.add_property(age, a)
        elif role == "car":
            h.add_label(car)
            h.add_property(color, c)
        for i, (nbr, eref, lid, flags) in enumerate(h.lw):
            d = flags & 0x7
            other = app_of[nbr]
            if ((d == Orientation.OUTGOING and bi_owns(me, other, seed))
                    or (d == Orientation.INCOMING and bi_owns(other, me, seed))):
                h._mutable()
                h.lw[i] = (nbr, eref, own.int_id, flags)
    if txn.close(True) is not Status.COMMITTED:
        raise RuntimeError(f"BI preparation failed: {txn.error}")
    index = db.create_index([person])
    return {"index": index, "person": person, "car": car, "own": own, "age": age,
            "color": color}


@collective
def run_bi(db: Database, index=None, min_age: int = 30, color_value: str = "red") -> int:
    """Count (person, car) pairs: person older than ``min_age`` OWNs a car of ``color_value``."""
    cat = db.catalog
    person = cat.label_from_name("Person")
    car, own = cat.label_from_name("Car"), cat.label_from_name("OWN")
    age, color = cat.property_type_from_name("age"), cat.property_type_from_name("color")
    if index is None:
        index = next(ix for ix in db.indexes if person.int_id in ix.label_ids)
    cnstr = Constraint.of([has_label(own)])
    local = 0
    txn = db.start_collective_transaction(Mode.READ)
    for ref in local_vertices_of_index(txn, index):
        h = txn.associate_vertex(ref)
        ages = h.property_values(age)
        if not ages or ages[0] <= min_age:
            continue
        for obj in h.neighbors(Orientation.OUTGOING, cnstr):
            o = txn.associate_vertex(obj)
            if car.int_id not in o.label_ids():
                continue
            if color_value in o.property_values(color):
                local += 1
    txn.close(True)
    total = db.world.reduce(local, root=0)
    return db.world.broadcast(total, root=0)


__all__ = [
    "LocalGraph", "run_bfs", "run_khop", "run_pagerank", "run_wcc", "run_cdlp", "run_lcc",
    "add_features", "run_gcn", "gcn_weights", "feature_of", "prepare_bi", "run_bi",
    "bi_role", "bi_owns",
]
