"""Kronecker LPG generator that writes straight into a database.

Edges follow the Graph500 recursive-matrix recipe (initiator A=0.57,
B=C=0.19) with a seeded vertex permutation. Self loops and duplicate directed
edges are dropped and replaced by further draws, so a graph of scale ``s``
and edge factor ``e`` has exactly ``e * 2**s`` distinct directed edges.
"""
from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from functools import lru_cache

import jsonschema

import numpy as np

from .blocks import BlockKind
from .database import Database, load_json_schema
from .errors import GdiError, ResourceError
from .ingest import ingest
from .meta import Datatype, EntityType, SizeType

A, B, C = 0.57, 0.19, 0.19

# name, entity, datatype, size type, limit; cycled for other catalog sizes
DEFAULT_PTYPES = (
    [(f"u{i}", EntityType.SINGLE, Datatype.U64, SizeType.FIXED, 1) for i in range(4)]
    + [(f"f{i}", EntityType.SINGLE, Datatype.F64, SizeType.FIXED, 1) for i in range(3)]
    + [(f"s{i}", EntityType.SINGLE, Datatype.UTF8, SizeType.MAX, 32) for i in range(4)]
    + [(f"m{i}", EntityType.MULTI, Datatype.U64, SizeType.FIXED, 1) for i in range(2)]
)
_KNOWN_RULES = {"label_weights", "property_probability", "string_length", "multi_max"}
_ALPHABET = np.frombuffer(b"abcdefghijklmnopqrstuvwxyz0123456789", dtype=np.uint8)


@dataclass
class GenSpec:
    scale: int
    edge_factor: int = 16
    labels: int = 20
    ptypes: int = 13
    seed: int = 1
    rules: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.scale < 1 or self.edge_factor < 1:
            raise ValueError("scale and edge_factor must be at least 1")
        if self.labels < 1 or self.ptypes < 0:
            raise ValueError("need at least one label and a non-negative ptype count")
        unknown = set(self.rules) - _KNOWN_RULES
        if unknown:
            raise ValueError(f"unknown generator rules: {sorted(unknown)}")
        weights = self.rules.get("label_weights")
        if weights is not None and len(weights) != self.labels:
            raise ValueError("label_weights needs one weight per label")

    @classmethod
    def from_json(cls, doc) -> GenSpec:
        """Build from a dict, JSON text or file path checked against the shipped schema."""
        if isinstance(doc, str) and not doc.lstrip().startswith("{"):
            with open(doc, encoding="utf-8") as fh:
                doc = json.load(fh)
        elif isinstance(doc, str):
            doc = json.loads(doc)
        jsonschema.validate(doc, load_json_schema("genspec.schema.json"))
        return cls(**doc)

    @property
    def n(self) -> int:
        return 1 << self.scale

    @property
    def m(self) -> int:
        return self.edge_factor << self.scale

    def ptype_schema(self) -> list[tuple]:
        out = []
        for i in range(self.ptypes):
            name, *rest = DEFAULT_PTYPES[i % len(DEFAULT_PTYPES)]
            suffix = "" if i < len(DEFAULT_PTYPES) else f"_{i // len(DEFAULT_PTYPES)}"
            out.append((name + suffix, *rest))
        return out


def _kronecker_batch(rng: np.random.Generator, scale: int, count: int):
    ab, c_norm, a_norm = A + B, C / (1 - (A + B)), A / (A + B)
    src = np.zeros(count, dtype=np.int64)
    dst = np.zeros(count, dtype=np.int64)
    for bit in range(scale):
        ii = rng.random(count) > ab
        jj = rng.random(count) > np.where(ii, c_norm, a_norm)
        src |= ii.astype(np.int64) << bit
        dst |= jj.astype(np.int64) << bit
    return src, dst


_edge_lock = threading.Lock()


@lru_cache(maxsize=4)
def _edges_cached(scale: int, edge_factor: int, seed: int):
    n, m = 1 << scale, edge_factor << scale
    rng = np.random.default_rng([seed, 0x4B52])
    keys = np.empty(0, dtype=np.int64)
    drawn = 0
    while len(keys) < m:
        want = max(m - len(keys), 1024)
        want += want // 4
        src, dst = _kronecker_batch(rng, scale, want)
        drawn += want
        batch = src * n + dst
        batch = batch[src != dst]
        merged = np.concatenate([keys, batch])
        _, first = np.unique(merged, return_index=True)
        keys = merged[np.sort(first)]
    keys = keys[:m]
    perm = np.random.default_rng([seed, 0x5045]).permutation(n)
    src, dst = perm[keys // n], perm[keys % n]
    src.setflags(write=False)
    dst.setflags(write=False)
    return src, dst, drawn


def kronecker_edges(scale: int, edge_factor: int = 16, seed: int = 1):
    """Exactly ``edge_factor * 2**scale`` distinct directed non-loop edges.

    Returns ``(src, dst, drawn)`` where ``drawn`` counts raw samples used.
    """
    with _edge_lock:
        return _edges_cached(scale, edge_factor, seed)


def vertex_attributes(spec: GenSpec) -> tuple[np.ndarray, list[tuple[str, list]]]:
    """Label index per vertex and per-type value columns, from one seeded stream."""
    n = spec.n
    rng = np.random.default_rng([spec.seed, 0x4C41])
    weights = spec.rules.get("label_weights")
    if weights is None:
        labels = rng.integers(0, spec.labels, n)
    else:
        w = np.asarray(weights, dtype=float)
        labels = rng.choice(spec.labels, size=n, p=w / w.sum())
    prob = spec.rules.get("property_probability", 1.0)
    slen = int(spec.rules.get("string_length", 16))
    multi_max = int(spec.rules.get("multi_max", 3))
    columns = []
    for name, entity, dt, _, limit in spec.ptype_schema():
        p = prob.get(name, 1.0) if isinstance(prob, dict) else float(prob)
        present = rng.random(n) < p
        if dt is Datatype.U64 and entity is EntityType.MULTI:
            counts = rng.integers(1, multi_max + 1, n)
            flat = rng.integers(0, 1 << 32, int(counts.sum())).tolist()
            splits = np.cumsum(counts)[:-1]
            vals = [list(x) for x in np.split(np.asarray(flat, dtype=np.int64), splits)]
            vals = [[int(v) for v in x] for x in vals]
        elif dt is Datatype.U64:
            vals = rng.integers(0, 1 << 32, n).tolist()
        elif dt is Datatype.F64:
            vals = rng.random(n).tolist()
        else:
            size = min(slen, limit)
            chars = _ALPHABET[rng.integers(0, len(_ALPHABET), (n, size))]
            vals = [bytes(row).decode("ascii") for row in chars]
        columns.append((name, [v if ok else None for v, ok in zip(vals, present.tolist())]))
    return labels, columns


def create_schema(db: Database, spec: GenSpec) -> dict:
    """Collectively create the generator's labels and property types."""
    labels = [db.create_label(f"L{i}") for i in range(spec.labels)]
    ptypes = [db.create_property_type(name, ent, dt, st, lim)
              for name, ent, dt, st, lim in spec.ptype_schema()]
    return {"labels": labels, "property_types": ptypes}


def generate(spec: GenSpec, db: Database, chunk: int = 1024) -> dict:
    """Create the graph of ``spec`` in ``db``; collective, or self-launching from the host."""
    world = db.world
    if not world.in_run:
        return world.run(generate, spec, db, chunk)[0]
    if world.allreduce(len(db.pool.blocks_of_kind(world.rank, BlockKind.VERTEX))):
        raise GdiError("generate needs an empty database")
    schema = create_schema(db, spec)
    src, dst, drawn = kronecker_edges(spec.scale, spec.edge_factor, spec.seed)
    label_idx, columns = vertex_attributes(spec)
    lids = [l.int_id for l in schema["labels"]]
    ptypes = schema["property_types"]

    def vlabels(i):
        return (lids[label_idx[i]],)

    def vprops(i):
        out = []
        for pt, (_, col) in zip(ptypes, columns):
            v = col[i]
            if v is None:
                continue
            if isinstance(v, list):
                out.extend((pt, x) for x in v)
            else:
                out.append((pt, v))
        return out

    app_ids = [i.to_bytes(8, "little") for i in range(spec.n)]
    try:
        report = ingest(db, app_ids, src, dst, None, True, vlabels, vprops, chunk)
    except ResourceError as exc:
        need = required_blocks(spec, db.pool.block_size, world.nranks)
        raise ResourceError(f"{exc}; about {need} blocks per rank are needed") from exc
    report.update(scale=spec.scale, edge_factor=spec.edge_factor, seed=spec.seed,
                  raw_samples=int(drawn), dedup_policy="drop self loops and duplicates, redraw")
    return report


def required_blocks(spec: GenSpec, block_size: int, nranks: int) -> int:
    """Generous per-rank block budget for :func:`generate`."""
    src, dst, _ = kronecker_edges(spec.scale, spec.edge_factor, spec.seed)
    deg = np.bincount(src, minlength=spec.n) + np.bincount(dst, minlength=spec.n)
    props = 24 * spec.ptypes + 8 * spec.ptypes
    body = 32 + 8 + 16 + 24 * deg + props
    per_vertex = np.ceil((body + 64) / (block_size - 8)).astype(np.int64)
    per_rank = [int(per_vertex[r::nranks].sum()) for r in range(nranks)]
    return int(max(per_rank) * 1.25) + 256
