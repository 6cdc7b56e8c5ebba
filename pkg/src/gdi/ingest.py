"""Collective bulk ingestion of vertices and edges.

Vertex ``i`` goes to rank ``i mod P``. Every rank first reserves the primary
blocks of its vertices so that all references are known up front, then fills
its holders (labels, properties, both kinds of edge entries it owns) in
chunked collective write transactions.
"""
from __future__ import annotations

import json
from typing import Callable, Sequence

import numpy as np

from .blocks import NULL_REF
from .database import Database, app_id_bytes
from .errors import GdiError, ResourceError
from .graph import LW_DTYPE, MARK_LABEL, MIRROR, Orientation
from .txn import Mode, Status


def ingest(db: Database, app_ids: Sequence[bytes], src, dst, edge_labels=None,
           directed: bool = True, vertex_labels: Callable[[int], Sequence[int]] | None = None,
           vertex_props: Callable[[int], Sequence] | None = None, chunk: int = 1024) -> dict:
    """Load a graph; collective inside ``World.run``, self-launching from the host.

    ``src``/``dst`` index into ``app_ids``. ``vertex_labels(i)`` yields label
    ids and ``vertex_props(i)`` yields ``(PropertyType, value)`` pairs.
    """
    world = db.world
    if not world.in_run:
        return world.run(ingest, db, app_ids, src, dst, edge_labels, directed, vertex_labels,
                         vertex_props, chunk)[0]
    rank, p = world.rank, world.nranks
    n = len(app_ids)
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    elab = (np.zeros(len(src), dtype=np.uint32) if edge_labels is None
            else np.asarray(edge_labels, dtype=np.uint32))
    if len(src) and (src.min() < 0 or max(src.max(), dst.max()) >= n):
        raise GdiError("edge endpoint outside the vertex range")
    vertex_labels = vertex_labels or (lambda i: ())
    vertex_props = vertex_props or (lambda i: ())

    owned = np.arange(rank, n, p)
    reserved = []
    for _ in owned:
        ref = db.pool.acquire_block(rank)
        if ref == NULL_REF:
            break
        reserved.append(ref)
    short = world.allreduce(int(len(reserved) < len(owned)), "max")
    if short:
        for ref in reserved:
            db.pool.release_block(ref)
        raise ResourceError(f"not enough blocks for {n} vertices over {p} ranks")
    per_rank = world.allgather(np.array(reserved, dtype=np.uint64))
    refs = np.zeros(n, dtype=np.uint64)
    for r, arr in enumerate(per_rank):
        refs[r::p] = arr

    # lightweight entries owned by this rank, grouped by local vertex
    out_dir = Orientation.OUTGOING if directed else Orientation.UNDIRECTED
    mine_out = np.flatnonzero(src % p == rank)
    mine_in = np.flatnonzero(dst % p == rank)
    owner = np.concatenate([src[mine_out] // p, dst[mine_in] // p])
    entries = np.zeros(len(owner), dtype=LW_DTYPE)
    entries["nbr"] = np.concatenate([refs[dst[mine_out]], refs[src[mine_in]]])
    entries["edge"] = NULL_REF
    entries["label"] = np.concatenate([elab[mine_out], elab[mine_in]])
    entries["flags"] = np.concatenate([np.full(len(mine_out), int(out_dir)),
                                       np.full(len(mine_in), int(MIRROR[out_dir]))])
    order = np.argsort(owner, kind="stable")
    owner, entries = owner[order], entries[order]
    bounds = np.searchsorted(owner, np.arange(len(owned) + 1))

    rounds = world.allreduce(-(-len(owned) // chunk), "max")
    handed = 0
    try:
        for c in range(rounds):
            txn = db.start_collective_transaction(Mode.WRITE)
            stop = min((c + 1) * chunk, len(owned))
            handed = max(handed, stop)
            for li in range(c * chunk, stop):
                i = int(owned[li])
                h = txn.create_vertex(app_id_bytes(app_ids[i]), _block=reserved[li])
                for lid in vertex_labels(i):
                    h.entries.append((MARK_LABEL, int(lid).to_bytes(4, "little")))
                for ptype, value in vertex_props(i):
                    h.add_property(ptype, value)
                h.lw = entries[bounds[li]:bounds[li + 1]].tolist()
            if txn.close(True) is not Status.COMMITTED:
                raise GdiError(f"bulk ingest chunk {c} aborted: {txn.error}")
    finally:
        for ref in reserved[handed:]:
            db.pool.release_block(ref)
    counts = world.allgather(len(owned))
    return {"vertices": n, "edges": int(len(src)), "per_rank_vertices": counts,
            "directed": directed}


def read_edge_list(path: str):
    """Parse ``u v [label]`` lines; returns (vertex tokens, src, dst, labels)."""
    tokens: dict[str, int] = {}
    src, dst, labels = [], [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if len(parts) not in (2, 3):
                raise ValueError(f"{path}:{lineno}: expected 'u v [label]'")
            for tok in parts[:2]:
                tokens.setdefault(tok, len(tokens))
            src.append(tokens[parts[0]])
            dst.append(tokens[parts[1]])
            labels.append(parts[2] if len(parts) == 3 else None)
    return list(tokens), src, dst, labels


def bulk_load(db: Database, edge_path: str, vertex_path: str | None = None,
              directed: bool = True, chunk: int = 1024) -> dict:
    """Load an edge list plus an optional JSON file of vertex labels/properties.

    The vertex file maps an application id to
    ``{"labels": [...], "props": {"name": value or [values]}}``. Labels and
    property types must already exist.
    """
    names, src, dst, elabels = read_edge_list(edge_path)
    attrs = {}
    if vertex_path:
        with open(vertex_path, encoding="utf-8") as fh:
            attrs = json.load(fh)
        index = {t: i for i, t in enumerate(names)}
        for tok in attrs:
            if tok not in index:
                index[tok] = len(names)
                names.append(tok)
    cat = db.catalog
    lab = np.array([0 if l is None else cat.label_from_name(l).int_id for l in elabels],
                   dtype=np.uint32)
    labels_of = {}
    props_of = {}
    for i, tok in enumerate(names):
        spec = attrs.get(tok)
        if not spec:
            continue
        labels_of[i] = [cat.label_from_name(l).int_id for l in spec.get("labels", [])]
        pairs = []
        for pname, value in spec.get("props", {}).items():
            pt = cat.property_type_from_name(pname)
            values = value if pt.entity.value == "multi" and isinstance(value, list) else [value]
            pairs.extend((pt, v) for v in values)
        props_of[i] = pairs

    def vprops(i):
        # ptype objects differ per rank replica; resolve by id on the caller's rank
        local = db.catalog
        return [(local.property_type_from_id(pt.int_id), v) for pt, v in props_of.get(i, ())]

    return ingest(db, [app_id_bytes(t) for t in names], src, dst, lab, directed,
                  lambda i: labels_of.get(i, ()), vprops, chunk)
