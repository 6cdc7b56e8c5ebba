"""``gdi-bench``: generate a graph, run one workload, emit a report."""
from __future__ import annotations

import argparse
import sys
import time

import numpy as np

from .. import __version__
from ..database import Database, EngineConfig
from ..gen import GenSpec, generate, kronecker_edges, required_blocks
from ..ingest import bulk_load
from ..rma import World
from . import olap, oracles
from .oltp import MIXES, run_oltp
from .report import write_report

OLTP = ("rm", "ri", "wi", "lb", "read")
OLAP = ("bfs", "khop", "pr", "wcc", "cdlp", "lcc", "gcn", "bi")
WORKLOADS = OLTP + OLAP + ("bulk",)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gdi-bench", description=__doc__)
    ap.add_argument("--workload", choices=WORKLOADS, default="rm")
    ap.add_argument("--ranks", type=int, default=1)
    ap.add_argument("--scale", type=int, default=10)
    ap.add_argument("--edge-factor", type=int, default=16)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--labels", type=int, default=20, help="generator label catalog size")
    ap.add_argument("--ptypes", type=int, default=13, help="generator property-type count")
    ap.add_argument("--gen-spec", help="JSON generator spec; overrides the generator flags")
    ap.add_argument("--queries", type=int, default=1000, help="measured OLTP ops per rank")
    ap.add_argument("--warmup", type=int, default=100, help="unmeasured OLTP ops per rank")
    ap.add_argument("--delay", type=float, default=0.0,
                    help="modelled seconds per remote operation during OLTP runs")
    ap.add_argument("--roots", type=int, default=10, help="BFS/k-hop source vertices")
    ap.add_argument("--k", type=int, default=2, help="k-hop radius")
    ap.add_argument("--iters", type=int, default=10, help="PageRank/CDLP iterations")
    ap.add_argument("--layers", type=int, default=2, help="GCN layers")
    ap.add_argument("--features", type=int, default=4, help="GCN feature width")
    ap.add_argument("--edge-list", help="input for --workload bulk (u v [label] lines)")
    ap.add_argument("--vertex-file", help="JSON vertex attributes for --workload bulk")
    ap.add_argument("--undirected", action="store_true", help="bulk-load edges as undirected")
    ap.add_argument("--block-size", type=int, default=512)
    ap.add_argument("--blocks-per-rank", type=int, default=0, help="0 sizes the pool automatically")
    ap.add_argument("--index-capacity", type=int, default=1 << 16)
    ap.add_argument("--format", choices=("json", "csv"), default="json")
    ap.add_argument("--out", default="-", help="report path, '-' for stdout")
    ap.add_argument("--audit", action="store_true",
                    help="check invariants and oracle answers; exit 2 on any violation")
    return ap


def _pool_size(args, spec: GenSpec | None) -> int:
    if args.blocks_per_rank:
        return args.blocks_per_rank
    if spec is None:
        return 4096
    extra = 2 * (args.queries + args.warmup) + spec.n // args.ranks + 256
    return required_blocks(spec, args.block_size, args.ranks) + extra


def _pick_roots(n: int, count: int, seed: int) -> list[int]:
    rng = np.random.default_rng([seed, 0x524F])
    return sorted(rng.choice(n, size=min(count, n), replace=False).tolist())


def _olap(args, db: Database, n: int, edges):
    """Run an analytics workload; returns (result summary, oracle mismatches)."""
    w = args.workload
    bad: list[str] = []
    adj = oracles.simple_undirected(n, *edges) if edges is not None and args.audit else None
    if w in ("bfs", "khop"):
        roots = _pick_roots(n, args.roots, args.seed)
        per_root = {}
        for root in roots:
            if w == "bfs":
                depth = olap.run_bfs(db, root)
                per_root[str(root)] = {"reached": len(depth),
                                       "max_depth": max(depth.values(), default=0)}
                if adj is not None and depth != oracles.bfs_depths(adj, root):
                    bad.append(f"bfs depths differ from oracle for root {root}")
            else:
                hood = olap.run_khop(db, root, args.k)
                per_root[str(root)] = {"reached": len(hood)}
                if adj is not None and hood != oracles.khop(adj, root, args.k):
                    bad.append(f"{args.k}-hop set differs from oracle for root {root}")
        out = {"roots": per_root, "root_selection": "uniform without replacement, seeded"}
        if w == "khop":
            out["k"] = args.k
        return out, bad
    if w == "pr":
        pr = olap.run_pagerank(db, args.iters)
        vec = np.array([pr[i] for i in range(n)])
        top = np.argsort(-vec, kind="stable")[:10]
        if adj is not None:
            l1 = float(np.abs(vec - oracles.pagerank(adj, args.iters)).sum())
            if l1 >= 1e-8:
                bad.append(f"pagerank L1 distance {l1:.3e} to oracle")
        return {"iters": args.iters, "sum": float(vec.sum()),
                "top": [[int(i), float(vec[i])] for i in top]}, bad
    if w == "wcc":
        comp = olap.run_wcc(db)
        sizes = np.bincount(np.array([comp[i] for i in range(n)]), minlength=n)
        if adj is not None and [comp[i] for i in range(n)] != oracles.wcc(adj).tolist():
            bad.append("wcc components differ from oracle")
        return {"components": int((sizes > 0).sum()), "largest": int(sizes.max())}, bad
    if w == "cdlp":
        lab = olap.run_cdlp(db, args.iters)
        got = [lab[i] for i in range(n)]
        if adj is not None and got != oracles.cdlp(adj, args.iters).tolist():
            bad.append("cdlp labels differ from oracle")
        return {"iters": args.iters, "communities": len(set(got))}, bad
    if w == "lcc":
        cc = olap.run_lcc(db)
        vec = np.array([cc[i] for i in range(n)])
        if edges is not None and args.audit:
            _, ref = oracles.lcc(n, *edges)
            err = float(np.max(np.abs(vec - np.array([ref[i] for i in range(n)]))))
            if err > 1e-12:
                bad.append(f"lcc differs from oracle by {err:.3e}")
        return {"mean": float(vec.mean()), "max": float(vec.max())}, bad
    if w == "gcn":
        olap.add_features(db, args.features)
        out = olap.run_gcn(db, args.layers)
        got = np.array([out[i] for i in range(n)])
        if edges is not None and args.audit:
            x = np.array([olap.feature_of(i, args.features) for i in range(n)])
            wts, b = olap.gcn_weights(args.features)
            ref = oracles.gcn(oracles.multigraph_counts(n, *edges), x, wts, b, args.layers)
            err = float(np.max(np.abs(got - ref) / np.maximum(np.abs(ref), 1e-300)))
            if err > 1e-9:
                bad.append(f"gcn features differ from oracle (relative {err:.3e})")
        return {"layers": args.layers, "checksum": float(got.sum()),
                "nonzero_fraction": float((got != 0).mean())}, bad
    olap.prepare_bi(db)
    count = olap.run_bi(db)
    if edges is not None and args.audit:
        want = oracles.bi_count(*edges, olap.bi_role, olap.bi_owns)
        if count != want:
            bad.append(f"bi count {count} differs from oracle {want}")
    return {"count": count}, bad


def run(args) -> tuple[dict, int]:
    """Execute one benchmark; returns (report, exit status)."""
    if args.workload == "bulk" and args.edge_list:
        spec = None
    else:
        spec = (GenSpec.from_json(args.gen_spec) if args.gen_spec else
                GenSpec(args.scale, args.edge_factor, args.labels, args.ptypes, args.seed))
        args.scale, args.edge_factor, args.seed = spec.scale, spec.edge_factor, spec.seed
    world = World(args.ranks)
    config = EngineConfig(block_size=args.block_size, blocks_per_rank=_pool_size(args, spec),
                          index_capacity=args.index_capacity)
    db = Database(world, config)
    timing = {}
    t = time.perf_counter()
    if spec is None:
        graph = bulk_load(db, args.edge_list, args.vertex_file, not args.undirected)
    else:
        graph = generate(spec, db)
    timing["load_s"] = time.perf_counter() - t
    edges = None
    if spec is not None:
        src, dst, _ = kronecker_edges(spec.scale, spec.edge_factor, spec.seed)
        edges = (src, dst)

    report = {"tool": "gdi-bench", "version": __version__, "workload": args.workload,
              "config": {k: v for k, v in sorted(vars(args).items())
                         if k not in ("out", "format")}}
    report["config"]["blocks_per_rank"] = config.blocks_per_rank
    report["graph"] = {k: v for k, v in graph.items()}
    violations: list[str] = []
    t = time.perf_counter()
    if args.workload in OLTP:
        world.delay = args.delay
        try:
            stats = run_oltp(db, MIXES[args.workload], args.queries, range(graph["vertices"]),
                             args.seed, args.warmup)
        finally:
            world.delay = 0.0
        report["oltp"] = stats
        report["result"] = {"throughput_ops": stats["throughput_ops"],
                            "failed_fraction": stats["failed_fraction"]}
        for op, o in stats["ops"].items():
            if sum(o["histogram"]) != o["attempted"]:
                violations.append(f"{op} histogram total differs from attempted ops")
    elif args.workload == "bulk":
        report["result"] = {"edges_per_s": graph["edges"] / max(timing["load_s"], 1e-9)}
    else:
        report["result"], bad = _olap(args, db, graph["vertices"], edges)
        violations += bad
    timing["workload_s"] = time.perf_counter() - t
    report["timing"] = timing
    if args.audit:
        violations = db.audit() + violations
    report["audit"] = {"ran": bool(args.audit), "violations": violations}
    return report, 2 if violations else 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.ranks < 1:
        print("gdi-bench: --ranks must be at least 1", file=sys.stderr)
        return 1
    if args.workload != "bulk" and (args.edge_list or args.vertex_file):
        print("gdi-bench: --edge-list/--vertex-file only apply to --workload bulk",
              file=sys.stderr)
        return 1
    report, status = run(args)
    text = write_report(report, args.out, args.format)
    if args.out == "-":
        sys.stdout.write(text)
    for v in report["audit"]["violations"]:
        print(f"gdi-bench: violation: {v}", file=sys.stderr)
    return status


if __name__ == "__main__":
    sys.exit(main())
