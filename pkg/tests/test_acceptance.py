"""Acceptance checks. Each test prints one PASS/FAIL line for its criterion."""
import hashlib
import json
import random
import threading
import time
from fractions import Fraction

import numpy as np
import pytest

from _support import dht_delete_race, dht_disjoint_run, dht_oracle_run
from gdi import (BlockPool, Database, EngineConfig, Mode, Status, TransactionCritical, World,
                 app_id_bytes, ingest)
from gdi.bench import olap, oracles
from gdi.bench.cli import WORKLOADS, main
from gdi.bench.oltp import MIXES, OPS, run_oltp
from gdi.bench.report import validate_report
from gdi.blocks import NULL_REF, pack_head, unpack_head
from gdi.gen import GenSpec, generate, kronecker_edges, required_blocks


@pytest.fixture
def verdict(capsys):
    """Print the criterion line even when output is captured, then assert."""
    def report(number: int, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\ncriterion {number}: {'PASS' if ok else 'FAIL'} - {detail}")
        assert ok, detail
    return report


def _generated(spec, ranks, block_size=512, extra=0, delay=0.0):
    cfg = EngineConfig(block_size=block_size, index_capacity=4 * spec.n + 64,
                       blocks_per_rank=required_blocks(spec, block_size, ranks) + extra)
    db = Database(World(ranks, delay=delay), cfg)
    return db, generate(spec, db)


def test_1_dht_matches_map_oracle(verdict):
    t = time.perf_counter()
    bad = dht_oracle_run(100_000, seed=2024)
    secs = time.perf_counter() - t
    verdict(1, bad == 0 and secs < 10, f"1e5 ops, {bad} mismatches, {secs:.1f} s")


def test_2_dht_concurrency(verdict):
    table, parts = dht_disjoint_run(8, 10_000)
    survivors = {k: v for live, *_ in parts for k, v in live.items()}
    missing = sum(m for *_, m in parts)
    stored = dict(table.items())
    lost = sum(stored.get(k) != v for k, v in survivors.items())
    phantom = len(set(stored) - set(survivors))
    expected = sum(i - d for _, i, d, _ in parts)
    wins = dht_delete_race(8, 500)
    ok = (missing == lost == phantom == 0 and len(stored) == expected
          and all(w == 1 for w in wins))
    verdict(2, ok, f"lost {lost}, phantom {phantom}, live {len(stored)} vs {expected}, "
                   f"race winners {set(wins)}")


def test_3_block_store(verdict):
    w = World(8)
    pool = BlockPool(w, block_size=64, blocks_per_rank=64)
    owners: set[int] = set()
    guard = threading.Lock()
    duplicates = []

    def body():
        mine = []
        for i in range(400):
            ref = pool.acquire_block(i % 2)
            if ref != NULL_REF:
                with guard:
                    if ref in owners:
                        duplicates.append(ref)
                    owners.add(ref)
                mine.append(ref)
            if i % 3 == 0 and mine:
                ref = mine.pop(0)
                with guard:
                    owners.discard(ref)
                pool.release_block(ref)
        return mine

    held = [r for part in w.run(body) for r in part]
    storm_ok = not duplicates and len(held) == len(set(held)) == len(owners)
    for r in held:
        pool.release_block(r)
    freed_ok = pool.free_count() == pool.capacity

    small = BlockPool(World(1), block_size=64, blocks_per_rank=4)
    got = [small.acquire_block(0) for _ in range(4)]
    exhausted = small.acquire_block(0) == NULL_REF
    for r in got:
        small.release_block(r)
    stale = small.system.atomic_get(0, small.head_offset)
    a, b = small.acquire_block(0), small.acquire_block(0)
    small.release_block(a)
    now = small.system.atomic_get(0, small.head_offset)
    cas = small.system.atomic_cas(0, small.head_offset, stale, pack_head(3, 0))
    aba_ok = (unpack_head(now)[0] == unpack_head(stale)[0] and cas != stale
              and small.system.atomic_get(0, small.head_offset) == now)
    small.release_block(b)
    verdict(3, storm_ok and freed_ok and exhausted and aba_ok,
            f"duplicates {len(duplicates)}, free==capacity {freed_ok}, "
            f"exhaustion NULL_REF {exhausted}, stale-head CAS rejected {aba_ok}")


def _serial_order_exists(init: tuple, final: tuple, txns: list) -> bool:
    """Search serial orders, pruning any step whose recorded reads disagree."""
    seen = set()

    def dfs(done: frozenset, state: tuple) -> bool:
        if len(done) == len(txns):
            return state == final
        if (done, state) in seen:
            return False
        seen.add((done, state))
        for i, (reads, writes) in enumerate(txns):
            if i in done or any(state[v] != x for v, x in reads.items()):
                continue
            nxt = list(state)
            for v, x in writes.items():
                nxt[v] = x
            if dfs(done | {i}, tuple(nxt)):
                return True
        return False

    return dfs(frozenset(), init)


def test_4_serializability_and_audits(verdict, tmp_path):
    n = 16
    db = Database(World(2, delay=2e-4), EngineConfig(block_size=128, blocks_per_rank=256))
    val = db.create_property_type("val")
    ingest(db, [app_id_bytes(i) for i in range(n)], [], [],
           vertex_props=lambda i: [(val, i)])
    world = db.world

    def body():
        rng = random.Random(world.rank + 77)
        log = []
        for j in range(20):
            touched = rng.sample(range(n), 3)
            txn = db.start_transaction(Mode.WRITE)
            reads, writes = {}, {}
            try:
                for v in touched:
                    reads[v] = txn.vertex(app_id_bytes(v)).property_values(val)[0]
                tag = (world.rank * 100 + j) << 32
                for v in touched[:2]:
                    writes[v] = (sum(reads.values()) % (1 << 32)) + tag
                    txn.vertex(app_id_bytes(v)).update_property(val, writes[v])
            except TransactionCritical:
                txn.close(False)
                continue
            if txn.close(True) is Status.COMMITTED:
                log.append((reads, writes))
        return log

    committed = [t for part in world.run(body) for t in part]
    snap = db.snapshot()
    final = tuple(snap[app_id_bytes(i)]["props"]["val"][0] for i in range(n))
    serial_ok = _serial_order_exists(tuple(range(n)), final, committed)
    # negative control: two increments that both read 0 (a lost update)
    lost_update = [({0: 0}, {0: 1}), ({0: 0}, {0: 1})]
    serial_ok = serial_ok and not _serial_order_exists((0,), (1,), lost_update)
    hygiene = db.audit()

    failures = []
    for w in WORKLOADS:
        out = tmp_path / f"{w}.json"
        args = ["--workload", w, "--ranks", "2", "--audit", "--out", str(out)]
        if w == "bulk":
            edges = tmp_path / "edges.txt"
            edges.write_text("".join(f"{i} {(i * 5 + 1) % 40}\n" for i in range(80)))
            args += ["--edge-list", str(edges)]
        else:
            args += ["--scale", "7", "--edge-factor", "8", "--queries", "100", "--roots", "3"]
        if main(args) != 0:
            failures.append(w)
    verdict(4, serial_ok and not hygiene and not failures,
            f"{len(committed)}/40 committed, serial order found {serial_ok}, "
            f"audit issues {len(hygiene)}, benchmark runs failing audit {failures}")


def _digest(db) -> str:
    return hashlib.sha256(repr(sorted(db.snapshot().items())).encode()).hexdigest()


def test_5_generator(verdict):
    spec = GenSpec(14, 16, seed=5)
    digests = []
    stats = None
    for p in (1, 2, 4, 8):
        db, rep = _generated(spec, p)
        if stats is None:
            src, dst, _ = kronecker_edges(14, 16, 5)
            deg = np.bincount(np.concatenate([src, dst]), minlength=spec.n)
            counted = sum(len(v["edges"]) for v in db.snapshot().values())
            stats = (rep["vertices"], rep["edges"], int(deg.max()), deg.mean(),
                     counted == 2 * rep["edges"])
        spread = max(rep["per_rank_vertices"]) - min(rep["per_rank_vertices"])
        digests.append((_digest(db), spread))
    n, m, dmax, dmean, consistent = stats
    ok = (n == 16384 and abs(m - 262144) <= 0.02 * 262144 and dmax >= 20 * dmean
          and consistent and all(s <= 1 for _, s in digests)
          and len({d for d, _ in digests}) == 1)
    verdict(5, ok, f"n={n}, m={m}, max degree {dmax} vs mean {dmean:.1f}, "
                   f"rank spread {[s for _, s in digests]}, "
                   f"{len({d for d, _ in digests})} distinct graphs over P=1,2,4,8")


def _olap_against_oracles(scale: int) -> list[str]:
    spec = GenSpec(scale, 16, seed=3)
    db, _ = _generated(spec, 4, extra=64)
    n = spec.n
    src, dst, _ = kronecker_edges(scale, 16, 3)
    adj = oracles.simple_undirected(n, src, dst)
    bad = []
    roots = np.random.default_rng([scale, 1]).choice(n, 10, replace=False).tolist()
    for root in roots:
        if olap.run_bfs(db, root) != oracles.bfs_depths(adj, root):
            bad.append(f"bfs s{scale} root {root}")
        if olap.run_khop(db, root, 2) != oracles.khop(adj, root, 2):
            bad.append(f"khop s{scale} root {root}")
    pr = olap.run_pagerank(db, 20)
    l1 = np.abs(np.array([pr[i] for i in range(n)]) - oracles.pagerank(adj, 20)).sum()
    if not l1 < 1e-8:
        bad.append(f"pagerank s{scale} L1 {l1:.2e}")
    wcc = olap.run_wcc(db)
    if [wcc[i] for i in range(n)] != oracles.wcc(adj).tolist():
        bad.append(f"wcc s{scale}")
    lab = olap.run_cdlp(db, 10)
    if [lab[i] for i in range(n)] != oracles.cdlp(adj, 10).tolist():
        bad.append(f"cdlp s{scale}")
    cc = olap.run_lcc(db)
    _, ref = oracles.lcc(n, src, dst)
    if any(cc[i] != pytest.approx(ref[i], abs=1e-12) for i in range(n)):
        bad.append(f"lcc s{scale}")
    olap.prepare_bi(db)
    got, want = olap.run_bi(db), oracles.bi_count(src, dst, olap.bi_role, olap.bi_owns)
    if got != want:
        bad.append(f"bi s{scale} {got} != {want}")
    bad += [f"audit s{scale}: {v}" for v in db.audit()]
    return bad


def _gcn_checks() -> list[str]:
    bad = []
    db = Database(World(2), EngineConfig(block_size=128, blocks_per_rank=64))
    ingest(db, [app_id_bytes(i) for i in range(3)], [0, 1], [1, 2])
    olap.add_features(db, 2)
    x = [np.array(olap.feature_of(i, 2)) for i in range(3)]
    out = olap.run_gcn(db, 1, weights=(np.eye(2), np.zeros(2)))
    hand = [x[0] + x[1], x[0] + x[1] + x[2], x[1] + x[2]]
    if any(not np.allclose(out[i], np.maximum(hand[i], 0.0)) for i in range(3)):
        bad.append("gcn 3-vertex path")
    spec = GenSpec(8, 16, seed=3)
    db, _ = _generated(spec, 2, extra=64)
    olap.add_features(db, 4)
    got = olap.run_gcn(db, 2)
    src, dst, _ = kronecker_edges(8, 16, 3)
    dense = np.zeros((spec.n, spec.n))
    np.add.at(dense, (src, dst), 1.0)
    np.add.at(dense, (dst, src), 1.0)
    h = np.array([olap.feature_of(i, 4) for i in range(spec.n)])
    w, b = olap.gcn_weights(4)
    for _ in range(2):
        h = np.maximum((h + dense @ h) @ w.T + b, 0.0)
    if not np.allclose(np.array([got[i] for i in range(spec.n)]), h, rtol=1e-9, atol=1e-12):
        bad.append("gcn scale-8 dense reference")
    return bad


def test_6_olap_oracles(verdict):
    t = time.perf_counter()
    bad = _olap_against_oracles(12) + _olap_against_oracles(14) + _gcn_checks()
    secs = time.perf_counter() - t
    verdict(6, not bad and secs < 300, f"mismatches {bad or 'none'}, {secs:.0f} s")


def test_7_mix_fidelity(verdict):
    worst = 0.0
    for key in ("rm", "ri", "wi", "lb"):
        mix = MIXES[key]
        draw = mix.sampler(np.random.default_rng([7, len(key)]))
        counts = dict.fromkeys(OPS, 0)
        for _ in range(100_000):
            counts[draw()] += 1
        for op, w in zip(OPS, mix.weights):
            worst = max(worst, abs(counts[op] / 100_000 - float(w)))
    exact = all(sum(m.weights) == Fraction(1) for m in MIXES.values())
    verdict(7, worst <= 0.005 and exact, f"largest absolute deviation {worst:.4f}")


def test_8_conflicts(verdict):
    spec = GenSpec(14, 16, seed=8)
    db, rep = _generated(spec, 4, extra=4096, delay=1e-4)
    lb = run_oltp(db, "lb", queries=600, seed=8, warmup=50)
    read = run_oltp(db, "read", queries=300, seed=9, warmup=0)
    issues = db.audit()
    verdict(8, lb["failed_fraction"] <= 0.05 and read["failed"] == 0 and not issues,
            f"LB failed {lb['failed']}/{lb['attempted']} "
            f"({100 * lb['failed_fraction']:.2f}%), read-only failed {read['failed']}, "
            f"audit issues {len(issues)}")


def test_9_weak_scaling(verdict, tmp_path):
    throughput = {}
    valid = True
    for p, scale in ((1, 12), (2, 13), (4, 14), (8, 15)):
        out = tmp_path / f"rm{p}.json"
        code = main(["--workload", "rm", "--ranks", str(p), "--scale", str(scale),
                     "--queries", "300", "--warmup", "30", "--delay", "1e-4", "--audit",
                     "--out", str(out)])
        report = json.loads(out.read_text())
        try:
            validate_report(report)
        except Exception:
            valid = False
        valid = valid and code == 0
        throughput[p] = report["result"]["throughput_ops"]
    verdict(9, valid and throughput[8] > throughput[1],
            "RM ops/s " + ", ".join(f"P={p}: {t:.0f}" for p, t in throughput.items())
            + f"; reports schema-valid {valid}")
