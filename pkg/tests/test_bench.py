import csv
import io
import json
from fractions import Fraction

import numpy as np
import pytest
from scipy.stats import chisquare

from gdi import app_id_bytes, ingest
from gdi.bench import olap, oracles
from gdi.bench.cli import main
from gdi.bench.oltp import BUCKET_EDGES_NS, MIXES, OPS, OltpMix, histogram, percentile, run_oltp
from gdi.bench.report import flatten, render, validate_report
from gdi.errors import NotFoundError


def _graph(make_db, n, edges, ranks=2):
    db = make_db(ranks=ranks)
    src = [a for a, _ in edges]
    dst = [b for _, b in edges]
    ingest(db, [app_id_bytes(i) for i in range(n)], src, dst)
    return db


def test_mix_validation():
    with pytest.raises(ValueError):
        OltpMix.from_percent("short", [50, 50])
    with pytest.raises(ValueError):
        OltpMix.from_percent("over", [50, 50, 1, 0, 0, 0, 0])
    with pytest.raises(ValueError):
        OltpMix("neg", (Fraction(2), Fraction(-1)) + (Fraction(0),) * 5)
    for mix in MIXES.values():
        assert sum(mix.weights) == 1
    assert MIXES["read"].read_only and MIXES["rm"].read_only is False


def test_sampler_matches_weights():
    mix = MIXES["wi"]
    draw = mix.sampler(np.random.default_rng(3))
    n = 20000
    counts = dict.fromkeys(OPS, 0)
    for _ in range(n):
        counts[draw()] += 1
    live = [op for op, w in zip(OPS, mix.weights) if w]
    assert all(counts[op] == 0 for op, w in zip(OPS, mix.weights) if not w)
    exp = [float(w) * n for w in mix.weights if w]
    assert chisquare([counts[op] for op in live], exp).pvalue > 1e-4


def test_histogram_and_percentile():
    samples = [1, 110, 10**4, 10**12]
    hist = histogram(samples)
    assert sum(hist) == 4 and hist[0] == 2 and hist[-1] == 1
    assert len(hist) == len(BUCKET_EDGES_NS) - 1
    assert percentile([0] * len(hist), 0.5) == 0.0
    assert percentile(hist, 0.99) == float(BUCKET_EDGES_NS[-1])


def test_oltp_counts_and_reproducible_sequences(make_db):
    db = _graph(make_db, 30, [(i, (i * 7 + 1) % 30) for i in range(30)])
    a = run_oltp(db, "lb", queries=80, seed=4, warmup=5)
    assert a["attempted"] == 160
    for o in a["ops"].values():
        assert sum(o["histogram"]) == o["attempted"] == sum(o["outcomes"].values())
    b = run_oltp(_graph(make_db, 30, [(i, (i * 7 + 1) % 30) for i in range(30)]),
                 "lb", queries=80, seed=4, warmup=5)
    assert a["op_sequence_sha256"] == b["op_sequence_sha256"]
    assert run_oltp(db, "read", queries=50, seed=1, warmup=0)["failed"] == 0
    assert db.audit() == []


def test_bfs_and_khop(make_db):
    db = _graph(make_db, 5, [(0, 1), (2, 1), (3, 4)])
    assert olap.run_bfs(db, 0) == {0: 0, 1: 1, 2: 2}
    assert olap.run_khop(db, 0, 0) == {0}
    assert olap.run_khop(db, 2, 1) == {1, 2}
    with pytest.raises(NotFoundError):
        olap.run_bfs(db, 99)


def test_pagerank_small_cases(make_db):
    db = _graph(make_db, 2, [(0, 1)])
    assert olap.run_pagerank(db, 30) == pytest.approx({0: 0.5, 1: 0.5})
    db = _graph(make_db, 4, [(0, 1), (1, 2)])
    assert olap.run_pagerank(db, 0) == {i: 0.25 for i in range(4)}
    assert sum(olap.run_pagerank(db, 15).values()) == pytest.approx(1.0, abs=1e-12)


def test_wcc_lcc_on_disjoint_triangles(make_db):
    db = _graph(make_db, 7, [(0, 1), (1, 2), (2, 0), (3, 4), (4, 5), (5, 3), (3, 3)])
    assert olap.run_wcc(db) == {0: 0, 1: 0, 2: 0, 3: 3, 4: 3, 5: 3, 6: 6}
    cc = olap.run_lcc(db)
    assert all(cc[i] == 1.0 for i in range(6)) and cc[6] == 0.0


def test_cdlp_cliques(make_db):
    k3 = [(0, 1), (1, 2), (0, 2)]
    k4 = [(a, b) for a in range(3, 7) for b in range(a + 1, 7)]
    db = _graph(make_db, 8, k3 + k4 + [(2, 3)])
    lab = olap.run_cdlp(db, 5)
    assert lab == {0: 0, 1: 0, 2: 0, 3: 3, 4: 3, 5: 3, 6: 3, 7: 7}


def test_gcn_hand_computed(make_db):
    db = _graph(make_db, 4, [(0, 1), (1, 2)])
    olap.add_features(db, 2)
    x = {i: np.array(olap.feature_of(i, 2)) for i in range(4)}
    relu = lambda v: tuple(np.maximum(v, 0.0))
    out = olap.run_gcn(db, 1, weights=(np.eye(2), np.zeros(2)))
    assert out[0] == pytest.approx(relu(x[0] + x[1]))
    assert out[1] == pytest.approx(relu(x[0] + x[1] + x[2]))
    assert out[2] == pytest.approx(relu(x[1] + x[2]))
    assert out[3] == pytest.approx(relu(x[3]))


def test_gcn_zero_layers_keeps_features(make_db):
    db = _graph(make_db, 3, [(0, 1)])
    olap.add_features(db, 3)
    assert olap.run_gcn(db, 0) == {i: tuple(olap.feature_of(i, 3)) for i in range(3)}


def _roles(limit):
    people = [a for a in range(limit) if olap.bi_role(a)[0] == "person"]
    cars = [a for a in range(limit) if olap.bi_role(a)[0] == "car"]
    return people, cars


def test_bi_planted_answer(make_db):
    people, cars = _roles(400)
    old = [p for p in people if olap.bi_role(p)[1] > 30]
    young = [p for p in people if olap.bi_role(p)[1] <= 30]
    red = [c for c in cars if olap.bi_role(c)[2] == "red"]
    blue = [c for c in cars if olap.bi_role(c)[2] != "red"]
    hits = [(p, c) for p in old for c in red if olap.bi_owns(p, c)][:7]
    noise = ([(p, c) for p in young for c in red if olap.bi_owns(p, c)][:3]
             + [(p, c) for p in old for c in blue if olap.bi_owns(p, c)][:3]
             + [(p, c) for p in old for c in red if not olap.bi_owns(p, c)][:3]
             + [(car, person) for person, car in hits[:3]])
    assert len(hits) == 7 and len(noise) == 12
    edges = hits + noise
    db = _graph(make_db, 400, edges)
    olap.prepare_bi(db)
    assert olap.run_bi(db) == 7
    s, d = zip(*edges)
    assert oracles.bi_count(s, d, olap.bi_role, olap.bi_owns) == 7


def test_bi_without_persons(make_db):
    others = [a for a in range(60) if olap.bi_role(a)[0] != "person"]
    db = make_db()
    ingest(db, [app_id_bytes(a) for a in others], [0, 1], [1, 2])
    olap.prepare_bi(db)
    assert olap.run_bi(db) == 0


def test_report_render_and_schema(make_db, tmp_path):
    out = tmp_path / "r.json"
    assert main(["--workload", "wcc", "--scale", "5", "--edge-factor", "4", "--ranks", "2",
                 "--audit", "--out", str(out)]) == 0
    report = json.loads(out.read_text())
    validate_report(report)
    assert json.loads(render(report, "json")) == report
    rows = list(csv.reader(io.StringIO(render(report, "csv"))))
    assert rows[0] == ["key", "value"]
    assert dict(rows[1:])["result.components"] == str(report["result"]["components"])
    assert len(rows) - 1 == len(flatten(report))


def test_cli_exit_codes(tmp_path, monkeypatch, capsys):
    assert main(["--ranks", "0"]) == 1
    assert main(["--workload", "bfs", "--edge-list", "x"]) == 1
    args = ["--workload", "bfs", "--scale", "5", "--edge-factor", "4", "--ranks", "2",
            "--roots", "2", "--audit", "--out", str(tmp_path / "a.json")]
    assert main(args) == 0
    monkeypatch.setattr(oracles, "bfs_depths", lambda adj, root: {})
    assert main(args) == 2
    assert "violation" in capsys.readouterr().err


def test_cli_oltp_and_bulk(tmp_path):
    out = tmp_path / "o.csv"
    assert main(["--workload", "ri", "--scale", "6", "--ranks", "2", "--queries", "40",
                 "--warmup", "0", "--audit", "--format", "csv", "--out", str(out)]) == 0
    assert "oltp.ops.add_edge.attempted" in out.read_text()
    edges = tmp_path / "e.txt"
    edges.write_text("a b\nb c\n")
    js = tmp_path / "b.json"
    assert main(["--workload", "bulk", "--edge-list", str(edges), "--undirected", "--audit",
                 "--out", str(js)]) == 0
    assert json.loads(js.read_text())["graph"]["edges"] == 2
