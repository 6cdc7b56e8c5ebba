import jsonschema
import numpy as np
import pytest

from gdi import Database, EngineConfig, World
from gdi.errors import GdiError, ResourceError
from gdi.gen import GenSpec, generate, kronecker_edges, required_blocks, vertex_attributes


def _build(spec, ranks, bs=256):
    db = Database(World(ranks), EngineConfig(block_size=bs, index_capacity=4 * spec.n + 64,
                                             blocks_per_rank=required_blocks(spec, bs, ranks)))
    return db, generate(spec, db)


def test_spec_validation():
    for bad in (dict(scale=0), dict(scale=3, edge_factor=0), dict(scale=3, labels=0),
                dict(scale=3, rules={"colour": 1}), dict(scale=3, labels=2,
                                                        rules={"label_weights": [1]})):
        with pytest.raises(ValueError):
            GenSpec(**bad)
    assert GenSpec(4).m == 16 * 16
    assert GenSpec.from_json('{"scale": 5, "seed": 3}').seed == 3
    with pytest.raises(jsonschema.ValidationError):
        GenSpec.from_json({"scale": 5, "colour": 1})


def test_edges_are_exact_distinct_and_loop_free():
    src, dst, drawn = kronecker_edges(10, 8, 5)
    assert len(src) == 8 << 10
    assert not np.any(src == dst)
    assert len(np.unique(src * 1024 + dst)) == len(src)
    assert drawn >= len(src)


def test_small_graph_is_identical_across_rank_counts():
    spec = GenSpec(4, 1, labels=3, ptypes=5, seed=9)
    snaps = []
    for p in (1, 2, 4):
        db, rep = _build(spec, p)
        assert rep["vertices"] == 16 and rep["edges"] == 16
        assert max(rep["per_rank_vertices"]) - min(rep["per_rank_vertices"]) <= 1
        assert db.audit() == []
        snaps.append(db.snapshot())
    assert snaps[0] == snaps[1] == snaps[2]


def test_label_rules():
    n = 1 << 12
    one = GenSpec(12, labels=20, rules={"label_weights": [1] + [0] * 19})
    assert np.all(vertex_attributes(one)[0] == 0)
    labels, _ = vertex_attributes(GenSpec(12, labels=20))
    counts = np.bincount(labels, minlength=20)
    sigma = np.sqrt(n * (1 / 20) * (19 / 20))
    assert np.all(np.abs(counts - n / 20) <= 5 * sigma)


def test_zero_ptypes_and_property_probability():
    spec = GenSpec(3, 1, labels=2, ptypes=0)
    db, _ = _build(spec, 2)
    assert all(not v["props"] and len(v["labels"]) == 1 for v in db.snapshot().values())
    _, cols = vertex_attributes(GenSpec(8, ptypes=2, rules={"property_probability": 0.0}))
    assert all(v is None for _, col in cols for v in col)


def test_preconditions():
    spec = GenSpec(3, 1)
    db, _ = _build(spec, 1)
    with pytest.raises(GdiError):
        generate(GenSpec(3, 1, seed=2), db)
    tiny = Database(World(1), EngineConfig(block_size=128, blocks_per_rank=4))
    with pytest.raises(ResourceError, match="needed"):
        generate(spec, tiny)
