import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from gdi import Constraint, Orientation, app_id_bytes, has_label
from gdi.errors import GdiError, NotFoundError, PropertyValueError, TransactionError
from gdi.graph import (HEADER_SIZE, LW_SIZE, blocks_needed, decode_entries, decode_lw,
                       encode_entries, encode_lw, read_stream)


@given(st.lists(st.tuples(st.integers(0, 2**32 - 1).filter(lambda m: m != 1),
                          st.binary(max_size=40))))
def test_entry_round_trip(entries):
    assert decode_entries(encode_entries(entries)) == entries


@given(st.lists(st.tuples(st.integers(0, 2**64 - 1), st.integers(0, 2**64 - 1),
                          st.integers(0, 2**32 - 1), st.integers(0, 2**32 - 1)), max_size=20))
def test_lightweight_edge_round_trip(edges):
    raw = encode_lw(edges)
    assert len(raw) == LW_SIZE * len(edges)
    assert decode_lw(raw) == edges


@given(st.integers(0, 5000), st.sampled_from([64, 128, 512]))
def test_blocks_needed_is_minimal(body, bs):
    n = blocks_needed(body, bs)
    fits = lambda k: HEADER_SIZE + 8 * (k - 1) + body <= k * bs
    assert fits(n)
    assert n == 1 or not fits(n - 1)


@settings(max_examples=25, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(props=st.lists(st.text(st.characters(max_codepoint=126), max_size=30), max_size=12), n_edges=st.integers(0, 30))
def test_holder_survives_a_commit(make_db, props, n_edges):
    db = make_db(ranks=2, block_size=64, blocks_per_rank=512)
    note = db.create_property_type("note", "multi", "utf8", "max", 30)
    with db.start_transaction() as t:
        hub = t.create_vertex(app_id_bytes("hub"))
        for s in props:
            hub.add_property(note, s)
        others = [t.create_vertex(app_id_bytes(i)) for i in range(3)]
        for i in range(n_edges):
            t.create_edge(hub, others[i % 3], directed=bool(i % 2))
    with db.start_transaction("read") as t:
        h = t.vertex(app_id_bytes("hub"))
        assert h.property_values(note) == props
        assert h.degree() == n_edges
        hdr, blocks, _ = read_stream(db.pool, h.ref)
        assert len(blocks) == blocks_needed(h.body_len(), 64)
    assert db.audit() == []


def test_orientation_filters_and_self_loops(db):
    with db.start_transaction() as t:
        a, b, c = (t.create_vertex(app_id_bytes(i)) for i in range(3))
        t.create_edge(a, b)
        t.create_edge(c, a)
        t.create_edge(a, c, directed=False)
        t.create_edge(a, a)
    with db.start_transaction("read") as t:
        a = t.vertex(app_id_bytes(0))
        app = lambda refs: sorted(t.associate_vertex(r).app_id_int for r in refs)
        assert app(a.neighbors(Orientation.OUTGOING)) == [0, 1]
        assert app(a.neighbors(Orientation.INCOMING)) == [0, 2]
        assert app(a.neighbors(Orientation.UNDIRECTED)) == [2]
        assert a.degree() == 5
        e = t.edges_of(a, Orientation.OUTGOING)[0]
        assert e.direction is Orientation.OUTGOING


def test_edge_labels_properties_and_escalation(db):
    own, rent = db.create_label("OWN"), db.create_label("RENT")
    since = db.create_property_type("since")
    with db.start_transaction() as t:
        a, b = t.create_vertex(app_id_bytes(1)), t.create_vertex(app_id_bytes(2))
        e = t.create_edge(a, b, label=own)
        assert not e.heavy
        e.add_label(rent)
        e.add_property(since, 2001)
        assert e.heavy
    with db.start_transaction("read") as t:
        b = t.vertex(app_id_bytes(2))
        (e,) = t.edges_of(b, Orientation.INCOMING, Constraint.of([has_label(rent)]))
        assert sorted(l.name for l in e.labels()) == ["OWN", "RENT"]
        assert e.property_values(since) == [2001]
        ends = e.vertices()
        assert [t.associate_vertex(r).app_id_int for r in ends] == [1, 2]
    assert db.audit() == []


def test_holder_rules(db):
    lab = db.create_label("L")
    one = db.create_property_type("one")
    with db.start_transaction() as t:
        v = t.create_vertex(app_id_bytes(1))
        v.add_label(lab)
        with pytest.raises(GdiError, match="already has label"):
            v.add_label(lab)
        v.add_property(one, 1)
        with pytest.raises(PropertyValueError):
            v.add_property(one, 2)
        v.update_property(one, 5)
        assert v.property_values(one) == [5]
        assert v.remove_property(one) == 1
        assert v.property_values(one) == []
        v.remove_label(lab)
        with pytest.raises(NotFoundError):
            v.remove_label(lab)
    with db.start_transaction("read") as t:
        v = t.vertex(app_id_bytes(1))
        with pytest.raises(TransactionError):
            v.add_property(one, 3)
    with db.start_transaction() as t:
        with pytest.raises(NotFoundError):
            t.vertex(app_id_bytes(2))
