import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lockseer import ingest as ig
from lockseer.ingest import LockEvent, LockMode, LockObjectType, ParseError

OBJ = LockObjectType


def ev(lock_id, start, end=None, obj=OBJ.TABLE, schema="TPCC", table="ORDERS", page=None, mode=LockMode.IX):
    if obj is OBJ.PAGE and page is None:
        page = 1
    return LockEvent(lock_id, start, start if end is None else end, mode, obj, schema, table, page)


# ---------------------------------------------------------------------------
# canonical format
# ---------------------------------------------------------------------------

def test_canonical_examples():
    e = ig.parse_canonical_line('{"lock_id":"L1","start_ns":100,"end_ns":250,"mode":"X","obj":"PAGE",'
                                '"schema":"TPCC","table":"ORDERLINE","page":512}')
    assert (e.lock_id, e.start_ns, e.end_ns, e.mode, e.obj, e.table, e.page) == \
        ("L1", 100, 250, LockMode.X, OBJ.PAGE, "ORDERLINE", 512)
    e = ig.parse_canonical_line('{"lock_id":"L2","start_ns":0,"end_ns":0,"mode":"IX","obj":"TABLE",'
                                '"schema":"TPCC","table":"ORDERS"}')
    assert e.start_ns == e.end_ns == 0 and e.page is None
    with pytest.raises(ParseError, match="end before start"):
        ig.parse_canonical_line('{"lock_id":"L3","start_ns":5,"end_ns":4,"mode":"X","obj":"TABLE",'
                                '"schema":"TPCC","table":"ORDERS"}')


@pytest.mark.parametrize("line, field", [
    ('{"lock_id":"a","start_ns":1,"end_ns":2,"mode":"Q","obj":"TABLE","schema":"S","table":"T"}', "mode"),
    ('{"lock_id":"a","start_ns":1,"end_ns":2,"mode":"X","obj":"ROW","schema":"S","table":"T"}', "obj"),
    ('{"lock_id":"a","start_ns":1,"end_ns":2,"mode":"X","obj":"PAGE","schema":"S","table":"T"}', "page"),
    ('{"lock_id":"a","start_ns":-1,"end_ns":2,"mode":"X","obj":"TABLE","schema":"S","table":"T"}', "start_ns"),
    ('{"lock_id":"a","start_ns":1,"end_ns":2,"mode":"X","obj":"TABLE","schema":"S","table":"T","page":3}', "page"),
    ('{"lock_id":"a","start_ns":1,"end_ns":2,"mode":"X","obj":"TABLE","schema":"S","table":""}', "table"),
])
def test_canonical_errors_name_field_and_line(line, field):
    with pytest.raises(ParseError) as info:
        ig.parse_canonical_line(line, line_no=7)
    assert info.value.field == field and info.value.line_no == 7
    assert "7" in str(info.value)


def test_canonical_rejects_garbage_and_extra_keys():
    for line in ("not json", "[1,2]", '{"lock_id":"a"}',
                 '{"lock_id":"a","start_ns":1,"end_ns":2,"mode":"X","obj":"TABLE","schema":"S","table":"T","x":1}'):
        with pytest.raises(ParseError):
            ig.parse_canonical_line(line)


def test_read_lockevents_lenient_counts(tmp_path):
    good = ig.serialize_event(ev("a", 1))
    events, summary = ig.read_lockevents([good, "", "bad", good.replace('"a"', '"b"')], strict=False)
    assert [e.lock_id for e in events] == ["a", "b"]
    assert summary.parsed == 2 and summary.skipped == 1
    with pytest.raises(ParseError):
        ig.read_lockevents(["bad"])
    path = tmp_path / "x.lockevents"
    assert ig.write_lockevents(events, path) == 2
    assert ig.load_lockevents(path)[0] == events


names = st.text(st.characters(whitelist_categories=("Lu", "Ll", "Nd")), min_size=1, max_size=8)


@st.composite
def lock_events(draw):
    obj = draw(st.sampled_from(list(OBJ)))
    start = draw(st.integers(0, 2**62))
    end = start + draw(st.integers(0, 2**20))
    table = "" if obj in (OBJ.TABLESPACE, OBJ.INTERNAL) and draw(st.booleans()) else draw(names)
    if obj in (OBJ.PAGE, OBJ.TABLE) and not table:
        table = "T"
    page = draw(st.integers(0, 2**40)) if obj is OBJ.PAGE else None
    return LockEvent(draw(names), start, end, draw(st.sampled_from(list(LockMode))), obj, draw(names), table, page)


@settings(max_examples=200)
@given(lock_events())
def test_canonical_roundtrip(e):
    line = ig.serialize_event(e)
    assert ig.parse_canonical_line(line) == e
    keys = list(json.loads(line))
    assert set(keys) <= {"lock_id", "start_ns", "end_ns", "mode", "obj", "schema", "table", "page"}
    assert ("page" in keys) == (e.obj is OBJ.PAGE)


# ---------------------------------------------------------------------------
# raw trace adapter
# ---------------------------------------------------------------------------

def test_raw_examples():
    frag = ig.parse_raw_db2_line("100 sqlplrq lock_id=L1 mode=IX obj=TABLE schema=TPCC table=ORDERS")
    assert isinstance(frag, ig.RequestFragment)
    assert (frag.table, frag.mode, frag.ts_ns) == ("ORDERS", LockMode.IX, 100)
    assert ig.parse_raw_db2_line("random noise line") is None
    events, summary = ig.read_raw_trace([
        "10 sqlplrq lock_id=L9 mode=X obj=PAGE schema=TPCC table=STOCK page=4",
        "noise",
        "30 sqlplrl lock_id=L9",
    ])
    assert [(e.start_ns, e.end_ns, e.page) for e in events] == [(10, 30, 4)]
    assert summary.parsed == 1 and summary.skipped == 0


def test_raw_unmatched_and_orphans():
    events, summary = ig.read_raw_trace([
        "5 sqlplrl lock_id=ghost",
        "10 sqlplrq lock_id=A mode=S obj=TABLE schema=TPCC table=ORDERS",
        "20 sqlplrq lock_id=B mode=S obj=TABLE schema=TPCC table=STOCK",
        "25 sqlplrem lock_id=B",
        "40 sqlplrq lock_id=C mode=S obj=TABLE schema=TPCC table=ITEM",
        "90 somethingelse",
        "77 sqlplrq lock_id=bad mode=ZZ obj=TABLE schema=TPCC table=ORDERS",
    ])
    by_id = {e.lock_id: e for e in events}
    assert by_id["B"].end_ns == 25
    # A and C never release: closed at the last well-formed lock timestamp
    assert by_id["A"].end_ns == 40 and by_id["C"].end_ns == 40
    assert summary.orphan_release == 1 and summary.unmatched_request == 2 and summary.skipped == 1
    assert "orphan_release=1" in summary.format()


def test_raw_formatters_roundtrip():
    e = ev("Z", 3, 9, obj=OBJ.PAGE, table="STOCK", page=12, mode=LockMode.U)
    events, _ = ig.read_raw_trace([ig.format_raw_request(e), ig.format_raw_release(e)])
    assert events == [e]


# ---------------------------------------------------------------------------
# transforms and report
# ---------------------------------------------------------------------------

def test_filter_examples():
    page = ev("p", 1, obj=OBJ.PAGE)
    cat = ev("c", 2, obj=OBJ.CATALOG)
    sys_t = ev("s", 3, schema="SYSIBM")
    assert list(ig.filter_events([page, cat, sys_t])) == [page]
    assert list(ig.filter_events([])) == []
    assert list(ig.filter_events([page, cat, sys_t], keep_objs=set(OBJ), excluded_schemas=set())) == [page, cat, sys_t]


@settings(max_examples=100)
@given(st.lists(lock_events(), max_size=30))
def test_filter_idempotent_and_sort_permutation(events):
    once = list(ig.filter_events(events))
    assert list(ig.filter_events(once)) == once
    s = ig.sort_chronological(events)
    assert sorted(map(ig.serialize_event, s)) == sorted(map(ig.serialize_event, events))
    assert all(a.start_ns <= b.start_ns for a, b in zip(s, s[1:]))
    assert ig.sort_chronological(s) == s
    assert ig.sort_chronological(list(reversed(events))) == s or len({(e.start_ns, e.end_ns, e.lock_id) for e in events}) < len(events)


def test_sort_examples():
    c, a, b = ev("C", 5), ev("A", 3), ev("B", 3)
    assert [e.lock_id for e in ig.sort_chronological([c, a, b])] == ["A", "B", "C"]
    assert ig.sort_chronological([a]) == [a]


def test_distribution_examples():
    events = [ev(f"p{i}", i, obj=OBJ.PAGE) for i in range(31)] + [ev(f"t{i}", i) for i in range(69)]
    rep = ig.lock_type_distribution(events)
    assert rep.percentages[OBJ.PAGE] == pytest.approx(31.0) and rep.percentages[OBJ.TABLE] == pytest.approx(69.0)
    assert rep.percentages[OBJ.PLAN] == 0.0 and rep.total == 100
    rep = ig.distribution_from_counts({o: 1 for o in OBJ})
    assert all(p == pytest.approx(12.5) for p in rep.percentages.values())
    empty = ig.lock_type_distribution([])
    assert empty.empty and empty.total == 0 and "(empty stream)" in empty.format()


PUBLISHED_COUNTS = {
    OBJ.PAGE: (2_702_900, 31.00),
    OBJ.CATALOG: (2_213_913, 25.40),
    OBJ.TABLE: (2_178_913, 24.99),
    OBJ.VARIATION: (669_924, 7.68),
    OBJ.PLAN: (642_945, 7.38),
    OBJ.SEQUENCE: (300_970, 3.45),
    OBJ.INTERNAL: (8_254, 0.09),
    OBJ.TABLESPACE: (4, 0.00),
}


def test_distribution_matches_published_counts():
    rep = ig.distribution_from_counts({o: c for o, (c, _) in PUBLISHED_COUNTS.items()})
    assert rep.total == 8_717_823
    for obj, (count, pct) in PUBLISHED_COUNTS.items():
        assert rep.counts[obj] == count
        assert round(rep.percentages[obj], 2) == pct
    assert "2,702,900" in rep.format() and "31.00" in rep.format()


@settings(max_examples=100)
@given(st.dictionaries(st.sampled_from(list(OBJ)), st.integers(0, 10**7), min_size=1))
def test_distribution_percentages_sum(counts):
    rep = ig.distribution_from_counts(counts)
    assert sum(rep.counts.values()) == rep.total
    if rep.total:
        assert abs(sum(rep.percentages.values()) - 100) <= 0.01
