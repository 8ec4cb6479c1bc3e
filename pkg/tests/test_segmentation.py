import csv
import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pclv.segmentation import (
    GAP_TOLERANCE_CENTS,
    MigrationCell,
    Segment,
    assemble_report,
    migration_matrix,
    rank_by_pclv,
    report_json,
    segment_records,
    tercile_sizes,
    terciles,
    upside_decomposition,
    write_report_csv,
    write_report_json,
    write_targets,
)
from pclv.valuation import ValuationRecord

import published_cells

U, I, L = Segment.UPPER, Segment.INTERMEDIATE, Segment.LOWER


def rec(cid, actual, pclv):
    comps = ((1, pclv),) if pclv else ()
    return ValuationRecord(cid, actual, comps, pclv, actual + pclv)


def brute_terciles(ids, values):
    # rank by repeated max-extraction with id tie-break
    left = dict(zip(ids, values))
    order = []
    while left:
        best = min(left, key=lambda c: (-left[c], c))
        order.append(best)
        del left[best]
    n = len(ids)
    up = -(-n // 3)
    mid = -(-(n - up) // 2)
    seg = {}
    for k, c in enumerate(order):
        seg[c] = U if k < up else (I if k < up + mid else L)
    return [seg[c] for c in ids]


def test_segment_order_and_labels():
    assert U > I > L
    assert [s.label for s in (U, I, L)] == ["Upper", "Intermediate", "Lower"]
    assert Segment.parse(" upper ") is U
    with pytest.raises(ValueError):
        Segment.parse("middle")


@pytest.mark.parametrize("n,sizes", [(3, (1, 1, 1)), (9, (3, 3, 3)), (10, (4, 3, 3)), (11, (4, 4, 3)),
                                     (10_507, (3503, 3502, 3502))])
def test_tercile_sizes(n, sizes):
    assert tercile_sizes(n) == sizes


def test_nine_distinct_values():
    vals = np.array([5, 90, 30, 70, 10, 60, 20, 80, 40])
    seg = terciles(np.arange(1, 10), vals)
    assert sorted(vals[seg == U]) == [70, 80, 90]
    assert sorted(vals[seg == L]) == [5, 10, 20]


def test_ten_customers():
    seg = terciles(np.arange(10), np.arange(10)[::-1])
    assert list(seg) == [U] * 4 + [I] * 3 + [L] * 3


def test_all_equal_by_id():
    ids = np.array([7, 3, 9, 1, 5])
    seg = terciles(ids, np.zeros(5))
    assert dict(zip(ids, seg)) == {1: U, 3: U, 5: I, 7: I, 9: L}


def test_too_few_customers():
    with pytest.raises(ValueError):
        terciles([1, 2], [1, 2])
    with pytest.raises(ValueError):
        terciles([1, 1, 2], [1, 2, 3])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(-50, 50), min_size=3, max_size=40), st.randoms(use_true_random=False))
def test_terciles_match_brute_force(values, rnd):
    ids = list(range(100, 100 + len(values)))
    rnd.shuffle(ids)
    assert list(terciles(ids, values)) == brute_terciles(ids, values)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(-10**6, 10**6), min_size=3, max_size=40),
       st.floats(1e-3, 1e3), st.floats(-1e6, 1e6))
def test_affine_invariance(values, a, b):
    ids = np.arange(len(values))
    v = np.array(values, dtype=float)
    assert np.array_equal(terciles(ids, v), terciles(ids, a * v + b))


def displacement_fixture():
    # customer 9 jumps from the bottom to the top of total CLV and pushes customer 3 down
    actual = {1: 900, 2: 800, 3: 700, 4: 600, 5: 500, 6: 400, 7: 300, 8: 200, 9: 100}
    pclv = {c: 0 for c in actual}
    pclv[9] = 2000
    return [rec(c, actual[c], pclv[c]) for c in actual]


def test_displacement_fixture():
    records = displacement_fixture()
    ids = [r.customer for r in records]
    sa = brute_terciles(ids, [r.actual_clv_cents for r in records])
    st_ = brute_terciles(ids, [r.total_clv_cents for r in records])
    report = segment_records(records)
    expected = {}
    for c, a, t in zip(ids, sa, st_):
        expected[(a, t)] = expected.get((a, t), 0) + 1
    for (a, t), cell in report.cells.items():
        assert cell.n_customers == expected.get((a, t), 0)
    assert report.cell(L, U).n_customers == 1 and report.cell(L, U).pclv_cents == 2000
    # the lifted customer displaces the weakest Upper one
    assert report.cell(U, I).n_customers == 1 and report.cell(U, I).actual_clv_cents == 700
    assert report.cell(I, L).n_customers == 1 and report.cell(I, L).actual_clv_cents == 400
    assert report.flags == []


def test_zero_pclv_is_diagonal():
    records = [rec(c, v, 0) for c, v in enumerate([5, 3, 9, 1, 7, 2, 8])]
    report = segment_records(records)
    for (a, b), cell in report.cells.items():
        if a != b:
            assert cell.n_customers == 0 and cell.total_clv_cents == 0
    up = upside_decomposition(report)
    assert up.upward.pclv_cents == up.static.pclv_cents == up.downward.pclv_cents == 0
    assert up.overall_upside_pct == 0


def test_customer_set_mismatch():
    records = [rec(c, c, 0) for c in range(3)]
    segs = {0: U, 1: I, 2: L}
    with pytest.raises(ValueError):
        migration_matrix(segs, {0: U, 1: I}, records)


def test_published_totals():
    report = assemble_report(published_cells.cells())
    t = report.totals()
    total, pclv, actual, n = published_cells.TOTAL
    assert (t.total_clv_cents, t.pclv_cents, t.actual_clv_cents, t.n_customers) == \
        (100 * total, 100 * pclv, 100 * actual, n)


def test_published_decomposition():
    up = upside_decomposition(assemble_report(published_cells.cells()))
    assert up.upward.pclv_cents == 62_918_300
    assert up.static.pclv_cents == 1_314_595_700
    assert up.downward.pclv_cents == 23_695_300
    assert up.total_pclv_cents == 1_401_209_300
    assert up.upward.pct_of_actual == pytest.approx(0.95, abs=0.01)
    assert up.static.pct_of_actual == pytest.approx(19.76, abs=0.01)
    assert up.downward.pct_of_actual == pytest.approx(0.36, abs=0.01)
    assert up.overall_upside_pct == pytest.approx(21.06, abs=0.01)
    assert (up.upward.n_customers, up.static.n_customers, up.downward.n_customers) == (444, 9621, 442)
    assert up.upward.customer_pct == pytest.approx(4.23, abs=0.01)
    assert up.static.customer_pct == pytest.approx(91.56, abs=0.01)
    assert up.downward.customer_pct == pytest.approx(4.20, abs=0.01)


def test_published_flags_inconsistent_rows():
    report = assemble_report(published_cells.cells())
    assert report.flags == [
        "Upper -> Upper: total differs from actual + pclv by +108.00",
        "Intermediate -> Upper: total differs from actual + pclv by +22430.00",
    ]


def test_direction_partition():
    cells = assemble_report(published_cells.cells()).ordered()
    counts = {}
    for c in cells:
        counts[c.direction] = counts.get(c.direction, 0) + 1
    assert counts == {"upward": 3, "static": 3, "downward": 3}


def test_gap_tolerance_boundary():
    base = [MigrationCell(a, b, 0, 0, 0, 0) for a in (U, I, L) for b in (U, I, L) if (a, b) != (L, L)]
    ok = assemble_report(base + [MigrationCell(L, L, 1, 0, 0, GAP_TOLERANCE_CENTS)])
    bad = assemble_report(base + [MigrationCell(L, L, 1, 0, 0, GAP_TOLERANCE_CENTS + 1)])
    assert ok.flags == [] and len(bad.flags) == 1


def test_incomplete_or_duplicate_cells():
    cells = published_cells.cells()
    with pytest.raises(ValueError):
        assemble_report(cells[:-1])
    with pytest.raises(ValueError):
        assemble_report(cells + cells[:1])


values = st.lists(st.tuples(st.integers(-10**7, 10**8), st.integers(0, 10**7)), min_size=3, max_size=60)


@settings(max_examples=100, deadline=None)
@given(values)
def test_conservation(rows):
    records = [rec(i, a, p) for i, (a, p) in enumerate(rows)]
    report = segment_records(records)
    t = report.totals()
    assert t.n_customers == len(records)
    assert t.actual_clv_cents == sum(r.actual_clv_cents for r in records)
    assert t.pclv_cents == sum(r.pclv_total_cents for r in records)
    assert t.total_clv_cents == sum(r.total_clv_cents for r in records)
    up = upside_decomposition(report)
    assert up.upward.pclv_cents + up.static.pclv_cents + up.downward.pclv_cents == t.pclv_cents
    assert report.flags == []
    # both marginals follow the tercile size rule
    for seg_fn in (lambda c: c.source, lambda c: c.target):
        sizes = {s: 0 for s in (U, I, L)}
        for c in report.ordered():
            sizes[seg_fn(c)] += c.n_customers
        assert (sizes[U], sizes[I], sizes[L]) == tercile_sizes(len(records))


def test_rank_by_pclv():
    records = [rec(i, 0, p) for i, p in zip([1, 2, 3, 4], [5, 9, 9, 1])]
    assert [r.customer for r in rank_by_pclv(records)] == [2, 3, 1, 4]
    zeros = [rec(i, 10, 0) for i in [4, 2, 3]]
    assert [r.customer for r in rank_by_pclv(zeros)] == [2, 3, 4]
    assert rank_by_pclv(records[:1]) == records[:1]


def test_report_csv_layout(tmp_path):
    path = write_report_csv(assemble_report(published_cells.cells()), tmp_path / "report.csv")
    with path.open() as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 10
    first, total = rows[0], rows[-1]
    assert (first["actual_clv_segment"], first["total_clv_segment"]) == ("Upper", "Upper")
    assert first["total_clv"] == "67958298.00" and first["n_customers"] == "3425"
    assert first["actual_clv_pct"] == "91.61"
    assert total["actual_clv_segment"] == "Total"
    assert total["total_clv"] == "80553700.00" and total["pclv"] == "14012093.00"
    assert total["actual_clv"] == "66519068.00" and total["n_customers"] == "10507"


def test_report_json_and_targets(tmp_path):
    report = assemble_report(published_cells.cells())
    data = json.loads(write_report_json(report, tmp_path / "r.json").read_text())
    assert data == report_json(report)
    assert data["overall_upside_pct"] == 21.06
    assert data["upside"]["upward"] == {"pclv_cents": 62_918_300, "pct_of_actual": 0.95,
                                        "n_customers": 444, "customer_pct": 4.23}
    assert len(data["cells"]) == 9 and len(data["flags"]) == 2

    records = [rec(i, 0, p) for i, p in zip([1, 2, 3, 4], [5, 9, 9, 1])]
    lines = write_targets(records, tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "rank,customer_id,pclv_total_cents,actual_clv_cents,total_clv_cents"
    assert [ln.split(",")[1] for ln in lines[1:]] == ["2", "3", "1", "4"]


def test_negative_values_rank_below_zero():
    records = [rec(1, -500, 0), rec(2, 0, 0), rec(3, 100, 0)]
    report = segment_records(records)
    assert report.cell(L, L).actual_clv_cents == -500
    assert list(itertools.chain.from_iterable(
        [c.n_customers] for c in report.ordered() if c.source == c.target)) == [1, 1, 1]
