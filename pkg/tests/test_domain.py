import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pclv.domain import (
    PSC_TOKENS,
    DatasetError,
    ObSnapshots,
    PscCode,
    SystemExposures,
    check_exposure_consistency,
    header,
    load_dataset,
    save_dataset,
    snapshot_at,
)

from conftest import make_transactions

TX_HEADER = "customer_id,month,psc,credit_amount_cents,contribution_margin_cents\n"


def write(tmp_path, text, name="transactions.csv"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def test_psc_tags_are_stable():
    assert [p.value for p in PscCode] == list(range(8))
    assert PSC_TOKENS[2] == "MORTGAGE"
    assert len(PSC_TOKENS) == 8


def test_headers():
    assert header("transactions") == TX_HEADER.strip().split(",")
    assert header("system_exposure") == ["customer_id", "psc", "credit_amount_cents"]
    assert header("ob_snapshot") == ["customer_id", "competitor_id", "psc", "credit_amount_cents"]


def test_empty_file_with_header(tmp_path):
    ds = load_dataset(write(tmp_path, TX_HEADER), "transactions")
    assert len(ds) == 0
    assert ds.n_customers == 0


def test_duplicate_rows_aggregate(tmp_path):
    text = TX_HEADER + "1,0,CREDIT_CARD,100,1000\n1,0,CREDIT_CARD,50,500\n2,0,MORTGAGE,7,1\n"
    ds = load_dataset(write(tmp_path, text), "transactions")
    recs = list(ds.records())
    assert len(recs) == 2
    assert recs[0].customer == 1 and recs[0].contribution_margin == 1500
    assert recs[0].credit_amount == 150


def test_unknown_psc_names_valid_tokens(tmp_path):
    text = TX_HEADER + "1,0,CREDIT_CARD,100,1000\n1,0,BOAT_LOAN,1,1\n"
    with pytest.raises(DatasetError) as err:
        load_dataset(write(tmp_path, text), "transactions")
    assert err.value.line == 3
    for tok in PSC_TOKENS:
        assert tok in str(err.value)


@pytest.mark.parametrize("row,line", [
    ("1,0,CREDIT_CARD,100\n", 2),
    ("1,0,CREDIT_CARD,abc,5\n", 2),
    ("1,0,CREDIT_CARD,-5,5\n", 2),
])
def test_malformed_rows(tmp_path, row, line):
    with pytest.raises(DatasetError) as err:
        load_dataset(write(tmp_path, TX_HEADER + row), "transactions")
    assert err.value.line == line


def test_negative_margin_allowed(tmp_path):
    ds = load_dataset(write(tmp_path, TX_HEADER + "1,0,OVERDRAFT,5,-300\n"), "transactions")
    assert next(ds.records()).contribution_margin == -300


def test_bad_header(tmp_path):
    with pytest.raises(DatasetError):
        load_dataset(write(tmp_path, "a,b,c\n"), "transactions")


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "nope.csv", "transactions")


def test_snapshot_single_record():
    tx = make_transactions([(7, 35, PscCode.MORTGAGE, 100000, 2000)], horizon=36)
    snap = snapshot_at(tx, 35)
    assert snap.customers.tolist() == [7]
    assert snap.exposure[0].tolist() == [0, 0, 1000, 0, 0, 0, 0, 0]
    assert snap.margin[0] == 20
    snap = snapshot_at(tx, 34)
    assert len(snap.customers) == 0


def test_snapshot_earlier_customer_kept_with_zeros():
    tx = make_transactions([(1, 10, 0, 100, 100), (2, 35, 1, 100, 100)], horizon=36)
    snap = snapshot_at(tx, 35)
    assert snap.customers.tolist() == [1, 2]
    assert snap.exposure[0].sum() == 0 and snap.margin[0] == 0


def test_snapshot_margin_total():
    tx = make_transactions([(1, 35, 0, 100, 2000), (1, 35, 3, 100, 3000)], horizon=36)
    assert snapshot_at(tx, 35).margin[0] == 50


def test_snapshot_outside_horizon():
    tx = make_transactions([(1, 0, 0, 1, 1)], horizon=36)
    with pytest.raises(ValueError):
        snapshot_at(tx, 36)
    with pytest.raises(ValueError):
        snapshot_at(tx, -1)


def test_exposure_consistency_only_warns(caplog):
    tx = make_transactions([(1, 0, 0, 500, 1)], horizon=1)
    system = SystemExposures({"customer_id": np.array([1]), "psc": np.array([0]),
                              "credit_amount_cents": np.array([100])})
    assert check_exposure_consistency(tx, system, 0) == 1
    assert "above system exposure" in caplog.text


def test_ob_pair_matrix():
    ob = ObSnapshots({"customer_id": np.array([1, 1, 2]), "competitor_id": np.array([3, 3, 1]),
                      "psc": np.array([0, 2, 5]), "credit_amount_cents": np.array([100, 250, 9])})
    pairs = ob.pairs()
    assert pairs.tolist() == [[1, 3], [2, 1]]
    m = ob.pair_matrix(pairs)
    assert m[0].tolist() == [1, 0, 2.5, 0, 0, 0, 0, 0]
    assert np.array_equal(ob.exposure(2, 1), m[1])
    with pytest.raises(KeyError):
        ob.exposure(2, 3)


rows = st.lists(st.tuples(st.integers(0, 30), st.integers(0, 11), st.integers(0, 7),
                          st.integers(0, 10**9), st.integers(-10**6, 10**6)), max_size=40)


@settings(max_examples=50, deadline=None)
@given(rows)
def test_round_trip_transactions(tmp_path_factory, rs):
    tx = make_transactions(rs, horizon=12) if rs else make_transactions(np.zeros((0, 5)), horizon=12)
    p = tmp_path_factory.mktemp("rt") / "transactions.csv"
    save_dataset(tx, p)
    back = load_dataset(p, "transactions", horizon=12)
    assert back == tx
    save_dataset(back, p)
    assert load_dataset(p, "transactions", horizon=12) == tx


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 9), st.integers(1, 4), st.integers(0, 7), st.integers(0, 10**7)),
                max_size=30))
def test_round_trip_ob(tmp_path_factory, rs):
    a = np.array(rs, dtype=np.int64).reshape(-1, 4)
    ob = ObSnapshots({"customer_id": a[:, 0], "competitor_id": a[:, 1], "psc": a[:, 2],
                      "credit_amount_cents": a[:, 3]})
    p = tmp_path_factory.mktemp("ob") / "ob_snapshot.csv"
    save_dataset(ob, p)
    assert load_dataset(p, "ob_snapshot") == ob


@settings(max_examples=50, deadline=None)
@given(rows, st.integers(0, 11))
def test_snapshot_row_count_and_nonnegative(rs, month):
    if not rs:
        return
    tx = make_transactions(rs, horizon=12)
    snap = snapshot_at(tx, month)
    expected = {c for c, m, *_ in rs if m <= month}
    assert snap.customers.tolist() == sorted(expected)
    assert np.all(snap.exposure >= 0)
