"""Core data model: product categories, record types and CSV datasets.

Money lives in files and in the columnar tables as int64 cents so that
load/save round trips are bit-exact; it is converted to float dollars only
when handed to a model.  Credit amounts are end-of-month balances.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

N_PSC = 8


class PscCode(enum.IntEnum):
    CREDIT_CARD = 0
    AUTO_LOAN = 1
    MORTGAGE = 2
    PERSONAL_LOAN = 3
    PAYROLL_LOAN = 4
    OVERDRAFT = 5
    BUSINESS_LOAN = 6
    RURAL_CREDIT = 7


PSC_TOKENS = tuple(p.name for p in PscCode)


class DatasetError(ValueError):
    """Raised for malformed dataset files; carries the 1-based line number when known."""

    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f"{':' if where else 'line '}{line}"
        super().__init__(f"{where}: {message}" if where else message)


@dataclass(frozen=True)
class TransactionRecord:
    customer: int
    month: int
    psc: PscCode
    credit_amount: int  # cents
    contribution_margin: int  # cents, may be negative


@dataclass(frozen=True)
class SystemExposure:
    customer: int
    psc: PscCode
    credit_amount: int


@dataclass(frozen=True)
class ObSnapshot:
    customer: int
    competitor: int
    psc: PscCode
    credit_amount: int


@dataclass(frozen=True)
class MarginTarget:
    customer: int
    monthly_margin: float  # dollars


# column layout per dataset kind: (key columns, money columns)
SCHEMAS: dict[str, tuple[tuple[str, ...], tuple[str, ...]]] = {
    "transactions": (
        ("customer_id", "month", "psc"),
        ("credit_amount_cents", "contribution_margin_cents"),
    ),
    "system_exposure": (("customer_id", "psc"), ("credit_amount_cents",)),
    "ob_snapshot": (("customer_id", "competitor_id", "psc"), ("credit_amount_cents",)),
}

FILENAMES = {
    "transactions": "transactions.csv",
    "system_exposure": "system_exposure.csv",
    "ob_snapshot": "ob_snapshot.csv",
}


def header(kind: str) -> list[str]:
    keys, money = SCHEMAS[kind]
    return [*keys, *money]


class Dataset:
    """Columnar, immutable table of one dataset kind.

    ``columns`` maps every schema column to an int64 array; ``psc`` holds the
    integer tag.  Rows are sorted by the key columns and keys are unique.
    """

    kind: str = ""

    def __init__(self, columns: dict[str, np.ndarray], aggregate: bool = True):
        cols = {name: np.asarray(columns[name], dtype=np.int64) for name in header(self.kind)}
        n = {len(v) for v in cols.values()}
        if len(n) > 1:
            raise ValueError("column lengths differ")
        if aggregate:
            cols = _aggregate(cols, SCHEMAS[self.kind][0], SCHEMAS[self.kind][1])
        for v in cols.values():
            v.setflags(write=False)
        self.columns = cols
        self._validate()

    def _validate(self) -> None:
        psc = self.columns["psc"]
        if len(psc) and (psc.min() < 0 or psc.max() >= N_PSC):
            raise ValueError("psc tag out of range")
        if len(self) and self.columns["credit_amount_cents"].min() < 0:
            raise ValueError("negative credit amount")
        if len(self) and self.columns["customer_id"].min() < 0:
            raise ValueError("negative customer id")

    def __len__(self) -> int:
        return len(self.columns["customer_id"])

    def __eq__(self, other: object) -> bool:
        if type(other) is not type(self):
            return NotImplemented
        return all(np.array_equal(self.columns[c], other.columns[c]) for c in header(self.kind))

    __hash__ = None  # type: ignore[assignment]

    @property
    def customers(self) -> np.ndarray:
        return np.unique(self.columns["customer_id"])

    @property
    def n_customers(self) -> int:
        return len(self.customers)

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame({c: self.columns[c] for c in header(self.kind)})
        df["psc"] = np.asarray(PSC_TOKENS, dtype=object)[df["psc"].to_numpy()] if len(df) else []
        return df

    def records(self) -> Iterator:
        raise NotImplementedError

    def __repr__(self) -> str:
        return f"{type(self).__name__}(rows={len(self)}, customers={self.n_customers})"


class Transactions(Dataset):
    kind = "transactions"

    def __init__(self, columns, aggregate: bool = True, horizon: int | None = None):
        super().__init__(columns, aggregate)
        month = self.columns["month"]
        if len(month) and month.min() < 0:
            raise ValueError("negative month index")
        observed = int(month.max()) + 1 if len(month) else 0
        if horizon is not None and horizon < observed:
            raise ValueError(f"horizon {horizon} shorter than data ({observed} months)")
        self.horizon = horizon if horizon is not None else observed

    def records(self) -> Iterator[TransactionRecord]:
        c = self.columns
        for row in zip(c["customer_id"], c["month"], c["psc"], c["credit_amount_cents"],
                       c["contribution_margin_cents"]):
            yield TransactionRecord(int(row[0]), int(row[1]), PscCode(int(row[2])), int(row[3]), int(row[4]))


class SystemExposures(Dataset):
    kind = "system_exposure"

    def records(self) -> Iterator[SystemExposure]:
        c = self.columns
        for cu, p, amt in zip(c["customer_id"], c["psc"], c["credit_amount_cents"]):
            yield SystemExposure(int(cu), PscCode(int(p)), int(amt))

    def matrix(self, customers: np.ndarray) -> np.ndarray:
        """Dollar exposure matrix (len(customers) x 8); customers without rows get zeros."""
        return _exposure_matrix(customers, self.columns["customer_id"], self.columns["psc"],
                                self.columns["credit_amount_cents"])


class ObSnapshots(Dataset):
    kind = "ob_snapshot"

    def records(self) -> Iterator[ObSnapshot]:
        c = self.columns
        for cu, n, p, amt in zip(c["customer_id"], c["competitor_id"], c["psc"], c["credit_amount_cents"]):
            yield ObSnapshot(int(cu), int(n), PscCode(int(p)), int(amt))

    def pairs(self) -> np.ndarray:
        """Distinct (customer, competitor) pairs, sorted, shape (m, 2)."""
        c = self.columns
        if not len(self):
            return np.zeros((0, 2), dtype=np.int64)
        return np.unique(np.column_stack([c["customer_id"], c["competitor_id"]]), axis=0)

    def exposure(self, customer: int, competitor: int) -> np.ndarray:
        c = self.columns
        mask = (c["customer_id"] == customer) & (c["competitor_id"] == competitor)
        if not mask.any():
            raise KeyError(f"no Open Banking snapshot for customer {customer}, competitor {competitor}")
        out = np.zeros(N_PSC)
        np.add.at(out, c["psc"][mask], c["credit_amount_cents"][mask] / 100.0)
        return out

    def pair_matrix(self, pairs: np.ndarray) -> np.ndarray:
        """Dollar exposure per requested (customer, competitor) pair, shape (m, 8)."""
        c = self.columns
        out = np.zeros((len(pairs), N_PSC))
        if not len(pairs) or not len(self):
            return out
        # encode the pair as one int64 key for a sorted lookup
        scale = int(max(c["competitor_id"].max(), pairs[:, 1].max())) + 1
        keys = pairs[:, 0] * scale + pairs[:, 1]
        if np.any(np.diff(keys) <= 0):
            raise ValueError("pairs must be sorted and unique")
        row_keys = c["customer_id"] * scale + c["competitor_id"]
        idx = np.searchsorted(keys, row_keys)
        ok = (idx < len(keys)) & (keys[np.minimum(idx, len(keys) - 1)] == row_keys)
        np.add.at(out, (idx[ok], c["psc"][ok]), c["credit_amount_cents"][ok] / 100.0)
        return out


KINDS = {"transactions": Transactions, "system_exposure": SystemExposures, "ob_snapshot": ObSnapshots}


def _aggregate(cols, keys, money):
    n = len(cols[keys[0]])
    if n == 0:
        return cols
    order = np.lexsort([cols[k] for k in reversed(keys)])
    sorted_cols = {k: v[order] for k, v in cols.items()}
    key_mat = np.column_stack([sorted_cols[k] for k in keys])
    new_group = np.ones(n, dtype=bool)
    new_group[1:] = np.any(key_mat[1:] != key_mat[:-1], axis=1)
    if new_group.all():
        return sorted_cols
    starts = np.flatnonzero(new_group)
    out = {k: sorted_cols[k][starts] for k in keys}
    for m in money:
        out[m] = np.add.reduceat(sorted_cols[m], starts)
    return out


def _exposure_matrix(customers, cust_col, psc_col, cents_col) -> np.ndarray:
    customers = np.asarray(customers, dtype=np.int64)
    out = np.zeros((len(customers), N_PSC))
    if not len(customers) or not len(cust_col):
        return out
    idx = np.searchsorted(customers, cust_col)
    ok = (idx < len(customers)) & (customers[np.minimum(idx, len(customers) - 1)] == cust_col)
    np.add.at(out, (idx[ok], psc_col[ok]), cents_col[ok] / 100.0)
    return out


def load_dataset(path, kind: str, horizon: int | None = None) -> Dataset:
    """Read and validate one CSV dataset.

    Duplicate keys are aggregated by summing money columns.  Errors name the
    offending line (1-based, header is line 1).
    """
    if kind not in SCHEMAS:
        raise ValueError(f"unknown dataset kind {kind!r}; expected one of {sorted(SCHEMAS)}")
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    expected = header(kind)
    with path.open("r", encoding="utf-8") as fh:
        first = fh.readline().rstrip("\r\n")
    if first.split(",") != expected:
        raise DatasetError(f"header {first!r} does not match {kind} schema {','.join(expected)}",
                           line=1, path=str(path))
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False, na_filter=False,
                         engine="c", header=0)
    except pd.errors.ParserError as exc:
        # pandas reports "Expected N fields in line L, saw M"
        msg = str(exc)
        line = None
        if " in line " in msg:
            try:
                line = int(msg.split(" in line ")[1].split(",")[0])
            except ValueError:
                pass
        raise DatasetError(f"wrong number of fields ({msg.strip()})", line=line, path=str(path)) from None
    except pd.errors.EmptyDataError:
        df = pd.DataFrame(columns=expected)

    columns: dict[str, np.ndarray] = {}
    for name in expected:
        raw = df[name].to_numpy(dtype=object) if len(df) else np.array([], dtype=object)
        if name == "psc":
            codes = pd.Series(raw, dtype=object).map(_PSC_LOOKUP)
            bad = codes.isna().to_numpy()
            if bad.any():
                i = int(np.argmax(bad))
                missing = raw[i] == ""
                reason = "missing field" if missing else f"unknown PSC token {raw[i]!r}"
                raise DatasetError(f"{reason}; valid tokens: {', '.join(PSC_TOKENS)}",
                                   line=i + 2, path=str(path))
            columns[name] = codes.to_numpy(dtype=np.int64)
        else:
            as_int = pd.to_numeric(pd.Series(raw, dtype=object), errors="coerce")
            bad = as_int.isna().to_numpy() | (as_int.to_numpy(dtype=float) % 1 != 0)
            if bad.any():
                i = int(np.argmax(bad))
                what = "missing field" if raw[i] == "" else f"non-numeric value {raw[i]!r}"
                raise DatasetError(f"{what} in column {name}", line=i + 2, path=str(path))
            columns[name] = as_int.to_numpy(dtype=np.int64)
    if len(df):
        if (columns["customer_id"] < 0).any():
            i = int(np.argmax(columns["customer_id"] < 0))
            raise DatasetError("negative customer id", line=i + 2, path=str(path))
        neg = columns["credit_amount_cents"] < 0
        if neg.any():
            i = int(np.argmax(neg))
            raise DatasetError("negative credit amount", line=i + 2, path=str(path))
        if kind == "transactions" and (columns["month"] < 0).any():
            i = int(np.argmax(columns["month"] < 0))
            raise DatasetError("negative month index", line=i + 2, path=str(path))

    cls = KINDS[kind]
    ds = cls(columns, horizon=horizon) if cls is Transactions else cls(columns)
    logger.info("loaded %s: %d rows, %d customers", path, len(ds), ds.n_customers)
    return ds


_PSC_LOOKUP = {name: int(p) for name, p in zip(PSC_TOKENS, PscCode)}


def save_dataset(dataset: Dataset, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dataset.to_frame().to_csv(path, index=False, lineterminator="\n")
    return path


@dataclass(frozen=True)
class Snapshot:
    """Per-customer focal exposure (dollars, PSC-tag order) and monthly margin at one month."""

    month: int
    customers: np.ndarray
    exposure: np.ndarray
    margin: np.ndarray

    def targets(self) -> list[MarginTarget]:
        return [MarginTarget(int(c), float(m)) for c, m in zip(self.customers, self.margin)]


def snapshot_at(transactions: Transactions, month: int) -> Snapshot:
    """Exposure matrix and margin total at ``month``.

    Every customer with a record at or before ``month`` is present; those with
    nothing at ``month`` itself get zero exposure and zero margin.
    """
    if not 0 <= month < transactions.horizon:
        raise ValueError(f"month {month} outside dataset horizon [0, {transactions.horizon})")
    c = transactions.columns
    seen = c["month"] <= month
    customers = np.unique(c["customer_id"][seen])
    at = c["month"] == month
    exposure = _exposure_matrix(customers, c["customer_id"][at], c["psc"][at], c["credit_amount_cents"][at])
    margin_cents = np.zeros(len(customers), dtype=np.int64)
    if at.any():
        idx = np.searchsorted(customers, c["customer_id"][at])
        np.add.at(margin_cents, idx, c["contribution_margin_cents"][at])
    return Snapshot(month, customers, exposure, margin_cents / 100.0)


def check_exposure_consistency(transactions: Transactions, system: SystemExposures, month: int) -> int:
    """Count (customer, psc) slots where focal credit exceeds the system-wide figure; warns only."""
    snap = snapshot_at(transactions, month)
    sys_mat = system.matrix(snap.customers)
    n_bad = int(np.sum(snap.exposure > sys_mat + 1e-9))
    if n_bad:
        logger.warning("%d customer/PSC slots have focal credit above system exposure", n_bad)
    return n_bad


def to_cents(dollars) -> np.ndarray:
    return np.rint(np.asarray(dollars, dtype=float) * 100.0).astype(np.int64)
