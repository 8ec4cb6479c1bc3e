"""Churn labels and recency/frequency/monetary features over monthly ledgers."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from .domain import PSC_TOKENS, Transactions, snapshot_at

TREND_EPS = 1e-9


@dataclass(frozen=True)
class FeatureSpec:
    windows: tuple[int, ...] = (1, 3, 6, 12)
    churn_horizon: int = 6

    def __post_init__(self):
        w = tuple(int(x) for x in self.windows)
        object.__setattr__(self, "windows", w)
        if not w or any(x < 1 for x in w):
            raise ValueError("windows must be positive")
        if any(b <= a for a, b in zip(w, w[1:])):
            raise ValueError("windows must be strictly increasing")
        if self.churn_horizon < 1:
            raise ValueError("churn_horizon must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSpec":
        d = dict(d)
        if "windows" in d:
            d["windows"] = tuple(d["windows"])
        return cls(**d)

    def to_dict(self) -> dict:
        return {"windows": list(self.windows), "churn_horizon": self.churn_horizon}

    @property
    def max_window(self) -> int:
        return self.windows[-1]

    @property
    def names(self) -> list[str]:
        return (["recency"] + [f"frequency_{w}" for w in self.windows]
                + [f"monetary_{w}" for w in self.windows]
                + [f"exposure_{t}" for t in PSC_TOKENS] + ["trend"])

    @property
    def arity(self) -> int:
        return 1 + 2 * len(self.windows) + len(PSC_TOKENS) + 1

    def check_horizon(self, obs_month: int, horizon: int) -> None:
        if self.max_window + self.churn_horizon > horizon:
            raise ValueError(f"largest window {self.max_window} plus churn horizon "
                             f"{self.churn_horizon} exceeds dataset horizon {horizon}")


@dataclass(frozen=True)
class Ledger:
    """Dense per-customer monthly totals (dollars); rows follow sorted customer ids."""

    transactions: Transactions
    customers: np.ndarray
    credit: np.ndarray
    margin: np.ndarray
    first_month: np.ndarray

    @property
    def horizon(self) -> int:
        return self.credit.shape[1]

    @property
    def active(self) -> np.ndarray:
        return (self.credit != 0) | (self.margin != 0)

    @classmethod
    def from_transactions(cls, tx: Transactions) -> "Ledger":
        c = tx.columns
        customers = np.unique(c["customer_id"])
        idx = np.searchsorted(customers, c["customer_id"])
        H = tx.horizon
        credit = np.zeros((len(customers), H), dtype=np.int64)
        margin = np.zeros((len(customers), H), dtype=np.int64)
        np.add.at(credit, (idx, c["month"]), c["credit_amount_cents"])
        np.add.at(margin, (idx, c["month"]), c["contribution_margin_cents"])
        first = np.full(len(customers), H, dtype=np.int64)
        np.minimum.at(first, idx, c["month"])
        return cls(tx, customers, credit / 100.0, margin / 100.0, first)

    def rows(self, customers) -> np.ndarray:
        customers = np.asarray(customers, dtype=np.int64)
        idx = np.searchsorted(self.customers, customers)
        if np.any(idx >= len(self.customers)) or np.any(self.customers[np.minimum(idx, len(self.customers) - 1)] != customers):
            raise KeyError("customer not in ledger")
        return idx


def label_churn(ledger: Ledger, obs_month: int, horizon: int) -> np.ndarray:
    """Churned iff no credit and no margin in every month of (obs_month, obs_month + horizon]."""
    if obs_month < 0 or obs_month + horizon >= ledger.horizon:
        raise ValueError(f"need {horizon} months after observation month {obs_month}; "
                         f"dataset horizon is {ledger.horizon}")
    future = ledger.active[:, obs_month + 1: obs_month + horizon + 1]
    return ~future.any(axis=1)


def feature_matrix(ledger: Ledger, obs_month: int, spec: FeatureSpec | None = None):
    """Features for every customer seen at or before ``obs_month``.

    Returns ``(customers, X)`` with columns in ``spec.names`` order.  Recency is
    obs_month + 1 for customers with no activity at all up to obs_month.
    """
    spec = spec or FeatureSpec()
    if obs_month < spec.max_window - 1:
        raise ValueError(f"observation month {obs_month} too early for a {spec.max_window}-month window")
    if obs_month >= ledger.horizon:
        raise ValueError(f"observation month {obs_month} outside horizon {ledger.horizon}")
    seen = ledger.first_month <= obs_month
    customers = ledger.customers[seen]
    active = ledger.active[seen, : obs_month + 1]
    margin = ledger.margin[seen, : obs_month + 1]
    n = len(customers)

    back = active[:, ::-1]
    any_active = back.any(axis=1)
    recency = np.where(any_active, np.argmax(back, axis=1), obs_month + 1).astype(float)
    freq = np.empty((n, len(spec.windows)))
    mon = np.empty((n, len(spec.windows)))
    for k, w in enumerate(spec.windows):
        freq[:, k] = active[:, obs_month - w + 1:].sum(axis=1)
        mon[:, k] = margin[:, obs_month - w + 1:].sum(axis=1)

    snap = snapshot_at(ledger.transactions, obs_month)
    exposure = np.zeros((n, len(PSC_TOKENS)))
    pos = np.searchsorted(snap.customers, customers)
    exposure[:] = snap.exposure[pos]

    col = {w: k for k, w in enumerate(spec.windows)}
    short = mon[:, col[3]] if 3 in col else mon[:, 0]
    trend = short / np.maximum(mon[:, -1], TREND_EPS)
    X = np.column_stack([recency, freq, mon, exposure, trend])
    return customers, X


@dataclass(frozen=True)
class FeatureVector:
    recency: float
    frequency: tuple[float, ...]
    monetary: tuple[float, ...]
    exposure: tuple[float, ...]
    trend: float

    def as_array(self) -> np.ndarray:
        return np.array([self.recency, *self.frequency, *self.monetary, *self.exposure, self.trend])


def build_features(ledger: Ledger, customer: int, obs_month: int,
                   spec: FeatureSpec | None = None) -> FeatureVector:
    spec = spec or FeatureSpec()
    customers, X = feature_matrix(ledger, obs_month, spec)
    i = np.searchsorted(customers, customer)
    if i >= len(customers) or customers[i] != customer:
        raise KeyError(f"customer {customer} has no record at or before month {obs_month}")
    row = X[i]
    nw = len(spec.windows)
    return FeatureVector(float(row[0]), tuple(row[1:1 + nw]), tuple(row[1 + nw:1 + 2 * nw]),
                         tuple(row[1 + 2 * nw:-1]), float(row[-1]))


def write_features(path, customers, X, spec: FeatureSpec) -> Path:
    path = Path(path)
    df = pd.DataFrame(X, columns=spec.names)
    df.insert(0, "customer_id", customers)
    df.to_csv(path, index=False, lineterminator="\n")
    return path
