"""Customer lifetime value: actual CLV, potential CLV from competitor balances, and their sum.

All value formulas share the perpetuity form ``(annual_margin * r) / (1 + d - r)``
where ``r`` is the retention probability and ``d`` the annual discount rate.
Records hold integer cents so the additive identities hold exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from .boosting import GbtModel
from .domain import N_PSC, DatasetError

DEFAULT_DISCOUNT = 0.1
MONTHS = 12


def _check_rate(d):
    if not np.all(np.asarray(d, dtype=float) > 0):
        raise ValueError(f"discount rate must be > 0, got {d}")


def _check_prob(r, name="retention"):
    r = np.asarray(r, dtype=float)
    if np.any(np.isnan(r)) or np.any((r < 0) | (r > 1)):
        raise ValueError(f"{name} must be in [0, 1]")


def retention(churn_prob):
    """Retention score r = 1 - churn probability."""
    _check_prob(churn_prob, "churn probability")
    out = 1.0 - np.asarray(churn_prob, dtype=float)
    return float(out) if out.ndim == 0 else out


def _perpetuity(annual, r, d):
    _check_prob(r)
    _check_rate(d)
    out = np.asarray(annual, dtype=float) * np.asarray(r, dtype=float) / (1.0 + np.asarray(d, dtype=float) - np.asarray(r, dtype=float))
    return float(out) if out.ndim == 0 else out


def actual_clv(cm_monthly, r, d=DEFAULT_DISCOUNT):
    """Value of the current relationship from the monthly contribution margin."""
    return _perpetuity(np.asarray(cm_monthly, dtype=float) * MONTHS, r, d)


def pclv_competitor(pcm_annual, r, d=DEFAULT_DISCOUNT):
    """Value of the margin a competitor currently earns, were it moved to the focal bank."""
    return _perpetuity(pcm_annual, r, d)


def pclv_total(values) -> float:
    return float(sum(values, 0.0))


def total_clv(actual, pclv):
    return actual + pclv


def pcm_features(focal, system) -> np.ndarray:
    """Concatenate focal-slot and system-slot exposures into the 16-column layout."""
    focal = np.atleast_2d(np.asarray(focal, dtype=float))
    system = np.atleast_2d(np.asarray(system, dtype=float))
    if focal.shape[1] != N_PSC or system.shape[1] != N_PSC:
        raise ValueError(f"exposure vectors must have {N_PSC} slots, got {focal.shape[1]} and {system.shape[1]}")
    if len(focal) != len(system):
        raise ValueError("focal and system exposure row counts differ")
    return np.hstack([focal, system])


def predict_pcm_focal(model: GbtModel, focal, system):
    """Monthly margin estimate for the focal bank's own exposures."""
    single = np.ndim(focal) == 1
    pred = model.predict(pcm_features(focal, system))
    return float(pred[0]) if single else pred


def predict_pcm_competitor(model: GbtModel, competitor, system):
    """Annual potential margin: competitor balances placed in the focal slots, times 12."""
    single = np.ndim(competitor) == 1
    pred = MONTHS * model.predict(pcm_features(competitor, system))
    return float(pred[0]) if single else pred


@dataclass(frozen=True)
class AnnualPcm:
    customer: int
    competitor: int
    pcm_annual: float


def to_cents(x) -> int:
    if not math.isfinite(x):
        raise ValueError(f"non-finite money value {x}")
    return int(round(x * 100))


@dataclass(frozen=True)
class ValuationRecord:
    """One customer's values in integer cents."""

    customer: int
    actual_clv_cents: int
    pclv_by_competitor: tuple[tuple[int, int], ...]
    pclv_total_cents: int
    total_clv_cents: int

    def __post_init__(self):
        comps = [c for c, _ in self.pclv_by_competitor]
        if len(set(comps)) != len(comps):
            raise ValueError(f"customer {self.customer}: duplicate competitor ids")
        if self.pclv_total_cents != sum(v for _, v in self.pclv_by_competitor):
            raise ValueError(f"customer {self.customer}: pclv_total does not equal the competitor sum")
        if self.total_clv_cents != self.actual_clv_cents + self.pclv_total_cents:
            raise ValueError(f"customer {self.customer}: total_clv does not equal actual + pclv")

    @classmethod
    def build(cls, customer: int, actual: float, pclv_by_competitor: dict[int, float]) -> "ValuationRecord":
        """Round each component to cents, then derive the sums exactly."""
        comps = tuple(sorted((int(c), to_cents(v)) for c, v in pclv_by_competitor.items()))
        a = to_cents(actual)
        p = sum(v for _, v in comps)
        return cls(int(customer), a, comps, p, a + p)

    @property
    def actual_clv(self) -> float:
        return self.actual_clv_cents / 100

    @property
    def pclv_total(self) -> float:
        return self.pclv_total_cents / 100

    @property
    def total_clv(self) -> float:
        return self.total_clv_cents / 100


def value_customers(customers, cm_monthly, churn_prob, pcm: list[AnnualPcm],
                    d: float = DEFAULT_DISCOUNT) -> list[ValuationRecord]:
    """Chain retention, actual CLV and per-competitor PCLV into records sorted by customer id."""
    customers = np.asarray(customers, dtype=np.int64)
    if len(np.unique(customers)) != len(customers):
        raise ValueError("customer ids must be unique")
    r = retention(np.asarray(churn_prob, dtype=float))
    actual = actual_clv(np.asarray(cm_monthly, dtype=float), r, d)
    r = np.atleast_1d(r)
    actual = np.atleast_1d(actual)
    index = {int(c): i for i, c in enumerate(customers)}
    by_customer: dict[int, dict[int, float]] = {int(c): {} for c in customers}
    for p in pcm:
        if p.customer not in index:
            raise KeyError(f"potential margin for unknown customer {p.customer}")
        if p.competitor in by_customer[p.customer]:
            raise ValueError(f"duplicate potential margin for ({p.customer}, {p.competitor})")
        by_customer[p.customer][p.competitor] = pclv_competitor(p.pcm_annual, r[index[p.customer]], d)
    return [ValuationRecord.build(int(c), float(actual[index[int(c)]]), by_customer[int(c)])
            for c in np.sort(customers)]


BASE_COLUMNS = ("customer_id", "actual_clv_cents", "pclv_total_cents", "total_clv_cents")


def _competitor_column(n: int) -> str:
    return f"pclv_competitor_{n}_cents"


def write_valuation(records: list[ValuationRecord], path) -> Path:
    """valuation.csv; competitor cells are blank where a customer has no data for that competitor."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    records = sorted(records, key=lambda r: r.customer)
    competitors = sorted({c for r in records for c, _ in r.pclv_by_competitor})
    with path.open("w", encoding="utf-8", newline="") as fh:
        fh.write(",".join([*BASE_COLUMNS, *(_competitor_column(n) for n in competitors)]) + "\n")
        for r in records:
            comp = dict(r.pclv_by_competitor)
            cells = [r.customer, r.actual_clv_cents, r.pclv_total_cents, r.total_clv_cents]
            cells += [comp.get(n, "") for n in competitors]
            fh.write(",".join(str(c) for c in cells) + "\n")
    return path


def read_valuation(path) -> list[ValuationRecord]:
    """Parse valuation.csv, re-checking the sum identities on every row."""
    path = Path(path)
    df = pd.read_csv(path, dtype=str, keep_default_na=False)
    missing = [c for c in BASE_COLUMNS if c not in df.columns]
    if missing:
        raise DatasetError(f"missing columns {missing}", line=1, path=path)
    comp_cols = []
    for col in df.columns:
        if col in BASE_COLUMNS:
            continue
        if not (col.startswith("pclv_competitor_") and col.endswith("_cents")):
            raise DatasetError(f"unexpected column {col!r}", line=1, path=path)
        comp_cols.append((int(col[len("pclv_competitor_"):-len("_cents")]), col))
    out = []
    for i, row in enumerate(df.to_dict("records"), start=2):
        try:
            vals = {c: int(row[c]) for c in BASE_COLUMNS}
            comps = tuple((n, int(row[col])) for n, col in comp_cols if row[col] != "")
            out.append(ValuationRecord(vals["customer_id"], vals["actual_clv_cents"], comps,
                                       vals["pclv_total_cents"], vals["total_clv_cents"]))
        except ValueError as exc:
            raise DatasetError(str(exc), line=i, path=path) from exc
    return out
