"""Tercile segmentation by actual and total CLV, the 3x3 migration matrix and its upside split."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

from .valuation import ValuationRecord

# a cell whose total differs from actual + pclv by more than this is flagged
GAP_TOLERANCE_CENTS = 100


class Segment(IntEnum):
    LOWER = 0
    INTERMEDIATE = 1
    UPPER = 2

    @property
    def label(self) -> str:
        return self.name.capitalize()

    @classmethod
    def parse(cls, text: str) -> "Segment":
        try:
            return cls[text.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown segment {text!r}") from None


ORDER = (Segment.UPPER, Segment.INTERMEDIATE, Segment.LOWER)


def tercile_sizes(n: int) -> tuple[int, int, int]:
    upper = math.ceil(n / 3)
    middle = math.ceil((n - upper) / 2)
    return upper, middle, n - upper - middle


def terciles(customers, values) -> np.ndarray:
    """Segment per customer (aligned with the input order).

    Ranks by value descending with ties to the lower customer id; the top
    ceil(N/3) are Upper, the next ceil((N - upper)/2) Intermediate, the rest Lower.
    """
    customers = np.asarray(customers, dtype=np.int64)
    values = np.asarray(values)
    if len(customers) != len(values):
        raise ValueError("customers and values must align")
    if len(customers) < 3:
        raise ValueError(f"tercile segmentation needs at least 3 customers, got {len(customers)}")
    if len(np.unique(customers)) != len(customers):
        raise ValueError("customer ids must be unique")
    order = np.lexsort((customers, -values))
    upper, middle, _ = tercile_sizes(len(customers))
    seg = np.empty(len(customers), dtype=np.int64)
    seg[order[:upper]] = Segment.UPPER
    seg[order[upper:upper + middle]] = Segment.INTERMEDIATE
    seg[order[upper + middle:]] = Segment.LOWER
    return seg


@dataclass(frozen=True)
class MigrationCell:
    source: Segment
    target: Segment
    n_customers: int
    actual_clv_cents: int
    pclv_cents: int
    total_clv_cents: int

    @property
    def gap_cents(self) -> int:
        return self.total_clv_cents - self.actual_clv_cents - self.pclv_cents

    @property
    def direction(self) -> str:
        if self.target > self.source:
            return "upward"
        if self.target < self.source:
            return "downward"
        return "static"


@dataclass(frozen=True)
class Totals:
    n_customers: int
    actual_clv_cents: int
    pclv_cents: int
    total_clv_cents: int


@dataclass(frozen=True)
class UpsideGroup:
    pclv_cents: int
    pct_of_actual: float | None
    n_customers: int
    customer_pct: float | None


@dataclass(frozen=True)
class Upside:
    upward: UpsideGroup
    static: UpsideGroup
    downward: UpsideGroup
    total_pclv_cents: int
    overall_upside_pct: float | None

    def groups(self) -> dict[str, UpsideGroup]:
        return {"upward": self.upward, "static": self.static, "downward": self.downward}


@dataclass
class MigrationReport:
    cells: dict[tuple[Segment, Segment], MigrationCell]
    flags: list[str] = field(default_factory=list)

    def cell(self, source, target) -> MigrationCell:
        return self.cells[(Segment(source), Segment(target))]

    def ordered(self) -> list[MigrationCell]:
        return [self.cells[(a, b)] for a in ORDER for b in ORDER]

    def totals(self) -> Totals:
        cs = self.cells.values()
        return Totals(sum(c.n_customers for c in cs), sum(c.actual_clv_cents for c in cs),
                      sum(c.pclv_cents for c in cs), sum(c.total_clv_cents for c in cs))


def _pct(num: int, den: int) -> float | None:
    return 100.0 * num / den if den else None


def assemble_report(cells) -> MigrationReport:
    """Build a report from per-cell aggregates, flagging cells whose total is not actual + pclv."""
    table = {}
    for c in cells:
        key = (Segment(c.source), Segment(c.target))
        if key in table:
            raise ValueError(f"duplicate cell {key[0].label} -> {key[1].label}")
        table[key] = c
    missing = [(a, b) for a in ORDER for b in ORDER if (a, b) not in table]
    if missing:
        raise ValueError(f"incomplete matrix: missing {[(a.label, b.label) for a, b in missing]}")
    flags = [f"{c.source.label} -> {c.target.label}: total differs from actual + pclv by "
             f"{c.gap_cents / 100:+.2f}"
             for c in (table[(a, b)] for a in ORDER for b in ORDER)
             if abs(c.gap_cents) > GAP_TOLERANCE_CENTS]
    return MigrationReport(table, flags)


def migration_matrix(actual_segments: dict[int, Segment], total_segments: dict[int, Segment],
                     records: list[ValuationRecord]) -> MigrationReport:
    """Aggregate every customer's values into its (actual segment, total segment) cell."""
    ids = {r.customer for r in records}
    if set(actual_segments) != ids or set(total_segments) != ids:
        raise ValueError("segmentations and records must cover the same customers")
    acc = {(a, b): [0, 0, 0, 0] for a in ORDER for b in ORDER}
    for r in records:
        a = acc[(Segment(actual_segments[r.customer]), Segment(total_segments[r.customer]))]
        a[0] += 1
        a[1] += r.actual_clv_cents
        a[2] += r.pclv_total_cents
        a[3] += r.total_clv_cents
    return assemble_report(MigrationCell(a, b, *v) for (a, b), v in acc.items())


def segment_records(records: list[ValuationRecord]) -> MigrationReport:
    """Tercile both CLV measures and build the migration matrix."""
    customers = np.array([r.customer for r in records], dtype=np.int64)
    actual = np.array([r.actual_clv_cents for r in records], dtype=np.int64)
    total = np.array([r.total_clv_cents for r in records], dtype=np.int64)
    sa = terciles(customers, actual)
    st = terciles(customers, total)
    return migration_matrix({int(c): Segment(s) for c, s in zip(customers, sa)},
                            {int(c): Segment(s) for c, s in zip(customers, st)}, records)


def upside_decomposition(report: MigrationReport) -> Upside:
    """PCLV summed by migration direction, as percentages of total actual CLV."""
    totals = report.totals()
    groups = {}
    for name in ("upward", "static", "downward"):
        cs = [c for c in report.ordered() if c.direction == name]
        p = sum(c.pclv_cents for c in cs)
        n = sum(c.n_customers for c in cs)
        groups[name] = UpsideGroup(p, _pct(p, totals.actual_clv_cents), n, _pct(n, totals.n_customers))
    return Upside(groups["upward"], groups["static"], groups["downward"], totals.pclv_cents,
                  _pct(totals.pclv_cents, totals.actual_clv_cents))


def rank_by_pclv(records: list[ValuationRecord]) -> list[ValuationRecord]:
    """Add-on selling targets: descending total PCLV, ties by customer id."""
    return sorted(records, key=lambda r: (-r.pclv_total_cents, r.customer))


def _money(cents: int) -> str:
    sign = "-" if cents < 0 else ""
    whole, frac = divmod(abs(int(cents)), 100)
    return f"{sign}{whole}.{frac:02d}"


def _fmt_pct(x: float | None) -> str:
    return "" if x is None else f"{x:.2f}"


REPORT_COLUMNS = ("actual_clv_segment", "total_clv_segment", "total_clv", "total_clv_pct", "pclv", "pclv_pct",
                  "actual_clv", "actual_clv_pct", "n_customers", "n_customers_pct")


def write_report_csv(report: MigrationReport, path) -> Path:
    """Nine cells plus a Total row; each percentage is the share of its column total."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    t = report.totals()
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for c in report.ordered():
            w.writerow([c.source.label, c.target.label,
                        _money(c.total_clv_cents), _fmt_pct(_pct(c.total_clv_cents, t.total_clv_cents)),
                        _money(c.pclv_cents), _fmt_pct(_pct(c.pclv_cents, t.pclv_cents)),
                        _money(c.actual_clv_cents), _fmt_pct(_pct(c.actual_clv_cents, t.actual_clv_cents)),
                        c.n_customers, _fmt_pct(_pct(c.n_customers, t.n_customers))])
        w.writerow(["Total", "", _money(t.total_clv_cents), _fmt_pct(100.0 if t.total_clv_cents else None),
                    _money(t.pclv_cents), _fmt_pct(100.0 if t.pclv_cents else None),
                    _money(t.actual_clv_cents), _fmt_pct(100.0 if t.actual_clv_cents else None),
                    t.n_customers, _fmt_pct(100.0 if t.n_customers else None)])
    return path


def report_json(report: MigrationReport) -> dict:
    t = report.totals()
    up = upside_decomposition(report)

    def r2(x):
        return None if x is None else round(x, 2)

    return {
        "totals": {"n_customers": t.n_customers, "actual_clv_cents": t.actual_clv_cents,
                   "pclv_cents": t.pclv_cents, "total_clv_cents": t.total_clv_cents},
        "upside": {name: {"pclv_cents": g.pclv_cents, "pct_of_actual": r2(g.pct_of_actual),
                          "n_customers": g.n_customers, "customer_pct": r2(g.customer_pct)}
                   for name, g in up.groups().items()},
        "overall_upside_pct": r2(up.overall_upside_pct),
        "cells": [{"actual_clv_segment": c.source.label, "total_clv_segment": c.target.label,
                   "direction": c.direction, "n_customers": c.n_customers,
                   "actual_clv_cents": c.actual_clv_cents, "pclv_cents": c.pclv_cents,
                   "total_clv_cents": c.total_clv_cents} for c in report.ordered()],
        "flags": list(report.flags),
    }


def write_report_json(report: MigrationReport, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report_json(report), indent=2) + "\n", encoding="utf-8")
    return path


def write_targets(records: list[ValuationRecord], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "customer_id", "pclv_total_cents", "actual_clv_cents", "total_clv_cents"])
        for i, r in enumerate(rank_by_pclv(records), start=1):
            w.writerow([i, r.customer, r.pclv_total_cents, r.actual_clv_cents, r.total_clv_cents])
    return path
