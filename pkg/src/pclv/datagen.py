"""Synthetic Open Banking market generator.

Produces a focal-institution ledger, national-system exposures, Open Banking
snapshots and ground-truth labels.  Final-month margins are lognormal with
parameters solved from a target median and mean; margins are tied to
exposures through

    margin_i = sum_c alpha_c * focal_credit_{i,c} + beta * ln(1 + sum_c system_credit_{i,c}) + eps_i

with focal credits solved backward from the drawn margin.  Churn is planted
through a disengagement score that depresses activity and margins in the
twelve months before the observation month.

Competitor exposures reuse the focal exposure family; nothing about real
competitor portfolios is modelled.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy import stats

from .domain import (
    N_PSC,
    PSC_TOKENS,
    ObSnapshots,
    PscCode,
    SystemExposures,
    Transactions,
    save_dataset,
)

logger = logging.getLogger(__name__)

# monthly margin earned per dollar of credit outstanding, per PSC tag
ALPHA = np.array([0.030, 0.008, 0.003, 0.015, 0.010, 0.040, 0.009, 0.006])
BETA = 2.0
# relative popularity of each PSC when drawing a customer's product mix
PSC_POPULARITY = np.array([0.30, 0.10, 0.08, 0.16, 0.12, 0.12, 0.07, 0.05])
PRODUCT_COUNT_PROBS = np.array([0.5, 0.35, 0.15])  # 1, 2 or 3 products
MAX_PRODUCTS = 3
CHURN_SLOPE = 30.0
DECLINE_MARGIN_DROP = 0.7
DECLINE_ACTIVITY_DROP = 0.8
DRIFT_SD = 0.03
COMPETITOR_USE_PROB = 0.3
FEATURE_WINDOW = 12
MAX_CHURN_HORIZON = 6


def solve_lognormal(median: float, mean: float) -> tuple[float, float]:
    """(mu, sigma) with exp(mu) = median and exp(mu + sigma^2 / 2) = mean."""
    if median <= 0 or mean <= median:
        raise ValueError("need 0 < median < mean")
    return math.log(median), math.sqrt(2.0 * math.log(mean / median))


@dataclass(frozen=True)
class MarketConfig:
    n_customers: int = 50_000
    horizon_months: int = 36
    churn_rate: float = 0.054
    ob_adoption: float = 0.0032
    n_competitors: int = 5
    margin_log_mu: float = 4.9208
    margin_log_sigma: float = 1.6719
    noise_sd: float = 25.0
    seed: int = 0

    def __post_init__(self):
        for name in ("churn_rate", "ob_adoption"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        for name in ("n_customers", "n_competitors", "horizon_months"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ValueError(f"{name} must be an integer >= 1, got {v}")
        if self.horizon_months < 13:
            raise ValueError(f"horizon_months must be >= 13, got {self.horizon_months}")
        if self.margin_log_sigma <= 0:
            raise ValueError("margin_log_sigma must be > 0")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be >= 0")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    @classmethod
    def from_dict(cls, d: dict) -> "MarketConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown MarketConfig fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "MarketConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def churn_horizon(self) -> int:
        return min(MAX_CHURN_HORIZON, self.horizon_months - FEATURE_WINDOW)

    @property
    def observation_month(self) -> int:
        """Last month of the churn feature window; labels use the months after it."""
        return self.horizon_months - 1 - self.churn_horizon


@dataclass
class GeneratedMarket:
    config: MarketConfig
    transactions: Transactions
    system_exposure: SystemExposures
    ob_snapshots: ObSnapshots
    customers: np.ndarray
    true_churn: np.ndarray
    ob_customers: np.ndarray
    true_margin_fn: dict = field(default_factory=dict)


def truth_table(config: MarketConfig, churn_intercept: float, decliner_fraction: float) -> dict:
    return {
        "alpha": {tok: float(a) for tok, a in zip(PSC_TOKENS, ALPHA)},
        "beta": BETA,
        "noise_sd": config.noise_sd,
        "formula": "margin = sum_c alpha_c * focal_credit_c + beta * ln(1 + sum_c system_credit_c) + eps",
        "churn": {
            "slope": CHURN_SLOPE,
            "intercept": churn_intercept if math.isfinite(churn_intercept) else None,
            "decliner_fraction": decliner_fraction,
            "observation_month": config.observation_month,
            "churn_horizon": config.churn_horizon,
        },
    }


def _solve_intercept(d: np.ndarray, rate: float) -> float:
    """Intercept a with mean(sigmoid(a + slope * d)) == rate (bisection)."""
    lo, hi = -200.0, 200.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if np.mean(stats.logistic.cdf(mid + CHURN_SLOPE * d)) < rate:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _draw_products(rng, n):
    """Up to MAX_PRODUCTS distinct PSC tags per row plus Dirichlet shares (0 for unused slots)."""
    counts = rng.choice(np.arange(1, MAX_PRODUCTS + 1), size=n, p=PRODUCT_COUNT_PROBS)
    # Gumbel top-k gives weighted sampling without replacement
    keys = np.log(PSC_POPULARITY)[None, :] + rng.gumbel(size=(n, N_PSC))
    ranked = np.argsort(-keys, axis=1)[:, :MAX_PRODUCTS]
    used = np.arange(MAX_PRODUCTS)[None, :] < counts[:, None]
    raw = rng.gamma(1.0, size=(n, MAX_PRODUCTS)) * used
    shares = raw / raw.sum(axis=1, keepdims=True)
    return ranked, shares


def _credit_from_margin(margin_part, psc, shares):
    """Per-slot credit whose alpha-weighted sum equals ``margin_part``."""
    return margin_part[:, None] * shares / ALPHA[psc]


def generate_market(config: MarketConfig) -> GeneratedMarket:
    rng = np.random.default_rng(config.seed)
    n = config.n_customers
    H = config.horizon_months
    obs = config.observation_month
    customers = np.arange(n, dtype=np.int64)

    margin = rng.lognormal(config.margin_log_mu, config.margin_log_sigma, size=n)
    psc, shares = _draw_products(rng, n)

    decliner_fraction = min(1.0, 2.0 * config.churn_rate)
    is_decliner = rng.random(n) < decliner_fraction
    decline = np.where(is_decliner, rng.random(n), 0.0)
    if config.churn_rate <= 0.0:
        intercept, churn = -math.inf, np.zeros(n, dtype=bool)
    elif config.churn_rate >= 1.0:
        intercept, churn = math.inf, np.ones(n, dtype=bool)
    else:
        intercept = _solve_intercept(decline, config.churn_rate)
        churn = rng.random(n) < stats.logistic.cdf(intercept + CHURN_SLOPE * decline)

    # competitor relationships; adopters always hold at least one
    n_adopt = int(round(config.ob_adoption * n))
    adopters = np.zeros(n, dtype=bool)
    adopters[rng.choice(n, size=n_adopt, replace=False)] = True
    uses = rng.random((n, config.n_competitors)) < COMPETITOR_USE_PROB
    none = adopters & ~uses.any(axis=1)
    uses[none, rng.integers(0, config.n_competitors, size=int(none.sum()))] = True
    ci, cn = np.nonzero(uses)
    comp_margin = rng.lognormal(config.margin_log_mu, config.margin_log_sigma, size=len(ci))
    comp_psc, comp_shares = _draw_products(rng, len(ci))
    comp_credit = _credit_from_margin(comp_margin, comp_psc, comp_shares)
    outside = np.zeros((n, N_PSC))
    np.add.at(outside, (np.repeat(ci, MAX_PRODUCTS), comp_psc.ravel()), comp_credit.ravel())

    # final-month link solved backward from the drawn margin
    eps = stats.truncnorm.rvs(-np.inf, (margin / 2.0) / max(config.noise_sd, 1e-12),
                              loc=0.0, scale=config.noise_sd, size=n, random_state=rng) \
        if config.noise_sd > 0 else np.zeros(n)
    signal = margin - eps
    out_total = outside.sum(axis=1)
    cap = np.expm1(np.minimum(signal / (2.0 * BETA), 700.0))
    over = out_total > cap
    scale = np.ones(n)
    scale[over] = cap[over] / out_total[over]
    outside *= scale[:, None]
    comp_credit *= scale[ci][:, None]
    out_total = outside.sum(axis=1)
    k = (shares / ALPHA[psc]).sum(axis=1)
    lo, hi = np.zeros(n), signal.copy()
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        too_big = mid + BETA * np.log1p(out_total + mid * k) > signal
        hi = np.where(too_big, mid, hi)
        lo = np.where(too_big, lo, mid)
    focal_margin = 0.5 * (lo + hi)
    focal_credit = _credit_from_margin(focal_margin, psc, shares)  # (n, slots)
    system_total = out_total + focal_credit.sum(axis=1)
    residual = BETA * np.log1p(system_total) + eps
    final_margin_slot = focal_credit * ALPHA[psc] + residual[:, None] * shares

    # monthly paths: multiplicative drift anchored at 1 in the final month
    steps = rng.normal(0.0, DRIFT_SD, size=(n, H))
    walk = np.cumsum(steps, axis=1)
    drift = np.exp(walk - walk[:, -1:])
    months = np.arange(H)
    start = max(obs - FEATURE_WINDOW + 1, 0)
    ramp = np.clip((months - start + 1) / (obs - start + 1), 0.0, 1.0) * (months <= obs)
    level = drift * (1.0 - DECLINE_MARGIN_DROP * decline[:, None] * ramp[None, :])
    p_inactive = DECLINE_ACTIVITY_DROP * decline[:, None] * ramp[None, :]
    active = rng.random((n, H)) >= p_inactive
    active[:, obs + 1:] = ~churn[:, None]
    active[:, :start] = True
    level[:, -1] = 1.0

    # records for every (customer, month, product slot) that is active and used
    used = shares > 0
    mask = active[:, :, None] & used[:, None, :]
    cust_idx, month_idx, slot_idx = np.nonzero(mask)
    lv = level[cust_idx, month_idx]
    credit = focal_credit[cust_idx, slot_idx] * lv
    mrg = final_margin_slot[cust_idx, slot_idx] * lv
    tx = Transactions({
        "customer_id": customers[cust_idx],
        "month": month_idx,
        "psc": psc[cust_idx, slot_idx],
        "credit_amount_cents": np.rint(credit * 100.0).astype(np.int64),
        "contribution_margin_cents": np.rint(mrg * 100.0).astype(np.int64),
    }, horizon=H)

    # national-system exposure at the final month: focal (if still a customer) plus competitors
    focal_final = np.zeros((n, N_PSC))
    np.add.at(focal_final, (np.repeat(customers, MAX_PRODUCTS), psc.ravel()),
              (focal_credit * (~churn)[:, None]).ravel())
    system = focal_final + outside
    si, sp = np.nonzero(np.rint(system * 100.0) > 0)
    sysx = SystemExposures({
        "customer_id": customers[si],
        "psc": sp,
        "credit_amount_cents": np.rint(system[si, sp] * 100.0).astype(np.int64),
    })

    keep = adopters[ci]
    ob_rows_c = np.repeat(ci[keep], MAX_PRODUCTS)
    ob_rows_n = np.repeat(cn[keep] + 1, MAX_PRODUCTS)  # competitor ids start at 1
    ob_psc = comp_psc[keep].ravel()
    ob_amt = np.rint(comp_credit[keep].ravel() * 100.0).astype(np.int64)
    nz = comp_shares[keep].ravel() > 0
    obx = ObSnapshots({
        "customer_id": customers[ob_rows_c[nz]],
        "competitor_id": ob_rows_n[nz],
        "psc": ob_psc[nz],
        "credit_amount_cents": ob_amt[nz],
    })

    logger.info("generated market: %d customers, %d transactions, churn %.4f, %d OB adopters",
                n, len(tx), churn.mean() if n else 0.0, n_adopt)
    return GeneratedMarket(config, tx, sysx, obx, customers, churn, customers[adopters],
                           truth_table(config, float(intercept), decliner_fraction))


def empty_market(config: MarketConfig | None = None) -> GeneratedMarket:
    config = config or MarketConfig(n_customers=1)
    z = np.zeros(0, dtype=np.int64)
    return GeneratedMarket(
        config,
        Transactions({"customer_id": z, "month": z, "psc": z, "credit_amount_cents": z,
                      "contribution_margin_cents": z}, horizon=config.horizon_months),
        SystemExposures({"customer_id": z, "psc": z, "credit_amount_cents": z}),
        ObSnapshots({"customer_id": z, "competitor_id": z, "psc": z, "credit_amount_cents": z}),
        z, np.zeros(0, dtype=bool), z, truth_table(config, 0.0, 0.0),
    )


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_market(market: GeneratedMarket, directory) -> dict:
    """Write the three CSV datasets, labels.csv and truth.json; return a manifest."""
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        paths = {
            "transactions": save_dataset(market.transactions, directory / "transactions.csv"),
            "system_exposure": save_dataset(market.system_exposure, directory / "system_exposure.csv"),
            "ob_snapshot": save_dataset(market.ob_snapshots, directory / "ob_snapshot.csv"),
        }
        labels = directory / "labels.csv"
        with labels.open("w", encoding="utf-8", newline="\n") as fh:
            fh.write("customer_id,churned\n")
            fh.writelines(f"{c},{int(b)}\n" for c, b in zip(market.customers, market.true_churn))
        paths["labels"] = labels
        truth = directory / "truth.json"
        truth.write_text(json.dumps({**market.true_margin_fn, "config": market.config.to_dict()},
                                    indent=2, sort_keys=True) + "\n", encoding="utf-8")
        paths["truth"] = truth
    except OSError as exc:
        raise OSError(f"cannot write market files to {directory}: {exc}") from exc
    rows = {
        "transactions": len(market.transactions),
        "system_exposure": len(market.system_exposure),
        "ob_snapshot": len(market.ob_snapshots),
        "labels": len(market.customers),
        "truth": 1,
    }
    return {name: {"path": str(p), "rows": rows[name], "sha256": _sha256(p)} for name, p in paths.items()}


def load_labels(path) -> tuple[np.ndarray, np.ndarray]:
    data = np.loadtxt(path, delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)
    if data.size == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=bool)
    return data[:, 0], data[:, 1].astype(bool)


__all__ = [
    "ALPHA",
    "BETA",
    "GeneratedMarket",
    "MarketConfig",
    "PscCode",
    "empty_market",
    "generate_market",
    "load_labels",
    "solve_lognormal",
    "write_market",
]
