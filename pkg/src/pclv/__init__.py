"""Customer lifetime value with potential upside from Open Banking competitor data."""
from .boosting import GbtModel, GbtParams
from .datagen import MarketConfig, generate_market
from .valuation import ValuationRecord, actual_clv, pclv_competitor, retention, total_clv

__version__ = "0.1.0"

__all__ = [
    "GbtModel",
    "GbtParams",
    "MarketConfig",
    "ValuationRecord",
    "actual_clv",
    "generate_market",
    "pclv_competitor",
    "retention",
    "total_clv",
]
