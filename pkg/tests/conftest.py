import numpy as np
import pytest

from pclv.domain import Transactions


def make_transactions(rows, horizon=None):
    """rows: (customer, month, psc, credit_cents, margin_cents)."""
    cols = np.array(rows, dtype=np.int64).reshape(-1, 5)
    return Transactions({
        "customer_id": cols[:, 0], "month": cols[:, 1], "psc": cols[:, 2],
        "credit_amount_cents": cols[:, 3], "contribution_margin_cents": cols[:, 4],
    }, horizon=horizon)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
