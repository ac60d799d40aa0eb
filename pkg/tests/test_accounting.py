import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hrtrade.accounting import (
    PortfolioState,
    drift,
    high_reward,
    ledger_record,
    settle,
    settle_compact,
    target_quantities,
    trading_cost,
)
from hrtrade.exceptions import BankruptcyError, InfeasibleRebalanceError, ValidationError
from hrtrade.exchange import Direction, FillReport

from oracles import cash_ledger


def _fill(q, p):
    return FillReport(Direction.BUY if q > 0 else Direction.SELL, ((p, abs(q)),))


def test_drift_examples():
    cash = PortfolioState.all_cash(1000.0, [1.0, 10.0, 20.0])
    v, w = drift(cash, [1.0, 13.0, 7.0])
    assert v == 1000.0 and np.array_equal(w, cash.weights)
    s = PortfolioState([0.2, 0.3, 0.5], 500.0, [1.0, 10.0, 20.0])
    v, w = drift(s, s.prices)
    assert v == 500.0 and np.allclose(w, s.weights, rtol=0, atol=1e-15)
    v, w = drift(PortfolioState([0.5, 0.5], 100.0, [1.0, 10.0]), [1.0, 20.0])
    assert v == pytest.approx(150.0, abs=1e-12)
    assert np.allclose(w, [1 / 3, 2 / 3], rtol=0, atol=1e-15)


def test_target_quantity_examples():
    t = target_quantities(10_000, [0.5, 0.5], [0.5, 0.5], [1.0, 20.0])
    assert np.all(t.quantities == 0)
    t = target_quantities(10_000, [0.5, 0.5], [0.3, 0.7], [1.0, 20.0])
    assert t.quantities[0] == pytest.approx(100.0, abs=1e-12)
    t = target_quantities(10_000, [0.3, 0.7], [0.5, 0.5], [1.0, 20.0])
    assert t.quantities[0] < 0 and t.sells == [0] and t.buys == []


def test_trading_cost_examples():
    none = trading_cost([None, None], [1.0, 10.0, 10.0], 0.002)
    assert (none.commission, none.slippage, none.total) == (0.0, 0.0, 0.0)
    buy = trading_cost([_fill(100, 10.1)], [10.0], 0.002)
    assert buy.commission == pytest.approx(2.02, abs=1e-12)
    assert buy.slippage == pytest.approx(10.0, abs=1e-9)
    assert buy.total == pytest.approx(12.02, abs=1e-9)
    sell = trading_cost([_fill(-100, 10.1)], [10.0], 0.0)
    assert sell.slippage == pytest.approx(-10.0, abs=1e-9)
    assert sell.total == sell.commission + sell.slippage


def test_settle_zero_trades_is_drift():
    s = PortfolioState([0.1, 0.6, 0.3], 1000.0, [1.0, 10.0, 5.0])
    nxt = [1.0, 11.0, 4.0]
    after = settle(s, None, nxt, 0.0)
    v, w = drift(s, nxt)
    assert after.value == pytest.approx(v, rel=1e-12)
    assert np.allclose(after.weights, w, rtol=0, atol=1e-12)
    assert after.t == 1


def test_settle_fills_at_reference_equal_drift():
    s = PortfolioState([0.5, 0.25, 0.25], 1000.0, [1.0, 10.0, 5.0])
    nxt = np.array([1.0, 10.0, 5.0])
    t = target_quantities(s.value, s.weights, [0.2, 0.4, 0.4], nxt)
    fills = [_fill(q, p) for q, p in zip(t.quantities, nxt[1:])]
    after = settle(s, fills, nxt, 0.0)
    assert after.value == pytest.approx(1000.0, rel=1e-12)
    assert np.allclose(after.weights, [0.2, 0.4, 0.4], atol=1e-12)


def test_settle_matches_cash_ledger_two_assets():
    w = [0.4, 0.3, 0.3]
    p = [1.0, 20.0, 50.0]
    nxt = [1.0, 21.0, 48.5]
    s = PortfolioState(w, 10_000.0, p)
    trades = {1: [(-40.0, 20.1), (-20.0, 19.9)], 2: [(25.0, 50.2), (10.0, 50.4)]}
    fills = [
        FillReport(Direction.SELL, ((20.1, 40.0), (19.9, 20.0))),
        FillReport(Direction.BUY, ((50.2, 25.0), (50.4, 10.0))),
    ]
    after = settle(s, fills, nxt, 0.002)
    expected = cash_ledger(10_000.0, w, p, trades, nxt, 0.002)
    assert after.value == pytest.approx(expected, rel=1e-12)
    assert settle_compact(s, fills, nxt, 0.002) == pytest.approx(expected, rel=1e-12)


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_compact_and_ledger_forms_agree(seed):
    rng = np.random.default_rng(seed)
    m = int(rng.integers(1, 5))
    w = rng.dirichlet(np.ones(m + 1))
    w[0] += 0.3
    w /= w.sum()
    p = np.concatenate([[1.0], rng.uniform(5, 50, m)])
    nxt = np.concatenate([[1.0], p[1:] * rng.uniform(0.9, 1.1, m)])
    s = PortfolioState(w, float(rng.uniform(1e3, 1e6)), p)
    held = s.holdings
    fills = []
    for i in range(1, m + 1):
        if rng.random() < 0.5:
            q = -held[i] * rng.uniform(0, 1)
        else:
            q = s.value * w[0] / (4 * m) / p[i] * rng.uniform(0, 1)
        fills.append(_fill(q, p[i] * rng.uniform(0.98, 1.02)) if q != 0 else None)
    lam = float(rng.uniform(0, 0.01))
    after = settle(s, fills, nxt, lam)
    assert after.value == pytest.approx(settle_compact(s, fills, nxt, lam), rel=1e-9)
    assert abs(after.weights.sum() - 1) < 1e-9 and np.all(after.weights >= 0)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 1000))
def test_settle_scale_equivariance(seed, scale):
    rng = np.random.default_rng(seed)
    w = rng.dirichlet(np.ones(3))
    p = np.concatenate([[1.0], rng.uniform(5, 50, 2)])
    nxt = np.concatenate([[1.0], p[1:] * rng.uniform(0.9, 1.1, 2)])
    q = -0.5 * w[1] * 1000 / p[1]
    base = settle(PortfolioState(w, 1000.0, p), [_fill(q, p[1]), None], nxt, 0.002)
    big = settle(PortfolioState(w, 1000.0 * scale, p), [_fill(q * scale, p[1]), None], nxt, 0.002)
    assert big.value == pytest.approx(base.value * scale, rel=1e-9)
    assert np.allclose(big.weights, base.weights, atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_drift_returns_simplex(seed):
    rng = np.random.default_rng(seed)
    m = int(rng.integers(1, 6))
    w = rng.dirichlet(np.ones(m + 1))
    p = np.concatenate([[1.0], rng.uniform(1, 100, m)])
    nxt = np.concatenate([[1.0], rng.uniform(1, 100, m)])
    v, w2 = drift(PortfolioState(w, 1.0, p), nxt)
    assert v > 0 and abs(w2.sum() - 1) < 1e-9 and np.all(w2 >= 0)
    t = target_quantities(v, w2, w2, nxt)
    assert np.all(t.quantities == 0)


def test_overspending_is_infeasible():
    s = PortfolioState([0.1, 0.9], 1000.0, [1.0, 10.0])
    with pytest.raises(InfeasibleRebalanceError):
        settle(s, [_fill(20.0, 10.0)], [1.0, 10.0], 0.0)


def test_overselling_is_infeasible():
    s = PortfolioState([0.5, 0.5], 1000.0, [1.0, 10.0])
    with pytest.raises(InfeasibleRebalanceError):
        settle(s, [_fill(-60.0, 10.0)], [1.0, 10.0], 0.0)


def test_worthless_next_prices_rejected():
    s = PortfolioState([0.0, 1.0], 1000.0, [1.0, 10.0])
    with pytest.raises((BankruptcyError, ValidationError)):
        settle(s, None, [1.0, 0.0], 0.0)


def test_state_validation():
    with pytest.raises(ValidationError):
        PortfolioState([0.5, 0.6], 1.0, [1.0, 2.0])
    with pytest.raises(ValidationError):
        PortfolioState([0.5, 0.5], 1.0, [2.0, 2.0])
    with pytest.raises(ValidationError):
        PortfolioState([0.5, 0.5], 0.0, [1.0, 2.0])


def test_high_reward_and_ledger_record():
    assert high_reward(100.0, 100.0) == 0.0
    assert high_reward(100.0, 110.0) == 10.0
    assert high_reward(100.0, 95.0) == -5.0
    s = PortfolioState.all_cash(100.0, [1.0, 5.0])
    cost = trading_cost([None], [5.0], 0.002)
    rec = ledger_record(3, s, s, cost)
    assert rec["t"] == 3 and rec["c_com"] == 0.0 and rec["weights"] == [1.0, 0.0]
