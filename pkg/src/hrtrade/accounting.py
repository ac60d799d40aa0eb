"""Portfolio value and weight bookkeeping across holding and trading periods.

All vectors have ``M + 1`` entries with index 0 holding cash, whose price is
fixed at 1. Quantities are share counts for the ``M`` risky assets only.
"""
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ._validation import check_prices, check_simplex
from .exceptions import BankruptcyError, InfeasibleRebalanceError, ShapeError, ValidationError
from .exchange import FillReport

FEASIBILITY_TOL = 1e-9


@dataclass(frozen=True)
class PortfolioState:
    weights: np.ndarray
    value: float
    prices: np.ndarray
    t: int = 0

    def __post_init__(self):
        w = check_simplex(self.weights)
        p = check_prices(self.prices, size=w.shape[0])
        if not self.value > 0:
            raise ValidationError(f"portfolio value must be > 0, got {self.value!r}")
        w.setflags(write=False)
        p.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "prices", p)
        object.__setattr__(self, "value", float(self.value))

    @property
    def holdings(self):
        """Units held of each constituent (cash units first)."""
        return self.value * self.weights / self.prices

    @classmethod
    def all_cash(cls, value, prices, t=0):
        w = np.zeros(len(prices))
        w[0] = 1.0
        return cls(w, value, prices, t)


@dataclass(frozen=True)
class TargetOrderSet:
    quantities: np.ndarray  # signed, length M; positive buys
    prices: np.ndarray  # p'_t used for sizing, length M + 1

    @property
    def sells(self):
        return [i for i, q in enumerate(self.quantities) if q < 0]

    @property
    def buys(self):
        return [i for i, q in enumerate(self.quantities) if q > 0]


@dataclass(frozen=True)
class TradingCostReport:
    commission: float
    slippage: float
    per_asset_commission: np.ndarray
    per_asset_slippage: np.ndarray

    @property
    def total(self):
        return self.commission + self.slippage


def _ratio(state, prices):
    p = check_prices(prices, size=state.weights.shape[0])
    return state.weights * p / state.prices


def drift(state: PortfolioState, closing_prices):
    """Value and weights at the end of a holding period with no trading."""
    growth = _ratio(state, closing_prices)
    total = growth.sum()
    return state.value * total, growth / total


def target_quantities(value, weights, new_weights, prices) -> TargetOrderSet:
    """Signed share quantities moving ``weights`` to ``new_weights`` at ``prices``."""
    w = check_simplex(weights)
    w_new = check_simplex(new_weights, "new_weights", size=w.shape[0])
    p = check_prices(prices, size=w.shape[0])
    delta = w_new[1:] - w[1:]
    q = value * np.abs(delta) / p[1:] * np.sign(delta)
    q[delta == 0] = 0.0
    return TargetOrderSet(q, p)


def _fills_list(fills, m):
    if fills is None:
        return [None] * m
    fills = list(fills)
    if len(fills) != m:
        raise ShapeError(f"expected {m} fill entries (one per risky asset), got {len(fills)}")
    return fills


def trading_cost(fills: Sequence[Optional[FillReport]], reference_prices, commission) -> TradingCostReport:
    """Commission on executed notional plus slippage against ``reference_prices``.

    ``reference_prices`` may include the cash entry (length ``M + 1``) or not.
    """
    ref = np.asarray(reference_prices, dtype=np.float64)
    fills = list(fills)
    m = len(fills)
    if ref.shape[0] == m + 1:
        ref = ref[1:]
    elif ref.shape[0] != m:
        raise ShapeError("reference prices do not match the number of fills")
    com = np.zeros(m)
    slip = np.zeros(m)
    for i, f in enumerate(fills):
        if f is None or f.executed <= 0:
            continue
        q, p = f.executed, f.avg_price
        com[i] = commission * q * p
        slip[i] = (p - ref[i]) * f.direction.sign * q
    return TradingCostReport(float(com.sum()), float(slip.sum()), com, slip)


def settle_compact(state: PortfolioState, fills, next_prices, commission) -> float:
    """End-of-trading value as drifted value minus total trading cost."""
    growth = _ratio(state, next_prices)
    fills = _fills_list(fills, growth.shape[0] - 1)
    cost = trading_cost(fills, next_prices, commission)
    return state.value * growth.sum() - cost.total


def settle(state: PortfolioState, fills, next_prices, commission, t=None) -> PortfolioState:
    """Apply one trading period's fills and mark the book at ``next_prices``.

    Cash pays for net purchases and the commission on all executed notional;
    risky holdings are the period's opening shares plus signed fills.
    """
    p_next = check_prices(next_prices, size=state.weights.shape[0])
    m = p_next.shape[0] - 1
    fills = _fills_list(fills, m)
    next_t = state.t + 1 if t is None else t
    if all(f is None or f.executed <= 0 for f in fills):
        value, weights = drift(state, p_next)
        return PortfolioState(weights, value, p_next, next_t)
    shares = state.holdings.copy()
    cash = state.value * state.weights[0]
    for i, f in enumerate(fills, start=1):
        if f is None or f.executed <= 0:
            continue
        signed = f.direction.sign * f.executed
        cash -= f.direction.sign * f.notional + commission * f.notional
        shares[i] += signed
    tol = FEASIBILITY_TOL * state.value
    if cash < -tol:
        raise InfeasibleRebalanceError(f"cash would go negative ({cash:.6g})")
    if np.any(shares[1:] < -tol / p_next[1:]):
        raise InfeasibleRebalanceError("sold more shares than held")
    components = np.concatenate([[max(cash, 0.0)], np.maximum(shares[1:], 0.0) * p_next[1:]])
    value = components.sum()
    if not value > 0:
        raise BankruptcyError(f"portfolio value {value!r} at period {next_t}")
    return PortfolioState(components / value, value, p_next, next_t)


def high_reward(value_before, value_after):
    return value_after - value_before


def ledger_record(t, before: PortfolioState, after: PortfolioState, cost: TradingCostReport):
    return {
        "t": int(t),
        "v_before": before.value,
        "v_after": after.value,
        "c_com": cost.commission,
        "c_slippage": cost.slippage,
        "weights": [float(x) for x in after.weights],
    }
