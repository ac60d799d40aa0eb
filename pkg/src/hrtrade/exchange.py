"""Limit-order-book execution environment for the low-level decision process.

The agent's orders are matched against historical (or synthetic) book
snapshots. Fills deplete the current book, but the next snapshot always comes
from the data stream, so the agent has no market impact beyond one step.
"""
import enum
import json
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .exceptions import LifecycleError, LiquidityError, StreamError, ValidationError
from .market_data import LobSnapshot, dense_books, lob_window_from_dense

QTY_EPS = 1e-9


class Direction(str, enum.Enum):
    BUY = "buy"
    SELL = "sell"

    @property
    def sign(self):
        return 1 if self is Direction.BUY else -1

    @classmethod
    def of(cls, value):
        return value if isinstance(value, cls) else cls(value)


@dataclass(frozen=True)
class LimitOrderAction:
    """Limit order ``(price, signed quantity)``; buys are positive and a zero
    quantity means "skip this step"."""

    price: float
    quantity: float

    def __post_init__(self):
        if self.quantity != 0 and not self.price > 0:
            raise ValidationError("limit price must be > 0 for a non-empty order")

    @property
    def is_skip(self):
        return self.quantity == 0

    @classmethod
    def skip(cls):
        return cls(0.0, 0.0)


@dataclass(frozen=True)
class FillReport:
    """Executions of a single order. ``avg_price`` is None when nothing filled."""

    direction: Direction
    fills: Tuple[Tuple[float, float], ...] = ()
    forced: bool = False
    exhausted: bool = False

    @property
    def executed(self) -> float:
        return float(sum(q for _, q in self.fills))

    @property
    def notional(self) -> float:
        return float(sum(p * q for p, q in self.fills))

    @property
    def avg_price(self) -> Optional[float]:
        q = self.executed
        return self.notional / q if q > 0 else None

    @classmethod
    def merge(cls, direction, reports):
        fills = tuple(f for r in reports for f in r.fills)
        return cls(
            Direction.of(direction),
            fills,
            forced=any(r.forced for r in reports),
            exhausted=any(r.exhausted for r in reports),
        )


class OrderBook:
    """Mutable book built from a snapshot, plus one resting agent order."""

    def __init__(self, bids, asks, timestamp=0):
        self.bids = [[float(p), float(v)] for p, v in bids]
        self.asks = [[float(p), float(v)] for p, v in asks]
        self.timestamp = timestamp
        self.resting: Optional[LimitOrderAction] = None
        self._mark_worst()

    def _mark_worst(self):
        # deepest quote per side, kept as a fallback once the levels are eaten
        self.worst_bid = self.bids[-1][0] if self.bids else None
        self.worst_ask = self.asks[-1][0] if self.asks else None

    @classmethod
    def from_snapshot(cls, snap: LobSnapshot):
        return cls(snap.bids, snap.asks, snap.timestamp)

    def side(self, direction):
        """Levels an order in ``direction`` trades against."""
        return self.asks if Direction.of(direction) is Direction.BUY else self.bids

    def best(self, side):
        levels = self.bids if side == "bid" else self.asks
        return levels[0][0] if levels else None

    @property
    def best_bid(self):
        return self.best("bid")

    @property
    def best_ask(self):
        return self.best("ask")

    def total_volume(self, direction):
        return sum(v for _, v in self.side(direction))

    def load(self, snap: LobSnapshot):
        """Replace the market levels with an arriving snapshot.

        A resting agent order is checked once against the new levels and then
        cancelled; the resulting report (possibly empty) is returned.
        """
        self.bids = [[float(p), float(v)] for p, v in snap.bids]
        self.asks = [[float(p), float(v)] for p, v in snap.asks]
        self.timestamp = snap.timestamp
        self._mark_worst()
        resting, self.resting = self.resting, None
        if resting is None:
            return None
        report = match_limit_order(self, resting)
        self.resting = None
        return report


def _walk(levels, qty, limit=None, is_buy=True):
    fills = []
    remaining = qty
    while remaining > 0 and levels:
        price, vol = levels[0]
        if limit is not None and (price > limit if is_buy else price < limit):
            break
        take = min(remaining, vol)
        fills.append((price, take))
        remaining -= take
        if take >= vol:
            levels.pop(0)
        else:
            levels[0][1] = vol - take
    return fills, remaining


def match_limit_order(book: OrderBook, order: LimitOrderAction) -> FillReport:
    """Match a limit order against the opposite side, best price first.

    An unfilled remainder is left in ``book.resting``.
    """
    direction = Direction.BUY if order.quantity >= 0 else Direction.SELL
    if order.is_skip:
        return FillReport(direction)
    qty = abs(order.quantity)
    fills, remaining = _walk(book.side(direction), qty, order.price, direction is Direction.BUY)
    if remaining > QTY_EPS * max(1.0, qty):
        book.resting = LimitOrderAction(order.price, direction.sign * remaining)
    return FillReport(direction, tuple(fills))


def forced_liquidation(book: OrderBook, quantity: float, direction) -> FillReport:
    """Market order for ``quantity`` walking the opposite side of the book.

    If the book runs out, the remainder is filled at the worst quoted level
    and the report is flagged ``exhausted``.
    """
    direction = Direction.of(direction)
    if quantity <= 0:
        return FillReport(direction, forced=True)
    levels = book.side(direction)
    worst = levels[-1][0] if levels else (book.worst_ask if direction is Direction.BUY else book.worst_bid)
    if worst is None:
        raise LiquidityError(f"no {'asks' if direction is Direction.BUY else 'bids'} to liquidate against")
    fills, remaining = _walk(levels, quantity)
    exhausted = remaining > QTY_EPS * max(1.0, quantity)
    if exhausted:
        fills.append((worst, remaining))
    return FillReport(direction, tuple(fills), forced=True, exhausted=exhausted)


def low_reward(fill: FillReport, reference_price: float, commission: float) -> float:
    """Negative trading cost of one fill: commission plus signed slippage
    against the end-of-period reference price."""
    q = fill.executed
    if q <= 0:
        return 0.0
    p = fill.avg_price
    signed = fill.direction.sign * q
    return -(commission * q * p + (p - reference_price) * signed)


@dataclass(frozen=True)
class ExecutionTask:
    asset_id: str
    direction: Direction
    quantity: float
    window: int
    reference_price: float

    def __post_init__(self):
        object.__setattr__(self, "direction", Direction.of(self.direction))
        if self.quantity < 0:
            raise ValidationError("target quantity must be >= 0")
        if self.window < 1:
            raise ValidationError("execution window must be >= 1 step")
        if not self.reference_price > 0:
            raise ValidationError("reference price must be > 0")


@dataclass(frozen=True)
class ExecutionPrivateState:
    remaining_time: int
    remaining_quantity: float
    direction: Direction


@dataclass(frozen=True)
class LowState:
    private: ExecutionPrivateState
    market: np.ndarray = field(repr=False)
    target_quantity: float = 0.0
    window: int = 1


class ExecutionEnv:
    """Episode state machine for executing one :class:`ExecutionTask`.

    Step ``i`` of an episode acts on snapshot ``start + i``; the observed
    market window covers the ``lob_window`` snapshots ending at the current
    one. On the last step any remainder is liquidated on the current book.
    """

    def __init__(self, snapshots: Sequence[LobSnapshot], lob_window=10, levels=5, commission=0.002):
        self.snapshots = snapshots
        self.lob_window = lob_window
        self.levels = levels
        self.commission = commission
        self._dense = dense_books(snapshots, levels)
        self._volume = np.array([snap.total_volume for snap in snapshots])
        self.done = True
        self.log: List[dict] = []

    def reset(self, task: ExecutionTask, start: int) -> LowState:
        if start < self.lob_window:
            raise StreamError(f"start {start} inside the {self.lob_window}-step warm-up")
        if start + task.window > len(self.snapshots):
            raise StreamError(
                f"episode needs snapshots up to {start + task.window - 1}, stream has {len(self.snapshots)}"
            )
        self.task = task
        self.start = start
        self.pos = start
        self.remaining_time = task.window
        self.remaining = float(task.quantity)
        self.executed = 0.0
        self.book = OrderBook.from_snapshot(self.snapshots[start])
        self.done = task.quantity <= 0
        self.log = []
        self.total_reward = 0.0
        return self.state

    @property
    def state(self) -> LowState:
        private = ExecutionPrivateState(self.remaining_time, self.remaining, self.task.direction)
        market = lob_window_from_dense(self._dense, self.pos + 1, self.lob_window, self._volume)
        return LowState(private, market, self.task.quantity, self.task.window)

    def _record(self, report, reward):
        if report.executed > 0:
            self.log.append(
                {
                    "step": int(self.pos - self.start),
                    "price": report.avg_price,
                    "quantity": report.executed,
                    "reward": reward,
                    "forced": report.forced,
                }
            )

    def step(self, action: LimitOrderAction):
        if self.done:
            raise LifecycleError("step() called on a finished episode; call reset()")
        task = self.task
        sign = task.direction.sign
        if action.quantity * sign < 0:
            raise ValidationError(f"order side contradicts {task.direction.value} task")
        qty = min(abs(action.quantity), self.remaining)
        if qty < abs(action.quantity):
            action = LimitOrderAction(action.price, sign * qty)
        reports = []
        if qty > 0:
            reports.append(match_limit_order(self.book, action))
        self._absorb(reports)
        self.remaining_time -= 1
        if self.remaining_time == 0:
            self.book.resting = None
            if self.remaining > 0:
                liq = forced_liquidation(self.book, self.remaining, task.direction)
                reports.append(liq)
                self._absorb(reports[-1:])
            self.done = True
        else:
            self.pos += 1
            late = self.book.load(self.snapshots[self.pos])
            if late is not None:
                reports.append(late)
                self._absorb(reports[-1:])
            if self.remaining <= 0:
                self.done = True
        reward = 0.0
        for r in reports:
            rr = low_reward(r, task.reference_price, self.commission)
            self._record(r, rr)
            reward += rr
        self.total_reward += reward
        merged = FillReport.merge(task.direction, reports)
        return self.state, reward, self.done, merged

    def _absorb(self, reports):
        for r in reports:
            self.executed += r.executed
            self.remaining -= r.executed
        if self.remaining <= QTY_EPS * max(1.0, self.task.quantity):
            self.remaining = 0.0


def write_jsonl(records, path, mode="w"):
    with open(path, mode, encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
