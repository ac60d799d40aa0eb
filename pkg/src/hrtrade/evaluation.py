"""Backtests, performance metrics and classical online-portfolio baselines."""
import csv
import enum
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import check_simplex, check_vector
from .exceptions import ValidationError
from .high_level import PortfolioPolicy
from .training import EpisodeResult, HierarchicalEpisodeConfig, MarketData, run_periods

TRADING_DAYS = 252
ZERO_VOL_RTOL = 1e-12


@dataclass(frozen=True)
class EquityCurve:
    days: np.ndarray
    values: np.ndarray
    trading_days_per_year: int = TRADING_DAYS

    def __post_init__(self):
        days = np.asarray(self.days, dtype=np.int64)
        values = check_vector(self.values, "values")
        if days.shape != values.shape:
            raise ValidationError("days and values differ in length")
        if values.size == 0:
            raise ValidationError("empty equity curve")
        if np.any(np.diff(days) <= 0):
            raise ValidationError("curve days must be strictly increasing")
        if np.any(values <= 0):
            raise ValidationError("curve values must be > 0")
        object.__setattr__(self, "days", days)
        object.__setattr__(self, "values", values)

    @classmethod
    def from_values(cls, values, trading_days_per_year=TRADING_DAYS):
        return cls(np.arange(len(values)), values, trading_days_per_year)

    @property
    def returns(self):
        return self.values[1:] / self.values[:-1] - 1.0


def arr(curve: EquityCurve) -> float:
    """Simple annualized return: total return scaled by ``T_year / T_all``."""
    if curve.values.size < 2:
        raise ValidationError("ARR needs at least two points")
    v = curve.values
    span = curve.days[-1] - curve.days[0]
    return float((v[-1] - v[0]) / v[0] * curve.trading_days_per_year / span)


def asr(curve: EquityCurve) -> Optional[float]:
    """ARR over the annualized sample std of daily returns; None at zero volatility."""
    if curve.values.size < 3:
        raise ValidationError("ASR needs at least three points")
    r = curve.returns
    sd = float(np.std(r, ddof=1))
    if sd <= ZERO_VOL_RTOL * max(1.0, float(np.max(np.abs(r)))):
        return None
    return arr(curve) / (sd * math.sqrt(curve.trading_days_per_year))


def mdd(curve: EquityCurve) -> float:
    peak = -np.inf
    worst = 0.0
    for v in curve.values:
        peak = max(peak, v)
        worst = max(worst, (peak - v) / peak)
    return float(worst)


def ddr(curve: EquityCurve, mar=0.0) -> Optional[float]:
    """ARR over annualized downside deviation below ``mar``; None without losses."""
    if curve.values.size < 3:
        raise ValidationError("DDR needs at least three points")
    shortfall = np.minimum(curve.returns - mar, 0.0)
    if not np.any(shortfall < 0):
        return None
    dd = math.sqrt(float(np.mean(shortfall**2))) * math.sqrt(curve.trading_days_per_year)
    return arr(curve) / dd


@dataclass(frozen=True)
class MetricsReport:
    ARR: float
    ASR: Optional[float]
    MDD: float
    DDR: Optional[float]
    MAR: float = 0.0

    @classmethod
    def of(cls, curve: EquityCurve, mar=0.0):
        return cls(arr(curve), asr(curve), mdd(curve), ddr(curve, mar), mar)

    def to_dict(self):
        return asdict(self)


def simplex_project(v) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort-based)."""
    v = check_vector(v, "vector")
    u = np.sort(v)[::-1]
    css = np.cumsum(u)
    k = np.arange(1, v.size + 1)
    rho = np.nonzero(u - (css - 1.0) / k > 0)[0][-1]
    theta = (css[rho] - 1.0) / (rho + 1)
    w = np.maximum(v - theta, 0.0)
    return w / w.sum()


class BaselineKind(str, enum.Enum):
    UCRP = "ucrp"
    WINNER = "winner"
    LOSER = "loser"
    OLMAR = "olmar"
    WMAMR = "wmamr"


def _period_relatives(history):
    return history[1:] / history[:-1]


def olmar_update(weights, history, window=5, epsilon=10.0):
    """One OLMAR step: predicted relatives are the window moving average over the latest price."""
    pred = history[-window:].mean(axis=0) / history[-1]
    dev = pred - pred.mean()
    denom = float(dev @ dev)
    step = 0.0 if denom == 0 else max(0.0, (epsilon - float(weights @ pred)) / denom)
    return simplex_project(weights + step * dev)


def wmamr_update(weights, history, window=5, epsilon=0.5):
    """One WMAMR step: passive-aggressive reversion against the mean of the last ``window`` relatives."""
    rel = _period_relatives(history)[-window:].mean(axis=0)
    dev = rel - rel.mean()
    loss = max(0.0, float(weights @ rel) - epsilon)
    denom = float(dev @ dev)
    step = 0.0 if denom == 0 else loss / denom
    return simplex_project(weights - step * dev)


def baseline_weights(kind, price_history, current_weights, window=5, epsilon=None, strict_loser=False):
    """Next weights of a classical strategy.

    ``price_history`` is an ``(n, M + 1)`` array of prices at period
    boundaries, cash first, with the latest row last. Strategies without
    enough history keep ``current_weights``.
    """
    kind = BaselineKind(kind)
    w = check_simplex(current_weights)
    hist = np.asarray(price_history, dtype=np.float64)
    if hist.ndim != 2 or hist.shape[1] != w.shape[0]:
        raise ValidationError("price history must be (n, M + 1) matching the weights")
    n = w.shape[0]
    if kind is BaselineKind.UCRP:
        return np.full(n, 1.0 / n)
    if kind in (BaselineKind.WINNER, BaselineKind.LOSER):
        if hist.shape[0] < 2:
            return w.copy()
        ret = hist[-1] / hist[-2]
        out = np.zeros(n)
        if kind is BaselineKind.WINNER:
            out[int(np.argmax(ret))] = 1.0
            return out
        k = 1 if strict_loser else max(1, n // 2)
        out[np.argsort(ret, kind="stable")[:k]] = 1.0 / k
        return out
    if kind is BaselineKind.OLMAR:
        if hist.shape[0] < window:
            return w.copy()
        return olmar_update(w, hist, window, 10.0 if epsilon is None else epsilon)
    if hist.shape[0] < window + 1:
        return w.copy()
    return wmamr_update(w, hist, window, 0.5 if epsilon is None else epsilon)


class BaselineStrategy(BaseEstimator):
    """Classical strategy wrapped for the backtest harness."""

    def __init__(self, kind="ucrp", window=5, epsilon=None, strict_loser=False):
        self.kind = kind
        self.window = window
        self.epsilon = epsilon
        self.strict_loser = strict_loser

    @property
    def name(self):
        return BaselineKind(self.kind).value

    def predict(self, price_history, current_weights):
        if self.window < 1 or (self.epsilon is not None and not self.epsilon > 0):
            raise ValidationError("baseline window and epsilon must be positive")
        return baseline_weights(self.kind, price_history, current_weights, self.window, self.epsilon, self.strict_loser)


class CashStrategy:
    name = "cash"

    def predict(self, price_history, current_weights):
        out = np.zeros(len(current_weights))
        out[0] = 1.0
        return out


def boundary_history(market: MarketData, day, period_days):
    """Prices (cash first) at the period boundaries up to the close before ``day``."""
    idx = np.arange(day - 1, -1, -period_days)[::-1]
    return np.column_stack([np.ones(idx.size), market.closes[idx]])


def _decider(strategy, market, config):
    if isinstance(strategy, PortfolioPolicy):
        def decide(state, day):
            return strategy.act(state, deterministic=True)
    else:
        def decide(state, day):
            hist = boundary_history(market, day, config.period_days)
            return strategy.predict(hist, state.weights), 0.0
    return decide


def strategy_name(strategy):
    return "hrpm" if isinstance(strategy, PortfolioPolicy) else strategy.name


def run_backtest(strategy, market: MarketData, config: HierarchicalEpisodeConfig, start_day, bank=None, n_periods=None):
    """Backtest a policy or baseline with the shared period loop.

    Returns the daily equity curve and the full episode record (ledgers and
    fill logs).
    """
    if config.execution == "simulator" and bank is None:
        raise ValidationError("simulator execution needs a policy bank")
    result: EpisodeResult = run_periods(_decider(strategy, market, config), bank, market, config, start_day, n_periods)
    return EquityCurve(np.asarray(result.days), np.asarray(result.values)), result


def index_proxy_curve(market: MarketData, first_day, last_day, initial_value=1.0):
    """Buy-and-hold of an equal-weight basket of the risky assets."""
    closes = market.closes[first_day : last_day + 1]
    growth = (closes / closes[0]).mean(axis=1)
    return EquityCurve(np.arange(first_day, last_day + 1), initial_value * growth)


def report_row(name, curve: EquityCurve, execution_mode, config_hash):
    m = MetricsReport.of(curve)
    return {
        "strategy": name,
        "ARR": m.ARR,
        "ASR": m.ASR,
        "MDD": m.MDD,
        "DDR": m.DDR,
        "execution_mode": execution_mode,
        "config_hash": config_hash,
    }


def comparison_table(curves: Dict[str, EquityCurve], execution_modes: Dict[str, str], config_hash, index_curve=None):
    """One metrics row per strategy, plus a labelled index-proxy row."""
    rows = [report_row(name, c, execution_modes.get(name, ""), config_hash) for name, c in curves.items()]
    if index_curve is not None:
        rows.append(report_row("index-proxy", index_curve, "buy-and-hold", config_hash))
    return rows


def sort_table(rows):
    return sorted(rows, key=lambda r: (-r["ARR"], r["strategy"]))


def dumps_table(rows) -> str:
    return json.dumps(rows, sort_keys=True, indent=1)


def loads_table(text) -> List[dict]:
    return json.loads(text)


def format_table(rows) -> str:
    header = f"{'strategy':<14}{'ARR':>12}{'ASR':>12}{'MDD':>12}{'DDR':>12}  execution"
    lines = [header]
    for r in rows:
        cells = [f"{r[k]:>12.6f}" if r[k] is not None else f"{'-':>12}" for k in ("ARR", "ASR", "MDD", "DDR")]
        lines.append(f"{r['strategy']:<14}{''.join(cells)}  {r['execution_mode']}")
    return "\n".join(lines)


def write_curve_csv(curve: EquityCurve, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["day", "value"])
        for d, v in zip(curve.days, curve.values):
            w.writerow([int(d), repr(float(v))])


def read_curve_csv(path) -> EquityCurve:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return EquityCurve([int(r["day"]) for r in rows], [float(r["value"]) for r in rows])


def write_long_csv(curves: Dict[str, EquityCurve], path):
    """Plot-ready long format: one row per (strategy, day)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["strategy", "day", "value"])
        for name, c in curves.items():
            for d, v in zip(c.days, c.values):
                w.writerow([name, int(d), repr(float(v))])
