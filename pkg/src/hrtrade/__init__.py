"""Hierarchical reinforcement learning for portfolio management with limit-order execution.

A high-level policy chooses portfolio weights once per holding period; frozen
low-level policies execute the resulting orders in a limit order book.
"""
from .accounting import PortfolioState, drift, settle, settle_compact, target_quantities, trading_cost
from .config import RunConfig
from .evaluation import BaselineStrategy, EquityCurve, MetricsReport, arr, asr, ddr, mdd, run_backtest, simplex_project
from .exchange import Direction, ExecutionEnv, ExecutionTask, FillReport, LimitOrderAction
from .high_level import PortfolioPolicy
from .low_level import ActionGrid, ExecutionAgent, MarketOrderExecutor
from .market_data import SyntheticMarketConfig, gen_synthetic_market, load_lob, load_ohlcv
from .training import HierarchicalEpisodeConfig, MarketData, PolicyBank, PretrainConfig, pretrain_low, train_high

__version__ = "0.1.0"
