"""Run configuration: one flat key-value file drives every command."""
import dataclasses
import hashlib
import json
import zlib
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from . import _flatfile
from .exceptions import ConfigError, HRTradeError

UNHASHED = ("out", "jobs")
STRATEGIES = ("hrpm", "ucrp", "winner", "loser", "olmar", "wmamr")


def derive_seed(root, label) -> int:
    """Independent 32-bit seed for the component named ``label``."""
    return int(np.random.SeedSequence([int(root), zlib.crc32(label.encode())]).generate_state(1)[0])


@dataclass(frozen=True)
class RunConfig:
    # run
    out: str = "run"
    seed: int = 0
    jobs: int = 1
    # data
    data_source: str = "synthetic"
    ohlcv_paths: Tuple[str, ...] = ()
    lob_paths: Tuple[str, ...] = ()
    n_assets: int = 2
    n_days: int = 160
    steps_per_day: int = 20
    drift: Tuple[float, ...] = (0.0,)
    volatility: Tuple[float, ...] = (0.01,)
    depth: int = 5
    level_spacing: float = 0.05
    base_volume: float = 500.0
    initial_price: float = 100.0
    train_fraction: float = 0.75
    # periods and accounting
    commission: float = 0.002
    holding_days: int = 5
    trading_days: int = 1
    window: int = 10
    exec_window: int = 0
    horizon: int = 8
    initial_value: float = 100_000.0
    # low level
    lob_window: int = 10
    levels: int = 5
    tick: float = 0.05
    price_offsets: Tuple[int, ...] = (-2, -1, 0, 1, 2)
    proportions: Tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 1.0)
    low_hidden: Tuple[int, ...] = (64, 64)
    low_learning_rate: float = 1e-3
    low_gamma: float = 1.0
    low_batch_size: int = 32
    low_buffer_size: int = 100_000
    low_target_sync: int = 500
    low_train_steps: int = 5000
    eps_decay_steps: int = 0
    q_max: float = 2000.0
    t_max: int = 20
    quantity_lattice: int = 9
    episodes_per_cell: int = 1
    eval_episodes: int = 50
    shared_policy: bool = False
    # high level
    high_hidden: Tuple[int, ...] = (32,)
    eta: float = 0.05
    gamma: float = 0.99
    kappa: float = 50.0
    high_learning_rate: float = 0.01
    high_batch_size: int = 8
    high_episodes: int = 400
    # evaluation
    baseline_execution: str = "ideal"
    olmar_window: int = 5
    olmar_epsilon: float = 10.0
    wmamr_window: int = 5
    wmamr_epsilon: float = 0.5
    strict_loser: bool = False

    def __post_init__(self):
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(f.default, tuple):
                value = tuple(value) if isinstance(value, (list, tuple)) else (value,)
                object.__setattr__(self, f.name, value)
            elif isinstance(f.default, bool):
                if not isinstance(value, bool):
                    raise ConfigError(f"{f.name} must be true or false")
            elif isinstance(f.default, int):
                if isinstance(value, bool) or not isinstance(value, int):
                    raise ConfigError(f"{f.name} must be an integer, got {value!r}")
            elif isinstance(f.default, float):
                if isinstance(value, bool) or not isinstance(value, (int, float)):
                    raise ConfigError(f"{f.name} must be a number, got {value!r}")
                object.__setattr__(self, f.name, float(value))
            elif isinstance(f.default, str) and not isinstance(value, str):
                raise ConfigError(f"{f.name} must be a string")
        self._check()

    def _check(self):
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.data_source in ("synthetic", "csv"), "data_source must be 'synthetic' or 'csv'")
        if self.data_source == "csv":
            need(len(self.ohlcv_paths) >= 1, "csv data needs ohlcv_paths")
            need(len(self.lob_paths) in (0, len(self.ohlcv_paths)), "lob_paths must match ohlcv_paths")
        need(self.seed >= 0 and self.jobs >= 1, "seed must be >= 0 and jobs >= 1")
        need(self.n_assets >= 1 and self.n_days >= 2 and self.steps_per_day >= 2, "n_assets, n_days, steps_per_day too small")
        need(len(self.drift) in (1, self.n_assets), "drift needs one value or one per asset")
        need(len(self.volatility) in (1, self.n_assets), "volatility needs one value or one per asset")
        need(0 < self.train_fraction < 1, "train_fraction must lie in (0, 1)")
        need(0 <= self.commission < 1, "commission must lie in [0, 1)")
        need(min(self.holding_days, self.trading_days, self.window, self.horizon) >= 1, "period lengths must be >= 1")
        need(self.exec_window >= 0 and self.lob_window >= 1 and self.levels >= 1, "bad execution window settings")
        need(self.tick > 0 and self.q_max > 0 and self.t_max >= 1, "tick, q_max, t_max must be positive")
        need(len(self.price_offsets) >= 1 and len(self.proportions) >= 2, "action grid too small")
        need(all(0 <= p <= 1 for p in self.proportions), "proportions must lie in [0, 1]")
        need(self.quantity_lattice >= 2 and self.episodes_per_cell >= 1, "bad pre-training lattice")
        need(self.eta >= 0 and 0 < self.gamma <= 1 and self.kappa > 0, "need eta >= 0, gamma in (0, 1], kappa > 0")
        need(0 < self.low_gamma <= 1, "low_gamma must lie in (0, 1]")
        need(self.high_learning_rate >= 0 and self.low_learning_rate >= 0, "learning rates must be >= 0")
        need(self.baseline_execution in ("ideal", "simulator"), "baseline_execution must be 'ideal' or 'simulator'")
        need(self.initial_value > 0, "initial_value must be > 0")
        need(min(self.olmar_window, self.wmamr_window) >= 1, "baseline windows must be >= 1")
        need(self.olmar_epsilon > 0 and self.wmamr_epsilon > 0, "baseline epsilons must be > 0")

    @classmethod
    def from_dict(cls, mapping):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(mapping) - names)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        try:
            return cls(**mapping)
        except ConfigError:
            raise
        except (TypeError, ValueError, HRTradeError) as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path, **overrides):
        try:
            mapping = _flatfile.load(path)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        mapping.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(mapping)

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    def save(self, path):
        _flatfile.dump(self.to_dict(), path)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    @property
    def config_hash(self) -> str:
        """SHA-256 of the canonical content, ignoring output location and worker count."""
        content = {k: v for k, v in self.to_dict().items() if k not in UNHASHED}
        return hashlib.sha256(json.dumps(content, sort_keys=True).encode()).hexdigest()

    def seed_for(self, label):
        return derive_seed(self.seed, label)

    @property
    def asset_ids(self):
        if self.data_source == "synthetic":
            return [f"asset{i}" for i in range(self.n_assets)]
        from pathlib import Path

        return [Path(p).stem for p in self.ohlcv_paths]
