"""Two-stage training: low-level execution policies are pre-trained per
(asset, direction) over a lattice of private states, then frozen while the
portfolio policy is trained on top of them."""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import accounting as acc
from ._validation import check_random_state
from .exceptions import BankruptcyError, StreamError, TrainingDivergenceError, ValidationError
from .exchange import Direction, ExecutionEnv, ExecutionTask, FillReport, low_reward
from .high_level import HighState, HighTrajectory, PortfolioPolicy, entropy
from .low_level import ExecutionAgent, MarketOrderExecutor, run_execution
from .market_data import BarSeries, LobSnapshot, make_feature_window

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PretrainConfig:
    """Lattice and budget for low-level pre-training.

    ``quantity_lattice`` counts lattice points including zero: zero plus
    ``quantity_lattice - 1`` evenly spaced quantities in ``(0, q_max]``.
    """

    assets: Tuple[str, ...] = ("asset0",)
    directions: Tuple[str, ...] = ("buy", "sell")
    q_max: float = 2000.0
    t_max: int = 20
    episodes_per_cell: int = 1
    quantity_lattice: int = 9
    train_steps: int = 20_000
    eval_episodes: int = 50

    def __post_init__(self):
        if not self.q_max > 0:
            raise ValidationError("q_max must be > 0")
        if self.t_max < 1 or self.episodes_per_cell < 1 or self.quantity_lattice < 2:
            raise ValidationError("t_max, episodes_per_cell must be >= 1 and quantity_lattice >= 2")

    @property
    def quantities(self):
        n = self.quantity_lattice - 1
        return np.concatenate([[0.0], self.q_max * np.arange(1, n + 1) / n])


def iterate_tasks(config: PretrainConfig, rng=None, asset_id="asset0", direction="buy", reference_price=1.0):
    """Endless stream of tasks over the (quantity, window) lattice.

    Each cycle visits every cell ``episodes_per_cell`` times in a shuffled
    order before the next cycle starts.
    """
    rng = check_random_state(rng)
    cells = [(q, T) for q in config.quantities for T in range(1, config.t_max + 1)]
    cells = [c for c in cells for _ in range(config.episodes_per_cell)]
    while True:
        for j in rng.permutation(len(cells)):
            q, T = cells[j]
            yield ExecutionTask(asset_id, direction, float(q), int(T), reference_price)


def place_tasks(tasks, bars: BarSeries, books: Sequence[LobSnapshot], steps_per_day, days, rng, skip_empty=True):
    """Attach each task to a random day so its window ends at that day's close.

    Yields ``(task, start_step)`` with the reference price set to the close.
    """
    days = np.asarray(days)
    for task in tasks:
        if skip_empty and task.quantity <= 0:
            continue
        d = int(days[rng.integers(len(days))])
        start = d * steps_per_day + steps_per_day - task.window
        ref = float(bars.close[d])
        yield ExecutionTask(task.asset_id, task.direction, task.quantity, task.window, ref), start


def evaluate_executor(executor, env, bars, books, steps_per_day, days, tasks_or_cells, rng):
    """Mean trading cost (negated total reward) of ``executor`` on held-out tasks."""
    costs = []
    for task, start in place_tasks(tasks_or_cells, bars, books, steps_per_day, days, rng):
        reward, _ = run_execution(env, executor, task, start)
        costs.append(-reward)
    return float(np.mean(costs)) if costs else 0.0


@dataclass
class PolicyBank:
    """Frozen execution policies keyed by ``(asset_id, direction)``."""

    policies: Dict[Tuple[str, str], object] = field(default_factory=dict)
    stats: Dict[Tuple[str, str], dict] = field(default_factory=dict)
    shared: bool = False

    def __len__(self):
        return len(self.policies)

    def get(self, asset_id, direction):
        direction = Direction.of(direction).value
        if self.shared:
            return self.policies[("*", direction)]
        return self.policies[(asset_id, direction)]

    def missing(self, asset_ids):
        if self.shared:
            return [("*", d) for d in ("buy", "sell") if ("*", d) not in self.policies]
        return [(a, d) for a in asset_ids for d in ("buy", "sell") if (a, d) not in self.policies]

    @classmethod
    def market_orders(cls, asset_ids):
        ex = MarketOrderExecutor()
        return cls({(a, d): ex for a in asset_ids for d in ("buy", "sell")})

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for (asset, direction), agent in sorted(self.policies.items()):
            agent.save(directory / f"{asset}_{direction}.ckpt")
        meta = {f"{a}_{d}": s for (a, d), s in sorted(self.stats.items())}
        (directory / "stats.json").write_text(json.dumps({"shared": self.shared, "stats": meta}, sort_keys=True))

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        bank = cls()
        meta_path = directory / "stats.json"
        if meta_path.exists():
            bank.shared = json.loads(meta_path.read_text()).get("shared", False)
        for ckpt in sorted(directory.glob("*.ckpt")):
            asset, direction = ckpt.stem.rsplit("_", 1)
            bank.policies[(asset, direction)] = ExecutionAgent.load(ckpt)
        return bank


def split_days(n_days, lob_window, steps_per_day, holdout_fraction=0.25):
    first = max(1, int(np.ceil(lob_window / steps_per_day)))
    days = np.arange(first, n_days)
    cut = int(len(days) * (1 - holdout_fraction))
    return days[:cut], days[cut:]


def pretrain_one(bars, books, steps_per_day, direction, config: PretrainConfig, agent_params, seed, train_days, eval_days, commission):
    """Train and evaluate one (asset, direction) execution policy."""
    rng = np.random.default_rng(seed)
    agent = ExecutionAgent(**{**agent_params, "random_state": rng})
    env = ExecutionEnv(books, agent.lob_window, agent.levels, commission)
    tasks = iterate_tasks(config, rng, bars.asset_id, direction)
    agent.fit(env, place_tasks(tasks, bars, books, steps_per_day, train_days, rng), config.train_steps)
    eval_rng = np.random.default_rng(seed + 1)
    cells = [
        ExecutionTask(bars.asset_id, direction, float(q), int(config.t_max), 1.0)
        for q in eval_rng.uniform(0.1, 1.0, size=config.eval_episodes) * config.q_max
    ]
    agent_cost = evaluate_executor(agent, env, bars, books, steps_per_day, eval_days, cells, np.random.default_rng(seed + 2))
    base_cost = evaluate_executor(
        MarketOrderExecutor(), env, bars, books, steps_per_day, eval_days, cells, np.random.default_rng(seed + 2)
    )
    stats = {
        "agent_cost": agent_cost,
        "market_order_cost": base_cost,
        "converged": bool(agent_cost <= base_cost),
        "updates": agent.updates_,
        "episodes": agent.episodes_,
    }
    if not stats["converged"]:
        logger.warning("%s %s policy costs more than the market-order baseline", bars.asset_id, direction)
    return agent, stats


def pretrain_low(
    bars_list: Sequence[BarSeries],
    books_list: Sequence[Sequence[LobSnapshot]],
    steps_per_day,
    config: PretrainConfig,
    agent_params=None,
    seed=0,
    commission=0.002,
    shared=False,
    jobs=1,
) -> PolicyBank:
    """Pre-train one buy and one sell policy per asset (or one shared pair)."""
    agent_params = dict(agent_params or {})
    agent_params.setdefault("q_scale", config.q_max)
    agent_params.setdefault("t_scale", config.t_max)
    lob_window = agent_params.get("lob_window", 10)
    by_id = {b.asset_id: (b, books) for b, books in zip(bars_list, books_list)}
    assets = ["*"] if shared else [a for a in config.assets if a in by_id]
    missing = [a for a in config.assets if a not in by_id]
    if missing and not shared:
        raise ValidationError(f"no data for assets {missing}")
    jobs_args = []
    for k, asset in enumerate(assets):
        bars, books = by_id[config.assets[0]] if shared else by_id[asset]
        n_days = len(bars)
        train_days, eval_days = split_days(n_days, lob_window, steps_per_day)
        for j, direction in enumerate(config.directions):
            sub_seed = int(np.random.SeedSequence([seed, k, j]).generate_state(1)[0])
            jobs_args.append(
                ((asset, direction), (bars, books, steps_per_day, direction, config, agent_params, sub_seed, train_days, eval_days, commission))
            )
    results = _run_jobs(jobs_args, jobs)
    bank = PolicyBank(shared=shared)
    for key, (agent, stats) in results:
        bank.policies[key] = agent
        bank.stats[key] = stats
    return bank


def _pretrain_job(args):
    key, params = args
    return key, pretrain_one(*params)


def _run_jobs(jobs_args, jobs):
    if jobs <= 1 or len(jobs_args) <= 1:
        return [_pretrain_job(a) for a in jobs_args]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_pretrain_job, jobs_args))


class MarketData:
    """Aligned daily bars (and optionally LOB streams) for the asset universe."""

    def __init__(self, bars: Sequence[BarSeries], books=None, steps_per_day=None):
        self.bars = list(bars)
        if not self.bars:
            raise ValidationError("market data needs at least one asset")
        days = self.bars[0].days
        for b in self.bars[1:]:
            if len(b) != len(days) or np.any(b.days != days):
                raise ValidationError("bar series are not aligned on the same days")
        self.books = None if books is None else list(books)
        if self.books is not None:
            if len(self.books) != len(self.bars):
                raise ValidationError("one LOB stream per asset is required")
            if steps_per_day is None or steps_per_day < 1:
                raise ValidationError("steps_per_day is required with LOB data")
            short = [b.asset_id for b, s in zip(self.bars, self.books) if len(s) < len(days) * steps_per_day]
            if short:
                raise ValidationError(f"LOB streams shorter than {len(days)} days for {short}")
        self.steps_per_day = steps_per_day
        self.closes = np.column_stack([b.close for b in self.bars])
        self._envs = {}

    @classmethod
    def from_synthetic(cls, market):
        return cls(market.bars, market.books, market.config.steps_per_day)

    def truncate(self, n_days):
        """The first ``n_days`` days only."""
        bars = [BarSeries(b.asset_id, b.days[:n_days], b.data[:n_days]) for b in self.bars]
        books = None
        if self.books is not None:
            books = [s[: n_days * self.steps_per_day] for s in self.books]
        return MarketData(bars, books, self.steps_per_day)

    @property
    def asset_ids(self):
        return [b.asset_id for b in self.bars]

    @property
    def n_assets(self):
        return len(self.bars)

    @property
    def n_days(self):
        return self.closes.shape[0]

    def prices(self, day):
        return np.concatenate([[1.0], self.closes[day]])

    def env(self, i, lob_window, levels, commission):
        if self.books is None:
            raise ValidationError("no LOB data: only ideal execution is available")
        key = (i, lob_window, levels, commission)
        if key not in self._envs:
            self._envs[key] = ExecutionEnv(self.books[i], lob_window, levels, commission)
        return self._envs[key]


@dataclass(frozen=True)
class HierarchicalEpisodeConfig:
    """Period structure of one high-level episode.

    Each period starts with ``trading_days`` of execution, followed by
    ``holding_days`` without trades. ``horizon`` is the number of periods
    (None: as many as the data allows). ``execution`` is ``"simulator"`` to
    route orders through the LOB with the policy bank, or ``"ideal"`` to fill
    at the reference close paying commission only.
    """

    holding_days: int = 5
    trading_days: int = 1
    window: int = 10
    horizon: Optional[int] = None
    commission: float = 0.002
    initial_value: float = 100_000.0
    exec_window: Optional[int] = None
    execution: str = "simulator"
    value_floor: float = 1e-8

    def __post_init__(self):
        if min(self.holding_days, self.trading_days, self.window) < 1:
            raise ValidationError("holding_days, trading_days and window must be >= 1")
        if self.horizon is not None and self.horizon < 1:
            raise ValidationError("horizon must be >= 1")
        if self.execution not in ("simulator", "ideal"):
            raise ValidationError(f"unknown execution mode {self.execution!r}")
        if self.commission < 0 or not self.initial_value > 0:
            raise ValidationError("commission must be >= 0 and initial_value > 0")

    @property
    def period_days(self):
        return self.trading_days + self.holding_days

    def steps_in_window(self, steps_per_day):
        return self.exec_window or self.trading_days * steps_per_day

    def first_day(self, steps_per_day=None, lob_window=0):
        day = self.window
        if self.execution == "simulator" and steps_per_day:
            need = lob_window + self.steps_in_window(steps_per_day)
            day = max(day, int(np.ceil(need / steps_per_day)) - self.trading_days)
        return day

    def n_periods(self, start_day, n_days):
        fit = (n_days - start_day) // self.period_days
        return fit if self.horizon is None else min(fit, self.horizon)


@dataclass
class EpisodeResult:
    trajectory: HighTrajectory
    ledger: List[dict]
    fills: List[dict]
    days: List[int]
    values: List[float]
    final_state: Optional[acc.PortfolioState]
    bankrupt: bool = False
    low_actions: List[Dict[str, int]] = field(default_factory=list)
    scaled_buys: int = 0

    @property
    def total_reward(self):
        return float(sum(self.trajectory.rewards))


def _bank_lob_params(bank, asset_id):
    agent = bank.get(asset_id, "buy")
    return getattr(agent, "lob_window", 1), getattr(agent, "levels", 5)


def _scale_report(report: FillReport, factor):
    fills = tuple((p, q * factor) for p, q in report.fills)
    return FillReport(report.direction, fills, report.forced, report.exhausted)


def _execute(market, bank, config, i, direction, quantity, day, ref_price, t, fill_log, audit):
    """Trade ``quantity`` shares of asset ``i`` within the period's window."""
    asset = market.asset_ids[i]
    if config.execution == "ideal":
        report = FillReport(Direction.of(direction), ((float(ref_price), float(quantity)),))
        fill_log.append(
            {
                "t": t,
                "asset": asset,
                "direction": report.direction.value,
                "step": 0,
                "price": float(ref_price),
                "quantity": float(quantity),
                "reward": low_reward(report, ref_price, config.commission),
                "forced": False,
            }
        )
        return report
    lob_window, levels = _bank_lob_params(bank, asset)
    env = market.env(i, lob_window, levels, config.commission)
    S = market.steps_per_day
    window = config.steps_in_window(S)
    start = (day + config.trading_days) * S - window
    task = ExecutionTask(asset, direction, float(quantity), window, float(ref_price))
    executor = bank.get(asset, direction)
    q_scale = getattr(executor, "q_scale", None)
    if q_scale is not None and quantity > q_scale:
        logger.info("task of %.6g %s shares exceeds the training maximum %.6g", quantity, asset, q_scale)
    _, report = run_execution(env, executor, task, start)
    audit[asset] = audit.get(asset, 0) + task.window - env.remaining_time
    for rec in env.log:
        fill_log.append({"t": t, "asset": asset, "direction": task.direction.value, **rec})
    return report


def run_periods(decide, bank, market: MarketData, config: HierarchicalEpisodeConfig, start_day, n_periods=None):
    """Roll the two-timescale loop with an arbitrary weight-choosing rule.

    ``decide(state, day)`` receives the :class:`HighState` observed before
    trading day ``day`` and returns ``(weights, log_density)``.
    """
    M = market.n_assets
    lam = config.commission
    v0 = config.initial_value
    if n_periods is None:
        n_periods = config.n_periods(start_day, market.n_days)
    if n_periods < 1 or start_day < config.window:
        raise StreamError(f"no complete period fits from day {start_day}")
    last_day = start_day + n_periods * config.period_days - 1
    if last_day >= market.n_days:
        raise StreamError(f"{n_periods} periods from day {start_day} need {last_day + 1} days of data")
    state = acc.PortfolioState.all_cash(v0, market.prices(start_day - 1))
    traj = HighTrajectory()
    result = EpisodeResult(traj, [], [], [start_day - 1], [v0], state)
    for t in range(n_periods):
        day = start_day + t * config.period_days
        settle_day = day + config.trading_days - 1
        p_obs = market.prices(day - 1)
        v_mark, w_mark = acc.drift(state, p_obs)
        marked = acc.PortfolioState(w_mark, v_mark, p_obs, state.t)
        high_state = HighState(make_feature_window(market.bars, day - 1, config.window), w_mark)
        w_new, logp = decide(high_state, day)
        p_ref = market.prices(settle_day)
        p_size = p_obs
        if config.execution == "ideal":
            # ideal fills happen at the reference close, so size the orders there
            v_size, w_size = acc.drift(marked, p_ref)
            orders = acc.target_quantities(v_size, w_size, w_new, p_ref)
            p_size = p_ref
        else:
            orders = acc.target_quantities(v_mark, w_mark, w_new, p_obs)
        fills: List[Optional[FillReport]] = [None] * M
        audit: Dict[str, int] = {}
        cash = v_mark * w_mark[0]
        for i in orders.sells:
            rep = _execute(market, bank, config, i, "sell", -orders.quantities[i], day, p_ref[i + 1], t, result.fills, audit)
            fills[i] = rep
            cash += rep.notional * (1.0 - lam)
        buys = orders.buys
        if buys:
            wanted = float(sum(orders.quantities[i] * p_size[i + 1] for i in buys))
            budget = max(cash, 0.0) / (1.0 + lam)
            shrink = min(1.0, budget / wanted) if wanted > 0 else 1.0
            for i in buys:
                q = orders.quantities[i] * shrink
                if q > 0:
                    fills[i] = _execute(market, bank, config, i, "buy", q, day, p_ref[i + 1], t, result.fills, audit)
            spend = sum(fills[i].notional * (1.0 + lam) for i in buys if fills[i] is not None)
            if spend > cash:
                factor = max(cash, 0.0) / spend
                logger.info("period %d: buys overspent cash by %.6g, scaled by %.9f", t, spend - cash, factor)
                result.scaled_buys += 1
                for i in buys:
                    if fills[i] is not None:
                        fills[i] = _scale_report(fills[i], factor)
        result.low_actions.append(audit)
        cost = acc.trading_cost([f for f in fills], p_ref, lam)
        try:
            settled = acc.settle(marked, fills, p_ref, lam, t=t + 1)
        except BankruptcyError:
            floor = config.value_floor * v0
            traj.append(high_state, w_new, logp, (floor - v_mark) / v0, entropy(w_new))
            result.days.append(settle_day)
            result.values.append(floor)
            result.bankrupt = True
            result.final_state = None
            logger.warning("bankruptcy in period %d; episode truncated", t)
            return result
        result.ledger.append(acc.ledger_record(t, marked, settled, cost))
        for d in range(day, settle_day):
            result.days.append(d)
            result.values.append(float(acc.drift(marked, market.prices(d))[0]))
        result.days.append(settle_day)
        result.values.append(settled.value)
        end_day = settle_day + config.holding_days
        for d in range(settle_day + 1, end_day + 1):
            result.days.append(d)
            result.values.append(float(acc.drift(settled, market.prices(d))[0]))
        state = settled
        traj.append(high_state, w_new, logp, acc.high_reward(v_mark, result.values[-1]) / v0, entropy(w_new))
    v_end, w_end = acc.drift(state, market.prices(result.days[-1]))
    result.final_state = acc.PortfolioState(w_end, v_end, market.prices(result.days[-1]), state.t)
    return result


def run_hierarchical_episode(policy: PortfolioPolicy, bank, market: MarketData, config, start_day, rng=None, deterministic=False, n_periods=None):
    """One high-level episode driven by ``policy`` on top of the frozen ``bank``."""
    rng = policy.rng_ if rng is None else rng

    def decide(state, day):
        return policy.act(state, deterministic=deterministic, rng=rng)

    return run_periods(decide, bank, market, config, start_day, n_periods)


def high_input_size(n_assets, window):
    return n_assets * window * 5 + n_assets + 1


@dataclass
class HighTrainResult:
    policy: PortfolioPolicy
    best_validation: float
    best_epoch: int
    curve: List[dict]


def train_high(policy: PortfolioPolicy, bank, market: MarketData, config: HierarchicalEpisodeConfig, train_end=None, validation_start=None):
    """Train the portfolio policy on top of a frozen bank.

    Training episodes start at random days and must finish before
    ``train_end``. After every update the deterministic policy is run from
    ``validation_start`` to the end of the data, and the parameters with the
    best validation return are restored at the end.
    """
    if config.execution == "simulator":
        missing = bank.missing(market.asset_ids)
        if missing:
            raise ValidationError(f"policy bank incomplete, missing {missing}")
    lob_window = max((_bank_lob_params(bank, a)[0] for a in market.asset_ids), default=0) if config.execution == "simulator" else 0
    first = config.first_day(market.steps_per_day, lob_window)
    train_end = market.n_days if train_end is None else train_end
    n_periods = config.horizon or max(1, (train_end - first) // config.period_days)
    last_start = train_end - n_periods * config.period_days
    if last_start < first:
        raise StreamError(f"training range of {train_end} days is too short for {n_periods} periods")
    val_start = first if validation_start is None else max(validation_start, first)
    if not hasattr(policy, "net_"):
        policy.initialize(high_input_size(market.n_assets, config.window), market.n_assets + 1)

    def rollout(pol, rng):
        start = int(rng.integers(first, last_start + 1))
        return run_hierarchical_episode(pol, bank, market, config, start, rng=rng, n_periods=n_periods).trajectory

    def validate():
        res = run_hierarchical_episode(policy, bank, market, config, val_start, deterministic=True)
        return res.total_reward

    best = {"value": validate(), "epoch": -1, "flat": policy.net_.get_flat().copy()}

    def callback(pol, epoch, batch):
        rewards = np.concatenate([tr.rewards for tr in batch])
        if not np.all(np.isfinite(rewards)) or not np.isfinite(pol.last_loss_):
            raise TrainingDivergenceError(f"non-finite loss at epoch {epoch} (loss={pol.last_loss_!r})")
        if not np.all(np.isfinite(pol.net_.get_flat())):
            raise TrainingDivergenceError(f"non-finite policy parameters after epoch {epoch}")
        val = validate()
        pol.history_[-1]["validation_return"] = val
        pol.history_[-1]["loss"] = pol.last_loss_
        if val > best["value"]:
            best.update(value=val, epoch=epoch, flat=pol.net_.get_flat().copy())

    policy.fit(lambda pol, rng: rollout(pol, rng), callback=callback)
    policy.net_.set_flat(best["flat"])
    return HighTrainResult(policy, best["value"], best["epoch"], list(policy.history_))


def save_high(policy: PortfolioPolicy, path, n_assets, window):
    path = Path(path)
    policy.net_.save(path)
    meta = {
        **policy.sidecar(),
        "M": n_assets,
        "k": window,
        "normalization": "prices / first-day close, volume / first-day volume, centred at 1",
    }
    Path(str(path) + ".json").write_text(json.dumps(meta, sort_keys=True))


def load_high(path):
    from .nn import Mlp

    path = Path(path)
    meta = json.loads(Path(str(path) + ".json").read_text())
    policy = PortfolioPolicy(hidden=tuple(meta["hidden"]), kappa=meta["kappa"], eta=meta["eta"], gamma=meta["gamma"])
    policy.initialize(high_input_size(meta["M"], meta["k"]), meta["M"] + 1)
    policy.net_.set_flat(Mlp.load(path).get_flat())
    return policy, meta
