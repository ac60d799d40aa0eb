"""Command-line entry point: ``hrtrade <command> [--config PATH] ...``."""
import argparse
import json
import logging
import sys
from pathlib import Path

from . import evaluation as ev
from .config import STRATEGIES, RunConfig
from .exceptions import ConfigError, DataError, TrainingDivergenceError
from .exchange import write_jsonl
from .high_level import PortfolioPolicy
from .market_data import (
    SyntheticMarketConfig,
    gen_synthetic_market,
    load_lob,
    load_ohlcv,
    write_lob,
    write_ohlcv,
)
from .training import (
    HierarchicalEpisodeConfig,
    MarketData,
    PolicyBank,
    PretrainConfig,
    load_high,
    pretrain_low,
    save_high,
    train_high,
)

logger = logging.getLogger("hrtrade")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE = 0, 2, 3, 4
CONFIG_NAME = "config.cfg"
RUN_META = "run.json"


class Run:
    """Paths and configuration of one run directory."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.root = Path(cfg.out)

    def path(self, *parts):
        return self.root.joinpath(*parts)

    def claim(self):
        """Record the config in the run dir, refusing a different one."""
        meta = self.path(RUN_META)
        if meta.exists():
            recorded = json.loads(meta.read_text()).get("config_hash")
            if recorded != self.cfg.config_hash:
                raise ConfigError(
                    f"{self.root} was created with config hash {recorded}; current config hashes to "
                    f"{self.cfg.config_hash}. Use a new --out directory."
                )
            return
        self.root.mkdir(parents=True, exist_ok=True)
        self.cfg.save(self.path(CONFIG_NAME))
        meta.write_text(json.dumps({"config_hash": self.cfg.config_hash}, sort_keys=True) + "\n")

    def synthetic_config(self):
        c = self.cfg
        return SyntheticMarketConfig(
            n_assets=c.n_assets,
            n_days=c.n_days,
            steps_per_day=c.steps_per_day,
            seed=c.seed_for("market"),
            drift=c.drift,
            volatility=c.volatility,
            depth=c.depth,
            level_spacing=c.level_spacing,
            base_volume=c.base_volume,
            initial_price=c.initial_price,
        )

    def data_paths(self):
        c = self.cfg
        if c.data_source == "csv":
            return list(c.ohlcv_paths), list(c.lob_paths)
        ids = c.asset_ids
        return [self.path("data", f"{a}.csv") for a in ids], [self.path("data", f"{a}_lob.csv") for a in ids]

    def market(self) -> MarketData:
        ohlcv, lob = self.data_paths()
        for p in [*ohlcv, *lob]:
            if not Path(p).exists():
                hint = " (run gen-data first)" if self.cfg.data_source == "synthetic" else ""
                raise DataError(f"missing data file {p}{hint}")
        bars = [load_ohlcv(p) for p in ohlcv]
        books = [load_lob(p) for p in lob] if lob else None
        return MarketData(bars, books, self.cfg.steps_per_day if books else None)

    def episode_config(self, execution="simulator"):
        c = self.cfg
        return HierarchicalEpisodeConfig(
            holding_days=c.holding_days,
            trading_days=c.trading_days,
            window=c.window,
            horizon=c.horizon,
            commission=c.commission,
            initial_value=c.initial_value,
            exec_window=c.exec_window or None,
            execution=execution,
        )


def _train_end(cfg, n_days):
    return int(n_days * cfg.train_fraction)


def cmd_gen_data(run: Run):
    cfg = run.cfg
    if cfg.data_source != "synthetic":
        raise ConfigError("gen-data only applies to data_source = synthetic")
    run.claim()
    market = gen_synthetic_market(run.synthetic_config())
    run.path("data").mkdir(parents=True, exist_ok=True)
    ohlcv, lob = run.data_paths()
    for bars, books, p_bar, p_lob in zip(market.bars, market.books, ohlcv, lob):
        write_ohlcv(bars, p_bar)
        write_lob(books, p_lob)
    logger.info("wrote %d data files to %s", 2 * len(ohlcv), run.path("data"))


def cmd_pretrain(run: Run):
    cfg = run.cfg
    run.claim()
    market = run.market()
    if market.books is None:
        raise DataError("pre-training needs LOB data (lob_paths)")
    train = market.truncate(_train_end(cfg, market.n_days))
    pc = PretrainConfig(
        assets=tuple(train.asset_ids),
        q_max=cfg.q_max,
        t_max=cfg.t_max,
        episodes_per_cell=cfg.episodes_per_cell,
        quantity_lattice=cfg.quantity_lattice,
        train_steps=cfg.low_train_steps,
        eval_episodes=cfg.eval_episodes,
    )
    agent_params = dict(
        price_offsets=cfg.price_offsets,
        proportions=cfg.proportions,
        hidden=cfg.low_hidden,
        gamma=cfg.low_gamma,
        learning_rate=cfg.low_learning_rate,
        batch_size=cfg.low_batch_size,
        buffer_size=cfg.low_buffer_size,
        target_sync=cfg.low_target_sync,
        eps_decay_steps=cfg.eps_decay_steps or max(1, cfg.low_train_steps // 2),
        tick=cfg.tick,
        lob_window=cfg.lob_window,
        levels=cfg.levels,
    )
    bank = pretrain_low(
        train.bars,
        train.books,
        train.steps_per_day,
        pc,
        agent_params,
        seed=cfg.seed_for("pretrain"),
        commission=cfg.commission,
        shared=cfg.shared_policy,
        jobs=cfg.jobs,
    )
    bank.save(run.path("bank"))
    for meta in [run.path("bank", "stats.json"), *sorted(run.path("bank").glob("*.ckpt.json"))]:
        _stamp(meta, cfg.config_hash)
    run.path("logs").mkdir(exist_ok=True)
    records = [{"asset": a, "direction": d, **s} for (a, d), s in sorted(bank.stats.items())]
    write_jsonl(records, run.path("logs", "pretrain.jsonl"))


def _stamp(path, config_hash):
    data = json.loads(Path(path).read_text())
    data["config_hash"] = config_hash
    Path(path).write_text(json.dumps(data, sort_keys=True))


def _load_bank(run: Run, market):
    bank_dir = run.path("bank")
    bank = PolicyBank.load(bank_dir) if bank_dir.exists() else PolicyBank()
    missing = bank.missing(market.asset_ids)
    if missing:
        listing = ", ".join(f"{a}/{d}" for a, d in missing)
        raise DataError(f"policy bank incomplete; missing (asset, direction) pairs: {listing}")
    return bank


def cmd_train(run: Run):
    cfg = run.cfg
    run.claim()
    market = run.market()
    bank = _load_bank(run, market)
    ec = run.episode_config("simulator")
    train = market.truncate(_train_end(cfg, market.n_days))
    span = cfg.horizon * ec.period_days
    lob_window = max(bank.get(a, "buy").lob_window for a in train.asset_ids)
    first = ec.first_day(train.steps_per_day, lob_window)
    val_start = train.n_days - span
    if val_start - first < span:
        logger.warning("training range too short for a separate validation window; validating in-sample")
        val_start, train_end = first, train.n_days
    else:
        train_end = val_start
    policy = PortfolioPolicy(
        hidden=cfg.high_hidden,
        kappa=cfg.kappa,
        eta=cfg.eta,
        gamma=cfg.gamma,
        learning_rate=cfg.high_learning_rate,
        batch_size=cfg.high_batch_size,
        n_episodes=cfg.high_episodes,
        random_state=cfg.seed_for("high"),
    )
    result = train_high(policy, bank, train, ec, train_end=train_end, validation_start=val_start)
    save_high(policy, run.path("high.ckpt"), market.n_assets, cfg.window)
    _stamp(str(run.path("high.ckpt")) + ".json", cfg.config_hash)
    run.path("logs").mkdir(exist_ok=True)
    write_jsonl(result.curve, run.path("logs", "train_curve.jsonl"))


def _strategy_names(selector):
    names = STRATEGIES if selector == "all" else [selector]
    for name in names:
        if name not in STRATEGIES:
            raise ConfigError(f"unknown strategy {name!r}; choose from {', '.join(STRATEGIES)} or all")
    return names


def _strategies(run: Run, selector, market):
    names = _strategy_names(selector)
    cfg = run.cfg
    out = []
    for name in names:
        if name == "hrpm":
            if not run.path("high.ckpt").exists():
                raise DataError("no high.ckpt in the run directory (run train first)")
            policy, _ = load_high(run.path("high.ckpt"))
            out.append((name, policy, "simulator"))
        else:
            window = cfg.olmar_window if name == "olmar" else cfg.wmamr_window
            eps = cfg.olmar_epsilon if name == "olmar" else cfg.wmamr_epsilon
            strat = ev.BaselineStrategy(name, window=window, epsilon=eps, strict_loser=cfg.strict_loser)
            out.append((name, strat, cfg.baseline_execution))
    return out


def cmd_backtest(run: Run, selector):
    cfg = run.cfg
    _strategy_names(selector)
    run.claim()
    market = run.market()
    strategies = _strategies(run, selector, market)
    start = _train_end(cfg, market.n_days)
    bank = None
    if any(mode == "simulator" for _, _, mode in strategies):
        bank = _load_bank(run, market)
    for sub in ("reports", "curves", "logs"):
        run.path(sub).mkdir(parents=True, exist_ok=True)
    curves = {}
    for name, strat, mode in strategies:
        ec = run.episode_config(mode)
        n_periods = (market.n_days - start) // ec.period_days
        if n_periods < 1:
            raise DataError(f"backtest from day {start} exceeds the {market.n_days} days of data")
        curve, result = ev.run_backtest(strat, market, ec, start, bank=bank, n_periods=n_periods)
        curves[name] = curve
        row = ev.report_row(name, curve, mode, cfg.config_hash)
        run.path("reports", f"{name}.json").write_text(json.dumps(row, sort_keys=True) + "\n")
        ev.write_curve_csv(curve, run.path("curves", f"{name}.csv"))
        write_jsonl(result.ledger, run.path("logs", f"{name}_ledger.jsonl"))
        write_jsonl(result.fills, run.path("logs", f"{name}_fills.jsonl"))
    last = max(int(c.days[-1]) for c in curves.values())
    index = ev.index_proxy_curve(market, start - 1, last, cfg.initial_value)
    row = ev.report_row("index-proxy", index, "buy-and-hold", cfg.config_hash)
    run.path("reports", "index-proxy.json").write_text(json.dumps(row, sort_keys=True) + "\n")
    ev.write_curve_csv(index, run.path("curves", "index-proxy.csv"))
    existing = {p.stem: ev.read_curve_csv(p) for p in sorted(run.path("curves").glob("*.csv")) if p.stem != "long"}
    ev.write_long_csv(existing, run.path("curves", "long.csv"))


def cmd_report(root):
    root = Path(root)
    rows = []
    report_dir = root / "reports"
    if report_dir.exists():
        rows = [json.loads(p.read_text()) for p in sorted(report_dir.glob("*.json"))]
    rows = ev.sort_table(rows)
    text = ev.format_table(rows)
    print(text)
    if root.exists():
        (root / "report.json").write_text(ev.dumps_table(rows) + "\n")
        (root / "report.txt").write_text(text + "\n")
    return rows


def build_parser():
    parser = argparse.ArgumentParser(prog="hrtrade", description="Hierarchical portfolio management with order execution.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("gen-data", "pretrain", "train", "backtest", "report"):
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value run config")
        p.add_argument("--seed", type=int, help="root seed (overrides the config)")
        p.add_argument("--out", help="run directory (overrides the config)")
        p.add_argument("--jobs", type=int, help="worker processes for parallel stages")
        p.add_argument("--strategy", default="all", help="strategy name or 'all' (backtest)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def load_run_config(args) -> RunConfig:
    if args.seed is not None and args.seed < 0:
        raise ConfigError("--seed must be a non-negative integer")
    overrides = {"seed": args.seed, "out": args.out, "jobs": args.jobs}
    if args.config:
        return RunConfig.load(args.config, **overrides)
    if args.out and Path(args.out, CONFIG_NAME).exists():
        return RunConfig.load(Path(args.out, CONFIG_NAME), **overrides)
    return RunConfig.from_dict({k: v for k, v in overrides.items() if v is not None})


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            root = args.out or (load_run_config(args).out if args.config else "run")
            cmd_report(root)
            return EXIT_OK
        run = Run(load_run_config(args))
        if args.command == "gen-data":
            cmd_gen_data(run)
        elif args.command == "pretrain":
            cmd_pretrain(run)
        elif args.command == "train":
            cmd_train(run)
        else:
            cmd_backtest(run, args.strategy)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
