import math
from collections import Counter

import numpy as np
import pytest

from hrtrade.exceptions import StreamError, TrainingDivergenceError
from hrtrade.high_level import HighState, HighTrajectory, PortfolioPolicy, entropy
from hrtrade.market_data import SyntheticMarketConfig, gen_synthetic_market
from hrtrade.training import (
    HierarchicalEpisodeConfig,
    MarketData,
    PolicyBank,
    PretrainConfig,
    iterate_tasks,
    load_high,
    pretrain_low,
    run_hierarchical_episode,
    run_periods,
    save_high,
    train_high,
)

AGENT = dict(hidden=(8,), lob_window=2, levels=3, batch_size=8, tick=0.05)


def _market(n_assets=2, n_days=40, vol=0.01, drift=0.0, seed=0, steps=4):
    cfg = SyntheticMarketConfig(n_assets=n_assets, n_days=n_days, steps_per_day=steps, volatility=vol, drift=drift, seed=seed)
    return MarketData.from_synthetic(gen_synthetic_market(cfg))


def _tiny_bank(market, seed=0):
    cfg = PretrainConfig(assets=tuple(market.asset_ids), q_max=200.0, t_max=4, quantity_lattice=3, train_steps=40, eval_episodes=3)
    return pretrain_low(market.bars, market.books, market.steps_per_day, cfg, AGENT, seed=seed)


def test_iterate_tasks_cycle():
    cfg = PretrainConfig(q_max=300.0, t_max=3, quantity_lattice=4)
    stream = iterate_tasks(cfg, np.random.default_rng(0))
    first = [next(stream) for _ in range(12)]
    cells = {(t.quantity, t.window) for t in first}
    assert len(cells) == 12
    for t in first:
        assert 0 <= t.quantity <= cfg.q_max and 1 <= t.window <= cfg.t_max
    more = Counter((t.quantity, t.window) for t in (next(stream) for _ in range(12 * 7)))
    assert set(more.values()) == {7}


def test_quantity_lattice_has_zero_and_max():
    q = PretrainConfig(q_max=800.0, quantity_lattice=9).quantities
    assert q[0] == 0.0 and q[-1] == 800.0 and len(q) == 9


def test_pretrain_bank_size_and_determinism(tmp_path):
    market = _market(n_assets=1)
    bank = _tiny_bank(market)
    assert len(bank) == 2 and bank.missing(market.asset_ids) == []
    assert {"agent_cost", "market_order_cost", "converged"} <= set(bank.stats[("asset0", "sell")])
    bank.save(tmp_path / "a")
    _tiny_bank(market).save(tmp_path / "b")
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == sorted(p.name for p in (tmp_path / "b").iterdir())
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    loaded = PolicyBank.load(tmp_path / "a")
    assert loaded.get("asset0", "buy").net_.mlp == bank.get("asset0", "buy").net_.mlp


def test_no_op_policy_is_buy_and_hold():
    market = _market()
    cfg = HierarchicalEpisodeConfig(window=3, horizon=4)
    bank = PolicyBank.market_orders(market.asset_ids)
    target = np.array([0.2, 0.5, 0.3])

    def decide(state, day):
        return (target if day == 5 else state.weights), 0.0

    res = run_periods(decide, bank, market, cfg, start_day=5)
    assert all(rec["c_com"] == 0.0 and rec["c_slippage"] == 0.0 for rec in res.ledger[1:])
    assert {f["t"] for f in res.fills} == {0}
    first = res.ledger[0]
    p_settle = market.prices(5)
    p_end = market.prices(res.days[-1])
    expected = first["v_after"] * float(np.sum(np.asarray(first["weights"]) * p_end / p_settle))
    assert res.values[-1] == pytest.approx(expected, rel=1e-12)


def test_all_cash_on_flat_market_keeps_value():
    market = _market(vol=0.0)
    cfg = HierarchicalEpisodeConfig(window=3, horizon=4)
    bank = PolicyBank.market_orders(market.asset_ids)
    res = run_periods(lambda s, d: (np.array([1.0, 0.0, 0.0]), 0.0), bank, market, cfg, start_day=5)
    assert all(v == cfg.initial_value for v in res.values)
    assert res.trajectory.rewards == [0.0] * 4
    assert res.fills == []


def _replay(res, market, v0, lam):
    """Explicit cash and share book rebuilt from the fill log."""
    cash, shares = v0, np.zeros(market.n_assets)
    ids = market.asset_ids
    by_period = {}
    for f in res.fills:
        by_period.setdefault(f["t"], []).append(f)
    out = []
    for rec in res.ledger:
        for f in by_period.get(rec["t"], []):
            sign = 1.0 if f["direction"] == "buy" else -1.0
            cash -= sign * f["quantity"] * f["price"] + lam * f["quantity"] * f["price"]
            shares[ids.index(f["asset"])] += sign * f["quantity"]
        out.append((cash, shares.copy()))
    return out


@pytest.mark.parametrize("seed", range(6))
def test_simulated_episode_matches_cash_ledger(seed):
    market = _market(seed=seed)
    cfg = HierarchicalEpisodeConfig(window=3, horizon=2 if seed == 0 else 5)
    bank = PolicyBank.market_orders(market.asset_ids)
    rng = np.random.default_rng(seed)

    def decide(state, day):
        w = rng.dirichlet(np.ones(3))
        return 0.2 * np.eye(3)[0] + 0.8 * w, 0.0

    res = run_periods(decide, bank, market, cfg, start_day=5)
    assert res.scaled_buys == 0
    books = _replay(res, market, cfg.initial_value, cfg.commission)
    for (cash, shares), rec in zip(books, res.ledger):
        settle_day = 5 + rec["t"] * cfg.period_days
        value = cash + float(shares @ market.closes[settle_day])
        assert abs(value - rec["v_after"]) < 1e-8 * cfg.initial_value


def test_timescale_audit():
    market = _market()
    cfg = HierarchicalEpisodeConfig(window=3, horizon=5)
    bank = PolicyBank.market_orders(market.asset_ids)
    policy = PortfolioPolicy(hidden=(4,), random_state=0).initialize(2 * 3 * 5 + 3, 3)
    res = run_hierarchical_episode(policy, bank, market, cfg, start_day=5)
    assert len(res.trajectory) == 5 and len(res.low_actions) == 5
    window = cfg.steps_in_window(market.steps_per_day)
    assert all(n <= window for audit in res.low_actions for n in audit.values())
    assert {f["step"] for f in res.fills} <= set(range(window))


def test_episode_range_errors():
    market = _market(n_days=20)
    cfg = HierarchicalEpisodeConfig(window=3, horizon=4, execution="ideal")
    with pytest.raises(StreamError):
        run_periods(lambda s, d: (s.weights, 0.0), None, market, cfg, start_day=2)
    with pytest.raises(StreamError):
        run_periods(lambda s, d: (s.weights, 0.0), None, market, cfg, start_day=5, n_periods=3)


def test_zero_learning_rate_keeps_initialization():
    market = _market()
    cfg = HierarchicalEpisodeConfig(window=3, horizon=2, execution="ideal")
    policy = PortfolioPolicy(hidden=(4,), learning_rate=0.0, batch_size=2, n_episodes=4, random_state=0)
    policy.initialize(2 * 3 * 5 + 3, 3)
    before = policy.net_.get_flat()
    train_high(policy, None, market, cfg)
    assert np.array_equal(policy.net_.get_flat(), before)


def test_bank_is_frozen_during_high_training(tmp_path):
    market = _market(n_assets=1, n_days=40)
    bank = _tiny_bank(market)
    before = {k: a.net_.mlp.get_flat() for k, a in bank.policies.items()}
    cfg = HierarchicalEpisodeConfig(window=3, horizon=2)
    policy = PortfolioPolicy(hidden=(4,), batch_size=2, n_episodes=4, random_state=0)
    result = train_high(policy, bank, market, cfg, train_end=30, validation_start=30)
    for k, a in bank.policies.items():
        assert np.array_equal(a.net_.mlp.get_flat(), before[k])
    assert len(result.curve) == 2 and "validation_return" in result.curve[0]
    save_high(policy, tmp_path / "high.ckpt", 1, 3)
    back, meta = load_high(tmp_path / "high.ckpt")
    assert meta["M"] == 1 and meta["k"] == 3
    assert np.array_equal(back.net_.get_flat(), policy.net_.get_flat())


def test_divergence_halts_training(monkeypatch):
    market = _market()
    cfg = HierarchicalEpisodeConfig(window=3, horizon=2, execution="ideal")
    policy = PortfolioPolicy(hidden=(4,), batch_size=2, n_episodes=4, random_state=0)

    def broken_update(batch):
        policy.last_loss_ = float("nan")
        return True

    policy.initialize(2 * 3 * 5 + 3, 3)
    monkeypatch.setattr(policy, "update", broken_update)
    with pytest.raises(TrainingDivergenceError):
        train_high(policy, None, market, cfg)


def test_bandit_learning_curve_rises():
    """Windowed mean return never drops by more than three standard errors."""
    state = HighState(np.ones((1, 1, 5)), np.array([0.5, 0.5]))
    returns = []

    def rollout(pol, rng):
        w, lp = pol.act(state)
        tr = HighTrajectory()
        tr.append(state, w, lp, w[1], entropy(w))
        returns.append(w[1])
        return tr

    policy = PortfolioPolicy(hidden=(16,), eta=0.0, gamma=1.0, learning_rate=0.01, batch_size=10, n_episodes=2000, random_state=0)
    policy.fit(rollout, n_inputs=state.vector().size, n_weights=2)
    windows = np.asarray(returns).reshape(-1, 50)
    means = windows.mean(axis=1)
    se = windows.std(axis=1, ddof=1) / math.sqrt(50)
    drops = means[:-1] - means[1:]
    assert np.all(drops <= 3 * np.hypot(se[:-1], se[1:]) + 1e-12)
    assert means[-1] > means[0] + 0.3
