import json

import numpy as np
import pytest

from hrtrade.cli import main
from hrtrade.config import RunConfig, derive_seed
from hrtrade.exceptions import ConfigError
from hrtrade.market_data import load_lob, load_ohlcv

TINY = {
    "n_assets": 1,
    "n_days": 40,
    "steps_per_day": 4,
    "lob_window": 2,
    "levels": 3,
    "depth": 3,
    "low_hidden": [8],
    "low_train_steps": 60,
    "low_batch_size": 8,
    "quantity_lattice": 3,
    "t_max": 4,
    "eval_episodes": 3,
    "high_hidden": [4],
    "high_episodes": 4,
    "high_batch_size": 2,
    "window": 3,
    "holding_days": 2,
    "horizon": 2,
}


def _write_cfg(path, **items):
    lines = []
    for k, v in items.items():
        lines.append(f"{k} = {json.dumps(v)}")
    path.write_text("\n".join(lines) + "\n")
    return path


def test_unknown_key_rejected():
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"bogus": 1})


def test_type_and_range_checks():
    with pytest.raises(ConfigError):
        RunConfig(seed="x")
    with pytest.raises(ConfigError):
        RunConfig(commission=1.5)
    with pytest.raises(ConfigError):
        RunConfig(data_source="csv")


def test_hash_ignores_output_and_workers():
    base = RunConfig()
    assert base.replace(out="elsewhere", jobs=4).config_hash == base.config_hash
    assert base.replace(seed=1).config_hash != base.config_hash


def test_seed_split_is_stable_and_distinct():
    assert derive_seed(0, "market") == derive_seed(0, "market")
    assert len({derive_seed(0, label) for label in ("market", "pretrain", "high")}) == 3
    assert derive_seed(0, "market") != derive_seed(1, "market")


def test_config_file_round_trip(tmp_path):
    cfg = RunConfig(**{**TINY, "out": str(tmp_path / "r")})
    cfg.save(tmp_path / "c.cfg")
    assert RunConfig.load(tmp_path / "c.cfg") == cfg


def test_gen_data_minimal(tmp_path):
    cfg = _write_cfg(tmp_path / "c.cfg", **TINY, out=str(tmp_path / "r"))
    assert main(["gen-data", "--config", str(cfg)]) == 0
    files = sorted(p.name for p in (tmp_path / "r" / "data").iterdir())
    assert files == ["asset0.csv", "asset0_lob.csv"]
    first = {p.name: p.read_bytes() for p in (tmp_path / "r" / "data").iterdir()}
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "r2")]) == 0
    for name, data in first.items():
        assert (tmp_path / "r2" / "data" / name).read_bytes() == data
    bars = load_ohlcv(tmp_path / "r" / "data" / "asset0.csv")
    books = load_lob(tmp_path / "r" / "data" / "asset0_lob.csv")
    assert len(bars) == 40 and len(books) == 160


def test_hash_mismatch_refused(tmp_path):
    out = str(tmp_path / "r")
    assert main(["gen-data", "--config", str(_write_cfg(tmp_path / "a.cfg", **TINY, out=out))]) == 0
    assert main(["gen-data", "--config", str(_write_cfg(tmp_path / "b.cfg", **TINY, out=out, seed=3))]) == 2


def test_exit_codes(tmp_path, capsys):
    assert main(["gen-data", "--config", str(_write_cfg(tmp_path / "u.cfg", bogus=1))]) == 2
    cfg = _write_cfg(tmp_path / "c.cfg", **TINY, out=str(tmp_path / "r"))
    assert main(["pretrain", "--config", str(cfg)]) == 3
    assert "gen-data" in capsys.readouterr().err
    assert main(["backtest", "--config", str(cfg), "--strategy", "nope"]) == 2
    assert main(["train", "--config", str(cfg), "--seed", "-1"]) == 2


def test_report_on_empty_directory(tmp_path, capsys):
    assert main(["report", "--out", str(tmp_path / "missing")]) == 0
    out = capsys.readouterr().out.strip().splitlines()
    assert len(out) == 1 and out[0].startswith("strategy")


def test_pipeline_artifacts(tmp_path, capsys):
    out = tmp_path / "r"
    cfg = _write_cfg(tmp_path / "c.cfg", **TINY, out=str(out))
    for cmd in ("gen-data", "pretrain", "train"):
        assert main([cmd, "--config", str(cfg)]) == 0
    assert main(["backtest", "--config", str(cfg), "--strategy", "ucrp"]) == 0
    capsys.readouterr()
    assert main(["report", "--out", str(out)]) == 0
    rows = json.loads((out / "report.json").read_text())
    assert {r["strategy"] for r in rows} == {"ucrp", "index-proxy"}
    assert main(["backtest", "--config", str(cfg)]) == 0
    capsys.readouterr()
    assert main(["report", "--out", str(out)]) == 0
    rows = json.loads((out / "report.json").read_text())
    assert len(rows) == 7
    arrs = [r["ARR"] for r in rows]
    assert arrs == sorted(arrs, reverse=True)
    h = RunConfig.load(cfg).config_hash
    assert all(r["config_hash"] == h for r in rows)
    assert json.loads((out / "bank" / "stats.json").read_text())["config_hash"] == h
    assert json.loads((out / "high.ckpt.json").read_text())["config_hash"] == h
    assert json.loads((out / "run.json").read_text())["config_hash"] == h
    for name in ("pretrain.jsonl", "train_curve.jsonl", "hrpm_ledger.jsonl", "hrpm_fills.jsonl"):
        assert (out / "logs" / name).exists()
    long_rows = (out / "curves" / "long.csv").read_text().splitlines()
    assert long_rows[0] == "strategy,day,value" and len(long_rows) > 7
    fills = [json.loads(line) for line in (out / "logs" / "hrpm_fills.jsonl").read_text().splitlines()]
    assert all(np.isfinite(f["price"]) for f in fills)


def test_train_without_bank_lists_missing_pairs(tmp_path, capsys):
    cfg = _write_cfg(tmp_path / "c.cfg", **TINY, out=str(tmp_path / "r"))
    assert main(["gen-data", "--config", str(cfg)]) == 0
    assert main(["train", "--config", str(cfg)]) == 3
    err = capsys.readouterr().err
    assert "asset0/buy" in err and "asset0/sell" in err
