"""Bar and order-book data: loading, gap filling, synthetic generation and
normalized state windows for both decision levels."""
import csv
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

from . import _flatfile
from .exceptions import EmptyInputError, ParseError, ValidationError, WindowError

OHLCV_HEADER = ["day", "open", "high", "low", "close", "volume"]
LOB_HEADER = ["step", "side", "level", "price", "volume"]

OPEN, HIGH, LOW, CLOSE, VOLUME = range(5)


def _readonly(a):
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Bar:
    open: float
    high: float
    low: float
    close: float
    volume: float
    timestamp: int

    def __post_init__(self):
        _check_bar(self.open, self.high, self.low, self.close, self.volume)


def _check_bar(o, h, lo, c, v, line=None):
    where = f" (line {line})" if line is not None else ""
    if min(o, h, lo, c) <= 0:
        raise ValidationError(f"non-positive price{where}")
    if h < lo:
        raise ValidationError(f"high < low{where}")
    if lo > min(o, c) or h < max(o, c):
        raise ValidationError(f"open/close outside [low, high]{where}")
    if v < 0:
        raise ValidationError(f"negative volume{where}")


@dataclass(frozen=True)
class BarSeries:
    """Daily bars of one asset stored column-wise.

    ``data`` has shape ``(n, 5)`` with columns open, high, low, close, volume.
    """

    asset_id: str
    days: np.ndarray
    data: np.ndarray

    def __post_init__(self):
        days = np.asarray(self.days, dtype=np.int64)
        data = _readonly(self.data).reshape(-1, 5)
        if days.shape[0] != data.shape[0]:
            raise ValidationError("days and data length differ")
        if days.size and np.any(np.diff(days) <= 0):
            raise ValidationError("timestamps must be strictly increasing")
        days.setflags(write=False)
        object.__setattr__(self, "days", days)
        object.__setattr__(self, "data", data)

    def __len__(self):
        return self.days.shape[0]

    @property
    def close(self):
        return self.data[:, CLOSE]

    @property
    def bars(self) -> List[Bar]:
        return [Bar(*row[:5], timestamp=int(d)) for d, row in zip(self.days, self.data)]

    @classmethod
    def from_bars(cls, asset_id, bars: Sequence[Bar]):
        days = [b.timestamp for b in bars]
        data = [[b.open, b.high, b.low, b.close, b.volume] for b in bars]
        return cls(asset_id, np.array(days, dtype=np.int64), np.array(data).reshape(-1, 5))


def fill_gaps(series: BarSeries) -> BarSeries:
    """Insert flat zero-volume bars for missing days, carrying the close forward."""
    if len(series) < 2:
        return series
    days = series.days
    full = np.arange(days[0], days[-1] + 1)
    if full.shape[0] == days.shape[0]:
        return series
    data = np.empty((full.shape[0], 5))
    pos = np.searchsorted(days, full)
    present = np.isin(full, days)
    for j, d in enumerate(full):
        if present[j]:
            data[j] = series.data[pos[j]]
        else:
            c = data[j - 1, CLOSE]
            data[j] = (c, c, c, c, 0.0)
    return BarSeries(series.asset_id, full, data)


def load_ohlcv(path, asset_id=None) -> BarSeries:
    path = Path(path)
    if asset_id is None:
        asset_id = path.stem
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise EmptyInputError(f"{path} is empty")
        if [h.strip() for h in header] != OHLCV_HEADER:
            raise ParseError(f"expected header {','.join(OHLCV_HEADER)}", line=1)
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 6:
                raise ParseError(f"expected 6 fields, got {len(row)}", line=lineno)
            try:
                day = int(row[0])
                o, h, lo, c, v = (float(x) for x in row[1:])
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno) from None
            if day < 0:
                raise ParseError("day must be a non-negative integer", line=lineno)
            _check_bar(o, h, lo, c, v, line=lineno)
            rows.append((day, o, h, lo, c, v))
    if not rows:
        raise EmptyInputError(f"{path} has no data rows")
    rows.sort(key=lambda r: r[0])
    days = np.array([r[0] for r in rows], dtype=np.int64)
    if np.any(np.diff(days) == 0):
        raise ValidationError(f"{path}: duplicate day")
    data = np.array([r[1:] for r in rows], dtype=np.float64)
    return fill_gaps(BarSeries(asset_id, days, data))


def write_ohlcv(series: BarSeries, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(OHLCV_HEADER)
        for d, row in zip(series.days, series.data):
            w.writerow([int(d)] + [repr(float(x)) for x in row])


@dataclass(frozen=True)
class LobSnapshot:
    """One book snapshot; ``bids``/``asks`` are ``(levels, 2)`` arrays of
    (price, volume), best level first."""

    timestamp: int
    bids: np.ndarray
    asks: np.ndarray

    def __post_init__(self):
        bids = _readonly(self.bids).reshape(-1, 2)
        asks = _readonly(self.asks).reshape(-1, 2)
        if bids.shape[0] == 0 or asks.shape[0] == 0:
            raise ValidationError("both book sides need at least one level")
        if np.any(np.diff(bids[:, 0]) >= 0):
            raise ValidationError("bid prices must be strictly decreasing")
        if np.any(np.diff(asks[:, 0]) <= 0):
            raise ValidationError("ask prices must be strictly increasing")
        if bids[0, 0] >= asks[0, 0]:
            raise ValidationError("crossed book: best bid >= best ask")
        if np.any(bids[:, 0] <= 0):
            raise ValidationError("non-positive bid price")
        if np.any(bids[:, 1] <= 0) or np.any(asks[:, 1] <= 0):
            raise ValidationError("level volumes must be positive")
        object.__setattr__(self, "bids", bids)
        object.__setattr__(self, "asks", asks)

    @property
    def mid(self):
        return 0.5 * (self.bids[0, 0] + self.asks[0, 0])

    @property
    def total_volume(self):
        return float(self.bids[:, 1].sum() + self.asks[:, 1].sum())


def load_lob(path) -> List[LobSnapshot]:
    """Read a LOB CSV; missing steps repeat the previous snapshot."""
    per_step = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise EmptyInputError(f"{path} is empty")
        if [h.strip() for h in header] != LOB_HEADER:
            raise ParseError(f"expected header {','.join(LOB_HEADER)}", line=1)
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 5:
                raise ParseError(f"expected 5 fields, got {len(row)}", line=lineno)
            try:
                step, side, level = int(row[0]), row[1].strip(), int(row[2])
                price, vol = float(row[3]), float(row[4])
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno) from None
            if side not in ("B", "A"):
                raise ParseError(f"side must be B or A, got {side!r}", line=lineno)
            book = per_step.setdefault(step, {"B": {}, "A": {}})
            if level in book[side]:
                raise ParseError(f"duplicate level {level} on side {side}", line=lineno)
            book[side][level] = (price, vol)
    if not per_step:
        raise EmptyInputError(f"{path} has no data rows")

    def levels(d):
        return [d[i] for i in sorted(d)]

    steps = sorted(per_step)
    out = []
    prev = None
    for step in range(steps[0], steps[-1] + 1):
        if step in per_step:
            b = per_step[step]
            prev = LobSnapshot(step, levels(b["B"]), levels(b["A"]))
            out.append(prev)
        else:
            out.append(LobSnapshot(step, prev.bids, prev.asks))
    return out


def write_lob(snapshots: Sequence[LobSnapshot], path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOB_HEADER)
        for snap in snapshots:
            for side, arr in (("B", snap.bids), ("A", snap.asks)):
                for lvl, (p, v) in enumerate(arr):
                    w.writerow([snap.timestamp, side, lvl, repr(float(p)), repr(float(v))])


def make_feature_window(series_list: Sequence[BarSeries], t: int, k: int) -> np.ndarray:
    """Return the ``(M, k, 5)`` high-level feature tensor ending at row ``t``.

    Prices are divided by each asset's close on the window's first day and
    volumes by that day's volume (or by 1 when it is zero).
    """
    if k < 1 or t < k - 1:
        raise WindowError(f"window of {k} days needs t >= {k - 1}, got t={t}")
    out = np.empty((len(series_list), k, 5))
    for i, s in enumerate(series_list):
        if t >= len(s):
            raise WindowError(f"asset {s.asset_id} has only {len(s)} days")
        block = s.data[t - k + 1 : t + 1]
        first = block[0]
        vol0 = first[VOLUME] if first[VOLUME] != 0 else 1.0
        out[i, :, :4] = block[:, :4] / first[CLOSE]
        out[i, :, 4] = block[:, 4] / vol0
    return out


def make_lob_window(snapshots: Sequence[LobSnapshot], t: int, k: int, levels: int = None) -> np.ndarray:
    """Market part of the execution state: the ``k`` snapshots before step ``t``.

    Shape is ``(k, levels, 2, 2)`` indexed as [step, level, side (bid, ask),
    channel (price, volume)]. Prices are scaled by the first snapshot's mid
    and volumes by its total volume; absent levels are zero.
    """
    if k < 1 or t < k:
        raise WindowError(f"LOB window of {k} steps needs t >= {k}, got t={t}")
    if t > len(snapshots):
        raise WindowError(f"step {t} beyond stream of length {len(snapshots)}")
    window = snapshots[t - k : t]
    if levels is None:
        levels = max(max(s.bids.shape[0], s.asks.shape[0]) for s in window)
    mid0 = window[0].mid
    vol0 = window[0].total_volume
    out = np.zeros((k, levels, 2, 2))
    for j, snap in enumerate(window):
        for side, arr in enumerate((snap.bids, snap.asks)):
            n = min(levels, arr.shape[0])
            out[j, :n, side, 0] = arr[:n, 0] / mid0
            out[j, :n, side, 1] = arr[:n, 1] / vol0
    return out


def dense_books(snapshots: Sequence[LobSnapshot], levels: int) -> np.ndarray:
    """Stack raw snapshots into a ``(n, levels, 2, 2)`` array (absent levels zero)."""
    out = np.zeros((len(snapshots), levels, 2, 2))
    for j, snap in enumerate(snapshots):
        for side, arr in enumerate((snap.bids, snap.asks)):
            n = min(levels, arr.shape[0])
            out[j, :n, side] = arr[:n]
    return out


def lob_window_from_dense(dense: np.ndarray, t: int, k: int, total_volume=None) -> np.ndarray:
    """Same result as :func:`make_lob_window` on a :func:`dense_books` array.

    ``total_volume`` holds each snapshot's full-depth volume; it is needed
    when the books are deeper than the dense array.
    """
    if k < 1 or t < k or t > dense.shape[0]:
        raise WindowError(f"LOB window of {k} steps cannot end at step {t}")
    window = dense[t - k : t].copy()
    first = window[0]
    mid0 = 0.5 * (first[0, 0, 0] + first[0, 1, 0])
    if total_volume is None:
        vol0 = first[:, 0, 1].sum() + first[:, 1, 1].sum()
    else:
        vol0 = total_volume[t - k]
    window[..., 0] /= mid0
    window[..., 1] /= vol0
    return window


def _as_tuple(value, n, name):
    if np.isscalar(value):
        return (float(value),) * n
    value = tuple(float(v) for v in value)
    if len(value) == 1:
        return value * n
    if len(value) != n:
        raise ValidationError(f"{name} needs 1 or {n} entries, got {len(value)}")
    return value


@dataclass(frozen=True)
class SyntheticMarketConfig:
    """Parameters of the synthetic market generator.

    ``drift`` and ``volatility`` are per-day parameters of the log-price
    (scalar or one per asset); ``level_spacing`` is the tick distance between
    adjacent book levels in currency units. The generator is numpy's PCG64.
    """

    n_assets: int = 2
    n_days: int = 120
    steps_per_day: int = 20
    seed: int = 0
    drift: Tuple[float, ...] = (0.0,)
    volatility: Tuple[float, ...] = (0.01,)
    depth: int = 5
    level_spacing: float = 0.05
    base_volume: float = 500.0
    initial_price: float = 100.0
    rng: str = "pcg64"

    def __post_init__(self):
        if self.n_assets < 1:
            raise ValidationError("n_assets must be >= 1")
        if self.n_days < 1:
            raise ValidationError("n_days must be >= 1")
        if self.steps_per_day < 2:
            raise ValidationError("steps_per_day must be >= 2")
        if self.depth < 1:
            raise ValidationError("depth must be >= 1")
        if self.level_spacing <= 0 or self.base_volume <= 0 or self.initial_price <= 0:
            raise ValidationError("level_spacing, base_volume and initial_price must be > 0")
        if self.rng != "pcg64":
            raise ValidationError(f"unsupported generator {self.rng!r}")
        object.__setattr__(self, "drift", _as_tuple(self.drift, self.n_assets, "drift"))
        vol = _as_tuple(self.volatility, self.n_assets, "volatility")
        if min(vol) < 0:
            raise ValidationError("volatility must be >= 0")
        object.__setattr__(self, "volatility", vol)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, mapping):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(mapping) - names
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**mapping)

    def save(self, path):
        _flatfile.dump(self.to_dict(), path)

    @classmethod
    def load(cls, path):
        return cls.from_dict(_flatfile.load(path))


@dataclass(frozen=True)
class SyntheticMarket:
    """Generated daily bars and per-asset snapshot streams.

    Snapshot ``d * steps_per_day + s`` is intra-day step ``s`` of day ``d``;
    its last step of a day sits at that day's close.
    """

    config: SyntheticMarketConfig
    bars: List[BarSeries]
    books: List[List[LobSnapshot]] = field(repr=False)

    def __iter__(self):
        return iter((self.bars, self.books))


def _book_around(mid, step, spacing, volumes):
    depth = volumes.shape[1]
    offsets = spacing * (0.5 + np.arange(depth))
    bid_p = mid - offsets
    keep = bid_p > 0
    bids = np.column_stack([bid_p[keep], volumes[0][keep]])
    asks = np.column_stack([mid + offsets, volumes[1]])
    return LobSnapshot(step, bids, asks)


def gen_synthetic_market(config: SyntheticMarketConfig) -> SyntheticMarket:
    """Geometric Brownian daily closes with a Brownian-bridge intra-day mid
    and a parametric book of ``depth`` levels per side around it."""
    rng = np.random.Generator(np.random.PCG64(config.seed))
    n_days, S, L = config.n_days, config.steps_per_day, config.depth
    u = np.arange(S) / (S - 1)
    bars, books = [], []
    for i in range(config.n_assets):
        mu, sigma = config.drift[i], config.volatility[i]
        log_ret = mu + sigma * rng.standard_normal(n_days)
        closes = config.initial_price * np.exp(np.cumsum(log_ret))
        opens = np.concatenate([[config.initial_price], closes[:-1]])
        incr = rng.standard_normal((n_days, S - 1)) * sigma / np.sqrt(S - 1)
        walk = np.concatenate([np.zeros((n_days, 1)), np.cumsum(incr, axis=1)], axis=1)
        bridge = walk - u * walk[:, -1:]
        mids = opens[:, None] * np.exp(u * np.log(closes / opens)[:, None] + bridge)
        # endpoints exactly at open/close
        mids[:, 0] = opens
        mids[:, -1] = closes
        level_vol = config.base_volume * rng.uniform(0.5, 1.5, size=(n_days, S, 2, L))
        day_vol = config.base_volume * S * rng.uniform(0.5, 1.5, size=n_days)
        data = np.column_stack([mids[:, 0], mids.max(axis=1), mids.min(axis=1), mids[:, -1], day_vol])
        bars.append(BarSeries(f"asset{i}", np.arange(n_days), data))
        stream = []
        for d in range(n_days):
            for s in range(S):
                stream.append(_book_around(mids[d, s], d * S + s, config.level_spacing, level_vol[d, s]))
        books.append(stream)
    return SyntheticMarket(config, bars, books)
