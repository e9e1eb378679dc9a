"""Historical return ingestion and stationary block bootstrap resampling.

Resampled paths are built from contiguous blocks of the source series whose
lengths are geometric with a configurable mean, drawn with replacement and
circular wrap-around.  Stock and bond returns are always sampled as pairs, so
contemporaneous cross-correlation is preserved.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .market import PathSet, _BLOCK, _block_rng


class DataError(ValueError):
    """Raised for malformed or inconsistent input data."""


@dataclass(frozen=True)
class ReturnSeries:
    """Monthly gross real returns for the stock/bond pair."""

    dates: tuple[str, ...]
    stock_gross: np.ndarray
    bond_gross: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.stock_gross, dtype=np.float64)
        b = np.asarray(self.bond_gross, dtype=np.float64)
        if len(self.dates) != len(s) or len(s) != len(b):
            raise DataError("dates, stock_gross and bond_gross must have equal length")
        for arr, name in ((s, "stock"), (b, "bond")):
            if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
                bad = int(np.argmin((arr > 0) & np.isfinite(arr)))
                raise DataError(f"nonpositive or non-finite {name} gross return at row {bad}")
        for k in range(1, len(self.dates)):
            if not self.dates[k - 1] < self.dates[k]:
                raise DataError(f"dates not strictly increasing at row {k}: "
                                f"{self.dates[k - 1]!r} then {self.dates[k]!r}")
        s.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "stock_gross", s)
        object.__setattr__(self, "bond_gross", b)

    def __len__(self) -> int:
        return len(self.dates)


@dataclass(frozen=True)
class BootstrapConfig:
    expected_block_months: float
    n_paths: int
    n_rebalances: int
    periods_per_rebalance: int = 12   # 12 for annual rebalancing of monthly data
    seed: int = 0

    def __post_init__(self):
        if self.expected_block_months < 1:
            raise DataError(f"expected_block_months must be >= 1, got {self.expected_block_months}")
        if self.n_paths <= 0 or self.n_rebalances <= 0 or self.periods_per_rebalance <= 0:
            raise DataError("n_paths, n_rebalances and periods_per_rebalance must be positive")


def load_series(path) -> ReturnSeries:
    """Load a monthly return CSV.

    Accepted headers: ``date,stock_gross,bond_gross`` or
    ``date,stock_return,bond_return`` (net returns, converted to gross).
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip().lower() for h in header]
        if header == ["date", "stock_gross", "bond_gross"]:
            net = False
        elif header == ["date", "stock_return", "bond_return"]:
            net = True
        else:
            raise DataError(f"{path}: unrecognized header {header}")
        dates, stock, bond = [], [], []
        for k, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != 3:
                raise DataError(f"{path}: malformed row {k}: {row!r}")
            try:
                s, b = float(row[1]), float(row[2])
            except ValueError:
                raise DataError(f"{path}: non-numeric value at row {k}: {row!r}") from None
            dates.append(row[0].strip())
            stock.append(s + 1.0 if net else s)
            bond.append(b + 1.0 if net else b)
    try:
        return ReturnSeries(tuple(dates), np.array(stock), np.array(bond))
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from None


def sample_block_indices(n_source: int, n_months: int, v: float,
                         rng: np.random.Generator, n_rows: int) -> np.ndarray:
    """Source-month indices for ``n_rows`` resampled sequences of ``n_months``.

    Blocks start uniformly at random, wrap circularly, and have geometric
    length Pr(b=k) = (1-v)^(k-1) v.  A fresh start and length are drawn for
    each block; sequences are truncated to exactly ``n_months``.
    """
    # A sequence never needs more blocks than months (each block has length >= 1).
    max_blocks = n_months
    starts = rng.integers(0, n_source, size=(n_rows, max_blocks))
    lengths = rng.geometric(v, size=(n_rows, max_blocks))
    ends = np.cumsum(lengths, axis=1)
    begins = ends - lengths
    capped = np.clip(n_months - begins, 0, lengths)
    flat = capped.ravel()
    used = flat > 0
    reps = flat[used]
    block_starts = starts.ravel()[used]
    total = int(reps.sum())
    head = np.cumsum(reps) - reps
    offsets = np.arange(total) - np.repeat(head, reps)
    src = (np.repeat(block_starts, reps) + offsets) % n_source
    return src.reshape(n_rows, n_months)


def stationary_block_bootstrap(series: ReturnSeries, config: BootstrapConfig) -> PathSet:
    """Resample the series into per-rebalance gross-return paths.

    Monthly gross returns are drawn as stock/bond pairs (identical indices)
    and compounded in consecutive groups of ``periods_per_rebalance``.
    """
    n_source = len(series)
    if n_source < 12:
        raise DataError(f"series too short for bootstrapping: {n_source} months")
    v = 1.0 / config.expected_block_months
    months = config.periods_per_rebalance * config.n_rebalances
    out = np.empty((config.n_paths, config.n_rebalances, 2))
    done = 0
    while done < config.n_paths:
        block = done // _BLOCK
        count = min(_BLOCK, config.n_paths - done)
        rng = _block_rng(config.seed, block)
        # Always sample a full block so path j depends only on (seed, j).
        idx = sample_block_indices(n_source, months, v, rng, _BLOCK)[:count]
        shape = (count, config.n_rebalances, config.periods_per_rebalance)
        out[done:done + count, :, 0] = series.stock_gross[idx].reshape(shape).prod(axis=2)
        out[done:done + count, :, 1] = series.bond_gross[idx].reshape(shape).prod(axis=2)
        done += count
    return PathSet(out, source_tag="bootstrap",
                   dt=config.periods_per_rebalance / 12.0, seed=config.seed)
