"""Correlated double-exponential jump-diffusion market and path containers.

Each asset follows a geometric jump diffusion whose log jump sizes are
two-sided exponential (upward rate eta1, downward rate eta2, up-probability
u_up).  Between rebalances the coefficients are constant, so one-period gross
returns can be sampled exactly: no Euler substepping is used anywhere.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

# Paths are generated in fixed-size blocks, each with its own counter-based
# Philox stream keyed by (seed, block index).  Path j therefore depends only
# on (seed, j), never on how work is scheduled.
_BLOCK = 16384

_MAGIC = b"DPTH"
_FILE_VERSION = 1
# magic(4) + version(u32) + n_paths(u64) + n_periods(u32) + n_assets(u32)
_HEADER = struct.Struct("<4sIQII")


class PathFileError(ValueError):
    """Raised for malformed or inconsistent path files."""


@dataclass(frozen=True)
class AssetJumpParams:
    """Annualized jump-diffusion parameters for one asset."""

    mu: float        # drift per year
    sigma: float     # volatility per sqrt(year)
    lam: float       # jump intensity per year
    u_up: float      # probability a jump is upward
    eta1: float      # upward log-jump rate (> 1 for a finite compensator)
    eta2: float      # downward log-jump rate (> 0)

    def __post_init__(self):
        # sigma == 0 is allowed so degenerate drift-only processes can be
        # expressed in tests; real calibrations always have sigma > 0.
        if self.sigma < 0:
            raise ValueError(f"sigma must be nonnegative, got {self.sigma}")
        if self.lam < 0:
            raise ValueError(f"lam must be nonnegative, got {self.lam}")
        if not 0 <= self.u_up <= 1:
            raise ValueError(f"u_up must lie in [0, 1], got {self.u_up}")
        if self.eta1 <= 1:
            raise ValueError(f"eta1 must exceed 1, got {self.eta1}")
        if self.eta2 <= 0:
            raise ValueError(f"eta2 must be positive, got {self.eta2}")


@dataclass(frozen=True)
class MarketParams:
    """Two-asset market: stock and bond processes plus diffusion correlation."""

    stock: AssetJumpParams
    bond: AssetJumpParams
    rho_sb: float
    borrow_spread: float = 0.0   # extra drift on negative (borrowed) wealth

    def __post_init__(self):
        if abs(self.rho_sb) > 1:
            raise ValueError(f"|rho_sb| must not exceed 1, got {self.rho_sb}")
        if self.borrow_spread < 0:
            raise ValueError(f"borrow_spread must be nonnegative, got {self.borrow_spread}")

    def to_dict(self) -> dict:
        return {
            "stock": vars(self.stock).copy(),
            "bond": vars(self.bond).copy(),
            "rho_sb": self.rho_sb,
            "borrow_spread": self.borrow_spread,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MarketParams":
        return cls(
            stock=AssetJumpParams(**d["stock"]),
            bond=AssetJumpParams(**d["bond"]),
            rho_sb=d["rho_sb"],
            borrow_spread=d.get("borrow_spread", 0.0),
        )


# Annualized real-return calibration: value-weighted CRSP stock index and
# 10-year US Treasury index, 1926-2019, CPI deflated.
CRSP_MARKET = MarketParams(
    stock=AssetJumpParams(mu=0.0877, sigma=0.1459, lam=0.3191,
                          u_up=0.2333, eta1=4.3608, eta2=5.504),
    bond=AssetJumpParams(mu=0.0239, sigma=0.0538, lam=0.3830,
                         u_up=0.6111, eta1=16.19, eta2=17.27),
    rho_sb=0.04554,
    borrow_spread=0.0,
)


@dataclass(frozen=True)
class PathSet:
    """Per-period gross real returns for both assets on N sampled paths.

    ``gross_returns`` has shape (n_paths, n_periods, 2) with stock at index 0
    and bond at index 1.  The array is made read-only so a PathSet can be
    shared freely.
    """

    gross_returns: np.ndarray
    source_tag: str = "synthetic"
    dt: float = 1.0
    seed: int | None = field(default=None, compare=False)

    def __post_init__(self):
        arr = np.ascontiguousarray(self.gross_returns, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != 2:
            raise ValueError(f"gross_returns must have shape (n_paths, n_periods, 2), got {arr.shape}")
        if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
            raise ValueError("gross returns must be finite and strictly positive")
        arr.setflags(write=False)
        object.__setattr__(self, "gross_returns", arr)

    @property
    def n_paths(self) -> int:
        return self.gross_returns.shape[0]

    @property
    def n_periods(self) -> int:
        return self.gross_returns.shape[1]

    @property
    def stock(self) -> np.ndarray:
        return self.gross_returns[:, :, 0]

    @property
    def bond(self) -> np.ndarray:
        return self.gross_returns[:, :, 1]


def jump_compensator(p: AssetJumpParams) -> float:
    """E[xi - 1] for one jump: u*eta1/(eta1-1) + (1-u)*eta2/(eta2+1) - 1."""
    if p.eta1 <= 1:
        raise ValueError(f"eta1 must exceed 1 for a finite compensator, got {p.eta1}")
    return p.u_up * p.eta1 / (p.eta1 - 1.0) + (1.0 - p.u_up) * p.eta2 / (p.eta2 + 1.0) - 1.0


def _jump_log_sums(p: AssetJumpParams, dt: float, rng: np.random.Generator,
                   shape: tuple[int, ...]) -> np.ndarray:
    """Sum of log jump sizes over one period of length dt, per cell of shape."""
    counts = rng.poisson(p.lam * dt, size=shape)
    total = int(counts.sum())
    if total == 0:
        return np.zeros(shape)
    up = rng.random(total) < p.u_up
    mag = rng.standard_exponential(total)
    logs = np.where(up, mag / p.eta1, -mag / p.eta2)
    idx = np.repeat(np.arange(counts.size), counts.ravel())
    out = np.bincount(idx, weights=logs, minlength=counts.size)
    return out.reshape(shape)


def sample_period_return(p: AssetJumpParams, dt: float, z: np.ndarray,
                         rng: np.random.Generator) -> np.ndarray:
    """Exact one-period gross return given standard-normal draws ``z``.

    The diffusion shock is supplied by the caller (so cross-asset correlation
    stays under the caller's control); the jump part is drawn from ``rng``.
    """
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    z = np.asarray(z, dtype=np.float64)
    drift = (p.mu - p.lam * jump_compensator(p) - 0.5 * p.sigma**2) * dt
    log_ret = drift + p.sigma * np.sqrt(dt) * z + _jump_log_sums(p, dt, rng, z.shape)
    return np.exp(log_ret)


def _block_rng(seed: int, block: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[np.uint64(seed), np.uint64(block)]))


def simulate_paths(m: MarketParams, n_paths: int, n_periods: int, dt: float,
                   seed: int, path_offset: int = 0) -> PathSet:
    """Simulate correlated gross-return paths, one exact step per period.

    ``path_offset`` selects a window into the infinite path sequence defined
    by ``seed``: paths [offset, offset + n_paths) are identical to the same
    slice of a single larger run, which lets huge path sets be processed in
    chunks without holding them all in memory.
    """
    if n_paths <= 0:
        raise ValueError(f"n_paths must be positive, got {n_paths}")
    if n_periods <= 0:
        raise ValueError(f"n_periods must be positive, got {n_periods}")
    if path_offset % _BLOCK:
        raise ValueError(f"path_offset must be a multiple of {_BLOCK}")
    rho = m.rho_sb
    out = np.empty((n_paths, n_periods, 2))
    first_block = path_offset // _BLOCK
    done = 0
    while done < n_paths:
        block = first_block + done // _BLOCK
        count = min(_BLOCK, n_paths - done)
        rng = _block_rng(seed, block)
        # Draw a full block's worth so stream consumption per block is fixed.
        z = rng.standard_normal((_BLOCK, n_periods, 2))
        z_s = z[:, :, 0]
        z_b = rho * z[:, :, 0] + np.sqrt(1.0 - rho * rho) * z[:, :, 1]
        ret_s = sample_period_return(m.stock, dt, z_s, rng)
        ret_b = sample_period_return(m.bond, dt, z_b, rng)
        out[done:done + count, :, 0] = ret_s[:count]
        out[done:done + count, :, 1] = ret_b[:count]
        done += count
    return PathSet(out, source_tag="synthetic", dt=dt, seed=seed)


def save_pathset(paths: PathSet, filename) -> None:
    """Write the binary path file: fixed header then row-major little-endian f64."""
    with open(filename, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _FILE_VERSION, paths.n_paths, paths.n_periods, 2))
        fh.write(np.ascontiguousarray(paths.gross_returns, dtype="<f8").tobytes())


def load_pathset(filename, source_tag: str = "synthetic", dt: float = 1.0) -> PathSet:
    """Read a path file written by :func:`save_pathset`.

    The file format carries no source tag, so the caller supplies one
    (run manifests record which command produced a file).
    """
    with open(filename, "rb") as fh:
        header = fh.read(_HEADER.size)
        if len(header) < _HEADER.size:
            raise PathFileError(f"{filename}: truncated header")
        magic, version, n_paths, n_periods, n_assets = _HEADER.unpack(header)
        if magic != _MAGIC:
            raise PathFileError(f"{filename}: bad magic {magic!r}")
        if version != _FILE_VERSION:
            raise PathFileError(f"{filename}: unsupported version {version}")
        if n_assets != 2:
            raise PathFileError(f"{filename}: expected 2 assets, got {n_assets}")
        body = fh.read()
    expected = n_paths * n_periods * 2 * 8
    if len(body) != expected:
        raise PathFileError(f"{filename}: expected {expected} data bytes, got {len(body)}")
    arr = np.frombuffer(body, dtype="<f8").reshape(n_paths, n_periods, 2)
    return PathSet(arr.astype(np.float64), source_tag=source_tag, dt=dt)


def export_pathset_csv(paths: PathSet, filename) -> None:
    with open(filename, "w") as fh:
        fh.write("path,period,stock_gross,bond_gross\n")
        for j in range(paths.n_paths):
            for i in range(paths.n_periods):
                s, b = paths.gross_returns[j, i]
                fh.write(f"{j},{i},{s!r},{b!r}\n")
