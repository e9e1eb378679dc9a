"""Dynamic-programming ground truth: backward induction on a log-asset grid.

The auxiliary value function V(s, b, W*, t) is advanced between rebalances by
one exact transition step: the market is a time-homogeneous Levy process over
each interval, so the conditional expectation is a single frequency-domain
multiplication with the closed-form joint characteristic function (domain
edge-extended so wrap-around mass stays below tolerance).  At each rebalance
the optimal allocation and withdrawal are found by exhaustive search over
equally spaced control grids; since the controls depend on total wealth only,
the search runs on a fine one-dimensional wealth grid and is mapped back onto
the two-dimensional nodes by interpolation.

States with exactly one asset (allocation 0 or 1) and insolvent states are
carried on dedicated one-dimensional grids: a log-asset lattice cannot
represent a zero holding, and debt compounds under the bond process plus the
borrowing spread.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import fft as sfft
from scipy import special

from .market import AssetJumpParams, MarketParams, PathSet, jump_compensator
from .objective import RolloutResult, rollout
from .scenario import ScenarioConfig

log = logging.getLogger(__name__)

_CTRL_MAGIC = b"DCTL"
_CTRL_VERSION = 1


class HjbError(RuntimeError):
    """Raised on numerical failure inside the dynamic-programming solver."""


class ControlsFileError(ValueError):
    """Raised for malformed stored-control files."""


@dataclass(frozen=True)
class GridSpec:
    """Discretization of the state and control spaces.

    Asset grids are evenly spaced in log space.  The debt grid lives on
    log(-w) for negative wealth.  ``n_wealth`` is the fine one-dimensional
    grid used for control search and stored controls (0 picks a default of
    8x the largest asset grid).
    """

    n_s: int = 512
    n_b: int = 512
    log_s_min: float = math.log(2e-3)
    log_s_max: float = math.log(6e5)
    log_b_min: float = math.log(2e-3)
    log_b_max: float = math.log(6e5)
    n_debt: int = 0                       # 0 -> 4x max(n_s, n_b)
    log_debt_min: float = math.log(1e-3)  # in log(-w)
    log_debt_max: float = math.log(4e4)
    n_q: int = 101
    n_p: int = 101
    n_wealth: int = 0
    tail_tol: float = 1e-10               # per-axis kernel mass beyond the padding
    boundary_mass_tol: float = 1e-8

    def __post_init__(self):
        for n, name in ((self.n_s, "n_s"), (self.n_b, "n_b")):
            if n < 4 or n & (n - 1):
                raise ValueError(f"{name} must be a power of two >= 4, got {n}")
        if self.n_q < 2 or self.n_p < 2:
            raise ValueError("control grids need at least 2 points")
        if self.log_s_min >= self.log_s_max or self.log_b_min >= self.log_b_max:
            raise ValueError("log-space bounds must be increasing")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def default_grid(n: int, **overrides) -> GridSpec:
    """Square n x n grid with the package's default log-space bounds."""
    return GridSpec(n_s=n, n_b=n, **overrides)


@dataclass
class StoredControls:
    """Optimal controls per rebalance time on the fine wealth grid.

    ``q[i]`` is indexed by pre-withdrawal wealth and ``p[i]`` by
    post-withdrawal wealth; there is no allocation row at the final time.
    """

    wealth_grid: np.ndarray     # (n_w,)
    q: np.ndarray               # (M+1, n_w)
    p: np.ndarray               # (M, n_w)
    w_star: float
    value_t0: float
    scenario: ScenarioConfig
    grid: dict = field(default_factory=dict)


@dataclass
class ValueGrid:
    """Evolving solver state for one fixed W*, plus harvested controls."""

    w_star: float
    v2d: np.ndarray             # (n_s, n_b) solvent states
    v_stock_axis: np.ndarray    # (n_s,) states with b = 0
    v_bond_axis: np.ndarray     # (n_b,) states with s = 0
    v_debt: np.ndarray          # (n_debt,) insolvent states on the debt grid
    controls: StoredControls | None = None
    value_t0: float | None = None


def _uniform_index(x: np.ndarray, lo: float, dx: float, n: int):
    """Clamped linear-interpolation indices/weights on a uniform grid."""
    t = (np.asarray(x) - lo) / dx
    ix = np.clip(np.floor(t), 0, n - 2).astype(np.int64)
    fr = np.clip(t - ix, 0.0, 1.0)
    return ix, fr


def _gather(values: np.ndarray, ix: np.ndarray, fr: np.ndarray) -> np.ndarray:
    """values is (K, n); gather linear interpolants at (ix, fr)."""
    return values[:, ix] * (1.0 - fr) + values[:, ix + 1] * fr


def _jump_cf(p: AssetJumpParams, omega: np.ndarray) -> np.ndarray:
    """Characteristic function of one double-exponential log jump."""
    return (p.u_up * p.eta1 / (p.eta1 - 1j * omega)
            + (1.0 - p.u_up) * p.eta2 / (p.eta2 + 1j * omega))


def _char_exponent(p: AssetJumpParams, omega: np.ndarray, extra_drift: float = 0.0):
    drift = p.mu + extra_drift - p.lam * jump_compensator(p) - 0.5 * p.sigma**2
    return (1j * omega * drift - 0.5 * p.sigma**2 * omega**2
            + p.lam * (_jump_cf(p, omega) - 1.0))


def _compound_tail_reach(lam_dt: float, eta: float, tol: float) -> float:
    """y with P(sum of one-sided exp(eta) jumps over the period > y) <= tol."""
    if lam_dt <= 0 or tol >= 1:
        return 0.0
    ks = np.arange(1, 41)
    log_pmf = -lam_dt + ks * math.log(lam_dt) - special.gammaln(ks + 1)
    pmf = np.exp(log_pmf)

    def tail(y: float) -> float:
        return float(np.sum(pmf * special.gammaincc(ks, eta * y)))

    lo, hi = 0.0, 10.0
    while tail(hi) > tol:
        hi *= 2.0
        if hi > 1e4:
            raise HjbError("jump tail quantile did not converge")
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if tail(mid) > tol:
            lo = mid
        else:
            hi = mid
    return hi


def _axis_reach(p: AssetJumpParams, dt: float, tol: float, extra_drift: float = 0.0):
    """(down, up) log-return reach containing all but ``tol`` mass per side."""
    z = math.sqrt(max(2.0 * math.log(2.0 / tol), 1.0))
    drift = (p.mu + extra_drift - p.lam * jump_compensator(p) - 0.5 * p.sigma**2) * dt
    diffusion = z * p.sigma * math.sqrt(dt)
    up = max(drift, 0.0) + diffusion + _compound_tail_reach(p.lam * dt * p.u_up, p.eta1, tol)
    down = max(-drift, 0.0) + diffusion + _compound_tail_reach(
        p.lam * dt * (1.0 - p.u_up), p.eta2, tol)
    return down, up


# When an axis is so coarse that the characteristic function has not decayed
# at the Nyquist frequency, the implied lattice kernel rings.  Multiplying by
# the cell-average (sinc) transfer function restores a positive, second-order
# accurate kernel; resolved axes are left untouched so their one-step
# expectation stays exact to quadrature precision.
_ALIAS_THRESHOLD = 1e-6


def _cell_filter(p: AssetJumpParams, dt: float, omega: np.ndarray, dx: float,
                 extra_drift: float = 0.0) -> np.ndarray:
    nyquist = abs(np.exp(dt * _char_exponent(p, np.array([math.pi / dx]), extra_drift))[0])
    if nyquist <= _ALIAS_THRESHOLD:
        return np.ones_like(omega)
    return np.sinc(omega * dx / (2.0 * math.pi))


class _AxisKernel:
    """1-D exact transition operator for one asset's log price."""

    def __init__(self, p: AssetJumpParams, dt: float, n: int, dx: float,
                 tol: float, extra_drift: float, workers: int):
        down, up = _axis_reach(p, dt, tol, extra_drift)
        self.pad_lo = int(math.ceil(down / dx)) + 1
        self.pad_hi = int(math.ceil(up / dx)) + 1
        self.n = n
        self.n_pad = sfft.next_fast_len(n + self.pad_lo + self.pad_hi, real=True)
        omega = 2.0 * math.pi * np.fft.rfftfreq(self.n_pad, d=dx)
        self.phi = (np.exp(dt * _char_exponent(p, omega, extra_drift))
                    * _cell_filter(p, dt, omega, dx, extra_drift))
        self.workers = workers

    def apply(self, v: np.ndarray) -> np.ndarray:
        extra = self.n_pad - self.n - self.pad_lo - self.pad_hi
        pad = [(0, 0)] * (v.ndim - 1) + [(self.pad_lo, self.pad_hi + extra)]
        vp = np.pad(v, pad, mode="edge")
        out = sfft.irfft(sfft.rfft(vp, workers=self.workers) * self.phi,
                         n=self.n_pad, workers=self.workers)
        return out[..., self.pad_lo:self.pad_lo + self.n]


class _PlaneKernel:
    """2-D exact transition operator for the correlated pair."""

    def __init__(self, m: MarketParams, dt: float, n_s: int, n_b: int,
                 dxs: float, dxb: float, tol: float, workers: int):
        ds, us = _axis_reach(m.stock, dt, tol)
        db, ub = _axis_reach(m.bond, dt, tol)
        self.pad = ((int(math.ceil(ds / dxs)) + 1, int(math.ceil(us / dxs)) + 1),
                    (int(math.ceil(db / dxb)) + 1, int(math.ceil(ub / dxb)) + 1))
        self.n = (n_s, n_b)
        self.n_pad = (sfft.next_fast_len(n_s + sum(self.pad[0]), real=True),
                      sfft.next_fast_len(n_b + sum(self.pad[1]), real=True))
        w1 = 2.0 * math.pi * np.fft.fftfreq(self.n_pad[0], d=dxs)
        w2 = 2.0 * math.pi * np.fft.rfftfreq(self.n_pad[1], d=dxb)
        psi = (_char_exponent(m.stock, w1)[:, None]
               + _char_exponent(m.bond, w2)[None, :]
               - m.rho_sb * m.stock.sigma * m.bond.sigma * w1[:, None] * w2[None, :])
        self.phi = (np.exp(dt * psi)
                    * _cell_filter(m.stock, dt, w1, dxs)[:, None]
                    * _cell_filter(m.bond, dt, w2, dxb)[None, :])
        self.workers = workers

    def apply(self, v: np.ndarray) -> np.ndarray:
        (plo_s, phi_s), (plo_b, phi_b) = self.pad
        extra_s = self.n_pad[0] - self.n[0] - plo_s - phi_s
        extra_b = self.n_pad[1] - self.n[1] - plo_b - phi_b
        pad = [(0, 0)] * (v.ndim - 2) + [(plo_s, phi_s + extra_s), (plo_b, phi_b + extra_b)]
        vp = np.pad(v, pad, mode="edge")
        spec = sfft.rfft2(vp, workers=self.workers)
        out = sfft.irfft2(spec * self.phi, s=self.n_pad, workers=self.workers)
        return out[..., plo_s:plo_s + self.n[0], plo_b:plo_b + self.n[1]]


class _Stack:
    """Solver state for a batch of W* values handled in lockstep."""

    __slots__ = ("v2", "vs_axis", "vb_axis", "vd")

    def __init__(self, v2, vs_axis, vb_axis, vd):
        self.v2 = v2              # (K, n_s, n_b)
        self.vs_axis = vs_axis    # (K, n_s)  all-stock states (b = 0)
        self.vb_axis = vb_axis    # (K, n_b)  all-bond states (s = 0)
        self.vd = vd              # (K, n_debt)


class HjbSolver:
    """Backward-induction solver bound to one (scenario, market, grid)."""

    def __init__(self, scenario: ScenarioConfig, market: MarketParams,
                 grid: GridSpec, workers: int | None = None):
        self.scenario = scenario
        self.market = market
        self.grid = grid
        self.workers = workers if workers is not None else -1
        dt = scenario.dt

        self.log_s = np.linspace(grid.log_s_min, grid.log_s_max, grid.n_s)
        self.log_b = np.linspace(grid.log_b_min, grid.log_b_max, grid.n_b)
        self.dxs = self.log_s[1] - self.log_s[0]
        self.dxb = self.log_b[1] - self.log_b[0]
        s = np.exp(self.log_s)
        b = np.exp(self.log_b)
        self.w2d = s[:, None] + b[None, :]

        n_w = grid.n_wealth or 8 * max(grid.n_s, grid.n_b)
        self.n_w = n_w
        w_cap = s[-1] + b[-1]
        self.log_wf = np.linspace(math.log(1e-3), math.log(w_cap), n_w)
        self.dxw = self.log_wf[1] - self.log_wf[0]
        self.wf = np.exp(self.log_wf)

        n_d = grid.n_debt or 4 * max(grid.n_s, grid.n_b)
        self.n_d = n_d
        self.log_d = np.linspace(grid.log_debt_min, grid.log_debt_max, n_d)
        self.dxd = self.log_d[1] - self.log_d[0]
        self.w_debt = -np.exp(self.log_d)      # from ~0- down to the deepest debt

        # Interpolation plumbing fixed by the grids alone.
        self._ix_w2d, self._fr_w2d = _uniform_index(np.log(self.w2d).ravel(),
                                                    self.log_wf[0], self.dxw, n_w)
        self._ix_ws, self._fr_ws = _uniform_index(self.log_s, self.log_wf[0], self.dxw, n_w)
        self._ix_wb, self._fr_wb = _uniform_index(self.log_b, self.log_wf[0], self.dxw, n_w)
        # Axis-candidate lookups: all-in-one-asset continuation at wealth wf.
        self._ix_axis_s, self._fr_axis_s = _uniform_index(self.log_wf, self.log_s[0],
                                                          self.dxs, grid.n_s)
        self._ix_axis_b, self._fr_axis_b = _uniform_index(self.log_wf, self.log_b[0],
                                                          self.dxb, grid.n_b)
        # Interior allocation candidates: bilinear corners on the 2-D grid.
        self.p_interior = np.linspace(0.0, 1.0, grid.n_p)[1:-1]
        qx = self.log_wf[None, :] + np.log(self.p_interior)[:, None]
        qy = self.log_wf[None, :] + np.log1p(-self.p_interior)[:, None]
        ixs, frs = _uniform_index(qx, self.log_s[0], self.dxs, grid.n_s)
        ixb, frb = _uniform_index(qy, self.log_b[0], self.dxb, grid.n_b)
        self._p_flat00 = ixs * grid.n_b + ixb
        self._p_fr_s = frs
        self._p_fr_b = frb

        self.q_grid = np.linspace(scenario.q_min, scenario.q_max, grid.n_q)

        self.kernel_2d = _PlaneKernel(market, dt, grid.n_s, grid.n_b,
                                      self.dxs, self.dxb, grid.tail_tol, self.workers)
        self.kernel_stock = _AxisKernel(market.stock, dt, grid.n_s, self.dxs,
                                        grid.tail_tol, 0.0, self.workers)
        self.kernel_bond = _AxisKernel(market.bond, dt, grid.n_b, self.dxb,
                                       grid.tail_tol, 0.0, self.workers)
        self.kernel_debt = _AxisKernel(market.bond, dt, n_d, self.dxd,
                                       grid.tail_tol, market.borrow_spread, self.workers)
        self.boundary_mass_bound = 4.0 * grid.tail_tol
        if self.boundary_mass_bound > grid.boundary_mass_tol:
            raise HjbError(f"kernel mass outside padding {self.boundary_mass_bound:.2e} "
                           f"exceeds tolerance {grid.boundary_mass_tol:.2e}")

    # ----- raw transition operators ------------------------------------

    def pide_advance(self, v2d: np.ndarray) -> np.ndarray:
        """One-interval conditional expectation of a solvent-grid function."""
        out = self.kernel_2d.apply(v2d)
        if not np.all(np.isfinite(out)):
            raise HjbError("non-finite values after Fourier advance")
        return out

    def debt_advance(self, v_debt: np.ndarray) -> np.ndarray:
        """One-interval expectation on the debt grid (bond process + spread)."""
        return self.kernel_debt.apply(v_debt)

    def _advance_stack(self, st: _Stack) -> _Stack:
        return _Stack(self.pide_advance(st.v2),
                      self.kernel_stock.apply(st.vs_axis),
                      self.kernel_bond.apply(st.vb_axis),
                      self.debt_advance(st.vd))

    # ----- terminal condition -------------------------------------------

    def _terminal_payoff(self, wealth: np.ndarray, wstars: np.ndarray) -> np.ndarray:
        """kappa*(W* + min(w - W*, 0)/alpha) + epsilon*w, batched over W*."""
        sc = self.scenario
        kappa = 1.0 if sc.pure_shortfall else sc.kappa
        ws = wstars[:, None]
        w = np.asarray(wealth, dtype=np.float64).ravel()[None, :]
        out = kappa * (ws + np.minimum(w - ws, 0.0) / sc.alpha) + sc.epsilon * w
        return out.reshape((len(wstars),) + np.shape(wealth))

    def _terminal_stack(self, wstars: np.ndarray) -> _Stack:
        s = np.exp(self.log_s)
        b = np.exp(self.log_b)
        return _Stack(self._terminal_payoff(self.w2d, wstars),
                      self._terminal_payoff(s, wstars),
                      self._terminal_payoff(b, wstars),
                      self._terminal_payoff(self.w_debt, wstars))

    def terminal_condition(self, w_star: float) -> ValueGrid:
        """Value grid at T+ (after the final withdrawal, stabilization folded in)."""
        st = self._terminal_stack(np.array([w_star]))
        return ValueGrid(w_star, st.v2[0], st.vs_axis[0], st.vb_axis[0], st.vd[0])

    # ----- control optimization at a rebalance --------------------------

    def _interp_debt(self, vd: np.ndarray, x: np.ndarray) -> np.ndarray:
        """Continuation value at negative wealths x; linear in wealth.

        Linear extrapolation past the deep end (the value function is
        asymptotically linear in wealth there).
        """
        w = self.w_debt[::-1]            # increasing wealth
        vals = vd[:, ::-1]
        t = np.interp(x, w, np.arange(self.n_d, dtype=np.float64))
        ix = np.clip(np.floor(t), 0, self.n_d - 2).astype(np.int64)
        fr = t - ix
        deep = x < w[0]
        if np.any(deep):
            slope = (vals[:, 1] - vals[:, 0]) / (w[1] - w[0])
            base = vals[:, 0][:, None] + slope[:, None] * (x[None, :] - w[0])
            out = _gather(vals, ix, fr)
            return np.where(deep[None, :], base, out)
        return _gather(vals, ix, fr)

    def _continuation(self, u: np.ndarray, vd: np.ndarray, x: np.ndarray) -> np.ndarray:
        """U_full: post-withdrawal continuation at arbitrary wealth x (1-D array).

        Solvent wealths interpolate the allocation-optimized value U, negative
        wealths the debt grid; the sliver between the two grid floors around
        zero is bridged linearly (the value function is continuous there).
        """
        w_floor = self.wf[0]
        d_floor = self.w_debt[0]         # ~ -1e-3
        out = np.empty((u.shape[0], x.size))
        pos = x >= w_floor
        neg = x <= d_floor
        mid = ~(pos | neg)
        if np.any(pos):
            ix, fr = _uniform_index(np.log(x[pos]), self.log_wf[0], self.dxw, self.n_w)
            out[:, pos] = _gather(u, ix, fr)
        if np.any(neg):
            out[:, neg] = self._interp_debt(vd, x[neg])
        if np.any(mid):
            t = (x[mid] - d_floor) / (w_floor - d_floor)
            out[:, mid] = vd[:, :1] + t[None, :] * (u[:, :1] - vd[:, :1])
        return out

    def _build_u(self, st: _Stack) -> tuple[np.ndarray, np.ndarray]:
        """Allocation-optimized continuation on the fine wealth grid.

        U(w+) = max over p in [0, 1] of V((w+)p, (w+)(1-p)); the p = 0 and
        p = 1 candidates come from the dedicated axis grids.  Ties resolve to
        the smallest p.
        """
        k = st.v2.shape[0]
        u = _gather(st.vb_axis, self._ix_axis_b, self._fr_axis_b)     # p = 0
        p_star = np.zeros((k, self.n_w))
        flat = st.v2.reshape(k, -1)
        for r, p in enumerate(self.p_interior):
            i00 = self._p_flat00[r]
            fs = self._p_fr_s[r]
            fb = self._p_fr_b[r]
            nb = self.grid.n_b
            v = ((flat[:, i00] * (1.0 - fb) + flat[:, i00 + 1] * fb) * (1.0 - fs)
                 + (flat[:, i00 + nb] * (1.0 - fb) + flat[:, i00 + nb + 1] * fb) * fs)
            better = v > u
            u = np.where(better, v, u)
            p_star = np.where(better, p, p_star)
        v1 = _gather(st.vs_axis, self._ix_axis_s, self._fr_axis_s)    # p = 1
        better = v1 > u
        u = np.where(better, v1, u)
        p_star = np.where(better, 1.0, p_star)
        return u, p_star

    def _build_f(self, u: np.ndarray, vd: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Withdrawal-optimized value on the fine wealth grid.

        F(w) = max over admissible q of [q + U_full(w - q)] (the reward term
        is dropped in the pure-shortfall mode).  Ties resolve to the largest
        q; the interval endpoint q = w is included when q_min < w < q_max.
        """
        sc = self.scenario
        reward = 0.0 if sc.pure_shortfall else 1.0
        f = reward * sc.q_min + self._continuation(u, vd, self.wf - sc.q_min)
        q_star = np.full((u.shape[0], self.n_w), sc.q_min)
        if sc.pure_shortfall:
            return f, q_star
        for q in self.q_grid[1:]:
            valid = self.wf >= q
            val = q + self._continuation(u, vd, self.wf - q)
            take = valid[None, :] & (val >= f)
            f = np.where(take, val, f)
            q_star = np.where(take, q, q_star)
        # q = w exactly (withdraw everything) for wealth inside the band.
        band = (self.wf > sc.q_min) & (self.wf < sc.q_max)
        if np.any(band):
            val = self.wf[band] + self._continuation(u, vd, np.zeros(band.sum()))
            take = val >= f[:, band]
            f[:, band] = np.where(take, val, f[:, band])
            q_star[:, band] = np.where(take, self.wf[band], q_star[:, band])
        return f, q_star

    def _terminal_f(self, wstars: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Final-time withdrawal search against the closed-form payoff."""
        sc = self.scenario
        reward = 0.0 if sc.pure_shortfall else 1.0
        f = reward * sc.q_min + self._terminal_payoff(self.wf - sc.q_min, wstars)
        q_star = np.full((len(wstars), self.n_w), sc.q_min)
        if sc.pure_shortfall:
            return f, q_star
        for q in self.q_grid[1:]:
            valid = self.wf >= q
            val = q + self._terminal_payoff(self.wf - q, wstars)
            take = valid[None, :] & (val >= f)
            f = np.where(take, val, f)
            q_star = np.where(take, q, q_star)
        band = (self.wf > sc.q_min) & (self.wf < sc.q_max)
        if np.any(band):
            val = self.wf[band] + self._terminal_payoff(np.zeros(band.sum()), wstars)
            take = val >= f[:, band]
            f[:, band] = np.where(take, val, f[:, band])
            q_star[:, band] = np.where(take, self.wf[band], q_star[:, band])
        return f, q_star

    def _apply_f(self, st: _Stack, f: np.ndarray, vd_new: np.ndarray) -> _Stack:
        """Map the wealth-grid value F back onto every state representation."""
        k = f.shape[0]
        v2 = _gather(f, self._ix_w2d, self._fr_w2d).reshape(k, self.grid.n_s, self.grid.n_b)
        vs = _gather(f, self._ix_ws, self._fr_ws)
        vb = _gather(f, self._ix_wb, self._fr_wb)
        return _Stack(v2, vs, vb, vd_new)

    def _rebalance_debt(self, vd: np.ndarray) -> np.ndarray:
        sc = self.scenario
        reward = 0.0 if sc.pure_shortfall else sc.q_min
        return reward + self._interp_debt(vd, self.w_debt - sc.q_min)

    def rebalance_optimize(self, vg: ValueGrid, time_index: int
                           ) -> tuple[ValueGrid, np.ndarray, np.ndarray]:
        """Apply the rebalance-time optimization to a single-W* value grid.

        Returns the pre-rebalance grid plus the stored controls q(w) and p(w)
        on the fine wealth grid (p is zeros at the final time, where the
        admissible allocation set collapses to {0}).
        """
        st = _Stack(vg.v2d[None], vg.v_stock_axis[None], vg.v_bond_axis[None],
                    vg.v_debt[None])
        if time_index == self.scenario.n_rebalances:
            # No reallocation at final liquidation; continuation is the
            # all-bond axis (a function of wealth only).
            u = _gather(st.vb_axis, self._ix_axis_b, self._fr_axis_b)
            p_star = np.zeros((1, self.n_w))
        else:
            u, p_star = self._build_u(st)
        f, q_star = self._build_f(u, st.vd)
        vd_new = self._rebalance_debt(st.vd)
        out = self._apply_f(st, f, vd_new)
        new = ValueGrid(vg.w_star, out.v2[0], out.vs_axis[0], out.vb_axis[0],
                        out.vd[0], vg.controls, vg.value_t0)
        return new, q_star[0], p_star[0]

    # ----- full solves ----------------------------------------------------

    def _q_candidates(self, wealth: float) -> np.ndarray:
        sc = self.scenario
        if sc.pure_shortfall:
            return np.array([sc.q_min])
        cands = [q for q in self.q_grid if q <= max(sc.q_min, min(sc.q_max, wealth))]
        if sc.q_min < wealth < sc.q_max:
            cands.append(wealth)
        return np.asarray(cands)

    def _value_at(self, u: np.ndarray, vd: np.ndarray, wealth: float) -> np.ndarray:
        """Exact withdrawal search at one wealth level (the t_0 readout)."""
        sc = self.scenario
        reward = 0.0 if sc.pure_shortfall else 1.0
        cands = self._q_candidates(wealth)
        vals = reward * cands[None, :] + self._continuation(u, vd, wealth - cands)
        return vals.max(axis=1)

    def _terminal_value_at(self, wstars: np.ndarray, wealth: float) -> np.ndarray:
        """Exact final-withdrawal search against the closed-form payoff."""
        sc = self.scenario
        reward = 0.0 if sc.pure_shortfall else 1.0
        cands = self._q_candidates(wealth)
        vals = reward * cands[None, :] + self._terminal_payoff(wealth - cands, wstars)
        return vals.max(axis=1)

    def _solve_stack(self, wstars: np.ndarray, store: bool):
        """Backward induction for a batch of W* values.

        Returns (values at t_0 for wealth W0, controls or None).  Controls are
        only collected for single-element batches.
        """
        if store and len(wstars) != 1:
            raise ValueError("controls can only be stored for a single W*")
        sc = self.scenario
        m = sc.n_rebalances
        q_tab = np.empty((m + 1, self.n_w)) if store else None
        p_tab = np.empty((m, self.n_w)) if store else None

        st = self._terminal_stack(wstars)
        f, q_star = self._terminal_f(wstars)
        reward = 0.0 if sc.pure_shortfall else sc.q_min
        vd = reward + self._terminal_payoff(self.w_debt - sc.q_min, wstars)
        st = self._apply_f(st, f, vd)
        if store:
            q_tab[m] = q_star[0]
        u = None
        for n in range(m - 1, -1, -1):
            st = self._advance_stack(st)
            u, p_star = self._build_u(st)
            f, q_star = self._build_f(u, st.vd)
            vd = self._rebalance_debt(st.vd)
            st = self._apply_f(st, f, vd)
            if store:
                q_tab[n] = q_star[0]
                p_tab[n] = p_star[0]
        if m == 0:
            # Degenerate single-withdrawal horizon: terminal search only.
            values = self._terminal_value_at(wstars, sc.w0)
        else:
            values = self._value_at(u, st.vd, sc.w0)
        if not np.all(np.isfinite(values)):
            raise HjbError("non-finite value at t0")
        return values, (q_tab, p_tab), st

    def solve_fixed_wstar(self, w_star: float) -> tuple[float, ValueGrid]:
        """Full backward induction at fixed W*, harvesting the controls."""
        values, (q_tab, p_tab), st = self._solve_stack(np.array([float(w_star)]), store=True)
        value = float(values[0])
        controls = StoredControls(self.wf.copy(), q_tab, p_tab, float(w_star),
                                  value, self.scenario, self.grid.to_dict())
        vg = ValueGrid(float(w_star), st.v2[0], st.vs_axis[0], st.vb_axis[0],
                       st.vd[0], controls, value)
        return value, vg

    def _values_for(self, wstars: np.ndarray, batch: int = 8) -> np.ndarray:
        out = np.empty(len(wstars))
        for k in range(0, len(wstars), batch):
            chunk = np.asarray(wstars[k:k + batch], dtype=np.float64)
            out[k:k + len(chunk)] = self._solve_stack(chunk, store=False)[0]
        return out

    def optimize_wstar(self, coarse: np.ndarray | None = None,
                       golden_tol: float = 0.25, batch: int = 8
                       ) -> tuple[float, float, ValueGrid]:
        """Outer maximization over W*: coarse scans then golden-section.

        Returns (objective value at t_0, best W*, value grid with controls).
        """
        sc = self.scenario
        if coarse is None:
            span = sc.w0
            coarse = np.linspace(-0.8 * span, 0.12 * span, 24)
        coarse = np.sort(np.asarray(coarse, dtype=np.float64))
        vals = self._values_for(coarse, batch)
        i = int(np.argmax(vals))
        lo = coarse[max(i - 1, 0)]
        hi = coarse[min(i + 1, len(coarse) - 1)]
        fine = np.linspace(lo, hi, 9)
        fvals = self._values_for(fine, batch)
        j = int(np.argmax(fvals))
        lo = fine[max(j - 1, 0)]
        hi = fine[min(j + 1, len(fine) - 1)]

        invphi = (math.sqrt(5.0) - 1.0) / 2.0  # golden ratio conjugate
        a, b = lo, hi
        c = b - invphi * (b - a)
        d = a + invphi * (b - a)
        fc = self._values_for(np.array([c]))[0]
        fd = self._values_for(np.array([d]))[0]
        best_w, best_v = (c, fc) if fc >= fd else (d, fd)
        while b - a > golden_tol:
            if fc >= fd:
                b, d, fd = d, c, fc
                c = b - invphi * (b - a)
                fc = self._values_for(np.array([c]))[0]
                if fc > best_v:
                    best_w, best_v = c, fc
            else:
                a, c, fc = c, d, fd
                d = a + invphi * (b - a)
                fd = self._values_for(np.array([d]))[0]
                if fd > best_v:
                    best_w, best_v = d, fd
        grid_best = fine[j] if fvals[j] > best_v else best_w
        value, vg = self.solve_fixed_wstar(float(grid_best))
        return value, vg.w_star, vg


# ----- applying stored controls to sampled paths ---------------------------


class TabulatedPolicy:
    """Rollout adapter for stored HJB controls (linear interpolation in w)."""

    def __init__(self, controls: StoredControls):
        self.controls = controls
        sc = controls.scenario
        self.q_min = sc.q_min
        self.q_max = sc.q_max
        self.clamped = 0   # queries outside the stored wealth grid

    def _count_clamped(self, w: np.ndarray) -> None:
        grid = self.controls.wealth_grid
        n = int(np.count_nonzero((w > 0) & ((w < grid[0]) | (w > grid[-1]))))
        if n:
            self.clamped += n
            log.debug("clamped %d wealth queries to the stored control grid", n)

    def withdrawal(self, w_minus: np.ndarray, i: int) -> np.ndarray:
        self._count_clamped(np.asarray(w_minus))
        q = np.interp(w_minus, self.controls.wealth_grid, self.controls.q[i])
        upper = np.maximum(self.q_min, np.minimum(self.q_max, w_minus))
        return np.clip(q, self.q_min, upper)

    def allocation(self, w_plus: np.ndarray, i: int) -> np.ndarray:
        p = np.interp(w_plus, self.controls.wealth_grid, self.controls.p[i])
        return np.clip(p, 0.0, 1.0)


def rollout_stored_controls(controls: StoredControls, paths: PathSet,
                            scenario: ScenarioConfig,
                            market: MarketParams | None = None,
                            keep_traces: bool = False) -> RolloutResult:
    """Monte Carlo verification: apply stored controls to sampled paths."""
    if controls.scenario.n_rebalances != scenario.n_rebalances:
        raise ValueError("stored controls were computed for a different horizon")
    return rollout(TabulatedPolicy(controls), paths, scenario, market, keep_traces)


def save_controls(controls: StoredControls, path) -> None:
    """Single-file binary: header, JSON manifest, then float64 arrays."""
    manifest = {
        "version": _CTRL_VERSION,
        "n_wealth": len(controls.wealth_grid),
        "n_rebalances": controls.q.shape[0] - 1,
        "w_star": controls.w_star,
        "value_t0": controls.value_t0,
        "scenario": controls.scenario.to_dict(),
        "grid": controls.grid,
    }
    blob = json.dumps(manifest).encode()
    with open(path, "wb") as fh:
        fh.write(_CTRL_MAGIC)
        fh.write(struct.pack("<IQ", _CTRL_VERSION, len(blob)))
        fh.write(blob)
        for arr in (controls.wealth_grid, controls.q, controls.p):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_controls(path) -> StoredControls:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _CTRL_MAGIC:
            raise ControlsFileError(f"{path}: bad magic {magic!r}")
        version, blob_len = struct.unpack("<IQ", fh.read(12))
        if version != _CTRL_VERSION:
            raise ControlsFileError(f"{path}: unsupported version {version}")
        manifest = json.loads(fh.read(blob_len))
        n_w = manifest["n_wealth"]
        m = manifest["n_rebalances"]
        body = fh.read()
    need = 8 * (n_w + (m + 1) * n_w + m * n_w)
    if len(body) != need:
        raise ControlsFileError(f"{path}: expected {need} data bytes, got {len(body)}")
    flat = np.frombuffer(body, dtype="<f8")
    wealth = flat[:n_w].copy()
    q = flat[n_w:n_w + (m + 1) * n_w].reshape(m + 1, n_w).copy()
    p = flat[n_w + (m + 1) * n_w:].reshape(m, n_w).copy()
    return StoredControls(wealth, q, p, manifest["w_star"], manifest["value_t0"],
                          ScenarioConfig.from_dict(manifest["scenario"]),
                          manifest.get("grid", {}))
