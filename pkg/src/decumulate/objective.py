"""Policy rollout over sampled paths and the EW-ES objective with reports.

Rollout mechanics per path: withdraw, rebalance, grow by the period's gross
returns.  Once wealth goes nonpositive the portfolio is liquidated: the stock
weight is forced to zero, withdrawals continue at the policy's (minimum)
level and the debt compounds at the bond return times the borrowing spread.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .market import MarketParams, PathSet
from .scenario import ScenarioConfig


@dataclass(frozen=True)
class RolloutResult:
    """Per-path outcome of applying a policy to a PathSet."""

    withdrawal_sum: np.ndarray      # (N,) total cash withdrawn
    terminal_wealth: np.ndarray     # (N,) wealth after the final withdrawal
    # Traces are optional (heat maps / percentile plots); all (N, M+1), where
    # the allocation at the final time is 0 by definition.
    wealth: np.ndarray | None = None
    withdrawals: np.ndarray | None = None
    stock_fraction: np.ndarray | None = None

    @property
    def n_paths(self) -> int:
        return len(self.terminal_wealth)


@dataclass(frozen=True)
class FrontierPoint:
    kappa: float
    ew_per_event: float     # E[sum q] / (M+1)
    es: float               # expected shortfall at level alpha
    median_wt: float
    objective: float
    w_star: float

    def as_row(self) -> str:
        k = "inf" if math.isinf(self.kappa) else repr(self.kappa)
        return (f"{k},{self.ew_per_event!r},{self.es!r},{self.median_wt!r},"
                f"{self.objective!r},{self.w_star!r}")


FRONTIER_CSV_HEADER = "kappa,EW_per_event,ES,median_WT,objective,w_star"


@dataclass(frozen=True)
class ConstantPolicy:
    """Fixed withdrawal amount and fixed stock fraction (Bengen-style).

    The withdrawal is taken every period regardless of wealth (its own rule
    replaces the scenario's [q_min, q_max] band); the rollout still forces
    the stock weight to zero on insolvency and at the final time.
    """

    withdrawal_amount: float
    stock_weight: float

    def withdrawal(self, w_minus: np.ndarray, i: int) -> np.ndarray:
        return np.full(np.shape(w_minus), self.withdrawal_amount)

    def allocation(self, w_plus: np.ndarray, i: int) -> np.ndarray:
        return np.full(np.shape(w_plus), self.stock_weight)


def bengen_policy(withdrawal: float, stock_fraction: float) -> ConstantPolicy:
    """Classic fixed-real-withdrawal baseline with a constant rebalanced mix."""
    if not 0 <= stock_fraction <= 1:
        raise ValueError(f"stock_fraction must lie in [0, 1], got {stock_fraction}")
    return ConstantPolicy(withdrawal, stock_fraction)


def rollout(policy, paths: PathSet, scenario: ScenarioConfig,
            market: MarketParams | None = None, keep_traces: bool = False) -> RolloutResult:
    """Apply ``policy`` to every path.

    ``policy`` needs vectorized ``withdrawal(w_minus, i)`` and
    ``allocation(w_plus, i)`` methods; admissibility of q is the policy's
    business (network policies encode it in their activations), while the
    p = 0 insolvency/terminal rules are enforced here.
    """
    m = scenario.n_rebalances
    if paths.n_periods != m:
        raise ValueError(f"paths have {paths.n_periods} periods but scenario has "
                         f"{m} rebalances")
    n = paths.n_paths
    rs, rb = paths.stock, paths.bond
    spread = math.exp((market.borrow_spread if market else 0.0) * scenario.dt)
    w = np.full(n, scenario.w0)
    q_sum = np.zeros(n)
    traces_w = np.empty((n, m + 1)) if keep_traces else None
    traces_q = np.empty((n, m + 1)) if keep_traces else None
    traces_p = np.zeros((n, m + 1)) if keep_traces else None
    for i in range(m + 1):
        q = np.asarray(policy.withdrawal(w, i), dtype=np.float64)
        if keep_traces:
            traces_w[:, i] = w
            traces_q[:, i] = q
        q_sum += q
        w_plus = w - q
        if i < m:
            solvent = w_plus > 0
            p = np.where(solvent, np.clip(policy.allocation(w_plus, i), 0.0, 1.0), 0.0)
            if keep_traces:
                traces_p[:, i] = p
            growth = np.where(solvent, p * rs[:, i] + (1.0 - p) * rb[:, i],
                              rb[:, i] * spread)
            w = w_plus * growth
        else:
            w = w_plus
    return RolloutResult(q_sum, w, traces_w, traces_q, traces_p)


def empirical_es(terminal_wealth: np.ndarray, alpha: float) -> float:
    """Mean of the ceil(alpha*N) smallest outcomes."""
    x = np.asarray(terminal_wealth, dtype=np.float64)
    if x.size == 0:
        raise ValueError("empirical_es needs at least one sample")
    if not 0 < alpha <= 1:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    k = math.ceil(alpha * x.size)
    return float(np.partition(x, k - 1)[:k].mean())


def rockafellar_es(terminal_wealth: np.ndarray, w_star: float, alpha: float) -> float:
    """Sample average of w* + min(W_T - w*, 0) / alpha."""
    x = np.asarray(terminal_wealth, dtype=np.float64)
    return float(w_star + np.minimum(x - w_star, 0.0).mean() / alpha)


def value_at_risk(terminal_wealth: np.ndarray, alpha: float) -> float:
    """Nearest-rank VaR: the ceil(alpha*N)-th smallest outcome."""
    x = np.asarray(terminal_wealth, dtype=np.float64)
    k = math.ceil(alpha * x.size)
    return float(np.partition(x, k - 1)[k - 1])


def objective_value(result: RolloutResult, scenario: ScenarioConfig, w_star: float) -> float:
    """Sampled objective: mean over paths of the reward/risk/stabilization sum.

    With kappa = infinity the withdrawal reward is dropped and the shortfall
    term enters unweighted (the pure tail-risk objective used for that mode).
    """
    risk = rockafellar_es(result.terminal_wealth, w_star, scenario.alpha)
    stab = scenario.epsilon * result.terminal_wealth.mean()
    if scenario.pure_shortfall:
        return risk + stab
    return float(result.withdrawal_sum.mean() + scenario.kappa * risk + stab)


def nearest_rank(values: np.ndarray, percent: float) -> float:
    """Nearest-rank percentile: the ceil(percent/100 * N)-th smallest value."""
    x = np.sort(np.asarray(values, dtype=np.float64))
    k = max(1, math.ceil(percent / 100.0 * x.size))
    return float(x[k - 1])


def evaluate_policy(policy, paths: PathSet, scenario: ScenarioConfig,
                    w_star: float, market: MarketParams | None = None) -> FrontierPoint:
    """Roll the policy and summarize it as one frontier row."""
    res = rollout(policy, paths, scenario, market)
    m1 = scenario.n_rebalances + 1
    return FrontierPoint(
        kappa=scenario.kappa,
        ew_per_event=float(res.withdrawal_sum.mean() / m1),
        es=empirical_es(res.terminal_wealth, scenario.alpha),
        median_wt=nearest_rank(res.terminal_wealth, 50.0),
        objective=objective_value(res, scenario, w_star),
        w_star=w_star,
    )


def percentile_report(result: RolloutResult, levels=(5, 50, 95)) -> dict[str, np.ndarray]:
    """Per-time nearest-rank percentiles of wealth, stock fraction, withdrawals.

    Returns arrays of shape (M+1, len(levels)) keyed by quantity name.
    """
    if result.wealth is None:
        raise ValueError("rollout was run without keep_traces=True")
    out = {}
    for name, traces in (("wealth", result.wealth),
                         ("stock_fraction", result.stock_fraction),
                         ("withdrawal", result.withdrawals)):
        table = np.empty((traces.shape[1], len(levels)))
        for i in range(traces.shape[1]):
            for c, lvl in enumerate(levels):
                table[i, c] = nearest_rank(traces[:, i], lvl)
        out[name] = table
    return out


def write_percentile_csv(table: np.ndarray, times: np.ndarray, filename,
                         levels=(5, 50, 95)) -> None:
    with open(filename, "w") as fh:
        fh.write("t," + ",".join(f"p{lvl:g}" for lvl in levels) + "\n")
        for t, row in zip(times, table):
            fh.write(f"{t!r}," + ",".join(repr(v) for v in row) + "\n")


def heatmap_report(policy, scenario: ScenarioConfig, wealth_grid: np.ndarray,
                   time_indices: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pointwise policy evaluation on a (time x wealth) grid, no simulation.

    Returns (stock fraction, normalized withdrawal (q - q_min)/(q_max - q_min)),
    each of shape (len(time_indices), len(wealth_grid)).  Wealth is interpreted
    as pre-withdrawal for q and post-withdrawal for p; insolvent or terminal
    cells hold p = 0.
    """
    wealth_grid = np.asarray(wealth_grid, dtype=np.float64)
    time_indices = np.asarray(time_indices, dtype=np.int64)
    if wealth_grid.size == 0 or time_indices.size == 0:
        raise ValueError("wealth and time grids must be nonempty")
    span = scenario.q_max - scenario.q_min
    p_map = np.zeros((time_indices.size, wealth_grid.size))
    q_map = np.zeros_like(p_map)
    for r, i in enumerate(time_indices):
        q = np.asarray(policy.withdrawal(wealth_grid, int(i)), dtype=np.float64)
        q_map[r] = (q - scenario.q_min) / span if span > 0 else 0.0
        if i < scenario.n_rebalances:
            p = np.clip(policy.allocation(wealth_grid, int(i)), 0.0, 1.0)
            p_map[r] = np.where(wealth_grid > 0, p, 0.0)
    return p_map, q_map


def write_heatmap_csv(matrix: np.ndarray, wealth_grid: np.ndarray,
                      times: np.ndarray, filename) -> None:
    """First row is the wealth grid, first column the time grid."""
    with open(filename, "w") as fh:
        fh.write("t\\w," + ",".join(repr(w) for w in wealth_grid) + "\n")
        for t, row in zip(times, matrix):
            fh.write(f"{t!r}," + ",".join(repr(v) for v in row) + "\n")
