"""Investment scenario: horizon, withdrawal bounds and objective weights."""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class ScenarioConfig:
    """Decumulation problem setup.

    Monetary units are arbitrary but consistent (the default base case is in
    thousands of dollars).  ``kappa=math.inf`` selects the pure shortfall
    objective: withdrawals are pinned at ``q_min`` and only tail risk is
    optimized.
    """

    horizon: float = 30.0        # T, years
    n_rebalances: int = 30       # M; withdrawals happen at t_0..t_M (M+1 events)
    w0: float = 1000.0
    q_min: float = 35.0
    q_max: float = 60.0
    kappa: float = 1.0
    alpha: float = 0.05
    epsilon: float = 1e-6

    def __post_init__(self):
        # n_rebalances == 0 is the degenerate single-withdrawal problem
        # (t_0 = T = 0), used as a dynamic-programming oracle in tests.
        if self.n_rebalances < 0:
            raise ValueError(f"n_rebalances must be >= 0, got {self.n_rebalances}")
        if self.horizon < 0 or (self.horizon == 0) != (self.n_rebalances == 0):
            raise ValueError(f"horizon {self.horizon} inconsistent with "
                             f"{self.n_rebalances} rebalances")
        if not self.q_min <= self.q_max:
            raise ValueError(f"q_min={self.q_min} exceeds q_max={self.q_max}")
        if not 0 < self.alpha <= 1:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.kappa < 0:
            raise ValueError(f"kappa must be nonnegative, got {self.kappa}")

    @property
    def dt(self) -> float:
        """Years between rebalances (constant spacing)."""
        if self.n_rebalances == 0:
            return 0.0
        return self.horizon / self.n_rebalances

    @property
    def pure_shortfall(self) -> bool:
        """True for the kappa = infinity objective (risk term only)."""
        return math.isinf(self.kappa)

    def rebalance_times(self):
        """t_i in years for i = 0..M."""
        import numpy as np

        return np.arange(self.n_rebalances + 1) * self.dt

    def to_dict(self) -> dict:
        return {
            "horizon": self.horizon,
            "n_rebalances": self.n_rebalances,
            "w0": self.w0,
            "q_min": self.q_min,
            "q_max": self.q_max,
            "kappa": "inf" if math.isinf(self.kappa) else self.kappa,
            "alpha": self.alpha,
            "epsilon": self.epsilon,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        if d.get("kappa") == "inf":
            d["kappa"] = math.inf
        return cls(**d)
