"""Optimal retirement decumulation toolkit.

A constrained withdrawal/allocation problem solved two ways: a pair of small
neural networks trained on sampled return paths, and a dynamic-programming
solver on a log-asset grid whose stored controls serve as ground truth.
"""

__version__ = "0.1.0"

from .bootstrap import BootstrapConfig, ReturnSeries, load_series, stationary_block_bootstrap
from .hjb import GridSpec, HjbSolver, StoredControls, ValueGrid, default_grid, \
    load_controls, rollout_stored_controls, save_controls
from .market import AssetJumpParams, CRSP_MARKET, MarketParams, PathSet, \
    export_pathset_csv, jump_compensator, load_pathset, sample_period_return, \
    save_pathset, simulate_paths
from .objective import FrontierPoint, RolloutResult, bengen_policy, empirical_es, \
    evaluate_policy, heatmap_report, objective_value, percentile_report, \
    rockafellar_es, rollout
from .policy import Net, NetSpec, PolicyPair, StandardizationStats, load_checkpoint, \
    net_forward_backward, reference_stats, save_checkpoint, standardize, \
    withdrawal_forward, allocation_forward
from .scenario import ScenarioConfig
from .trainer import TrainConfig, adam_step, frontier_sweep, prepare_cold_pair, train

__all__ = [
    "AssetJumpParams", "BootstrapConfig", "CRSP_MARKET", "FrontierPoint", "GridSpec",
    "HjbSolver", "MarketParams", "Net", "NetSpec", "PathSet", "PolicyPair",
    "ReturnSeries", "RolloutResult", "ScenarioConfig", "StandardizationStats",
    "StoredControls", "TrainConfig", "ValueGrid", "adam_step", "allocation_forward",
    "bengen_policy", "default_grid", "empirical_es", "evaluate_policy",
    "export_pathset_csv", "frontier_sweep", "heatmap_report", "jump_compensator",
    "load_checkpoint", "load_controls", "load_pathset", "load_series",
    "net_forward_backward", "objective_value", "percentile_report",
    "prepare_cold_pair", "reference_stats", "rockafellar_es", "rollout",
    "rollout_stored_controls", "sample_period_return", "save_checkpoint",
    "save_controls", "save_pathset", "simulate_paths", "standardize",
    "stationary_block_bootstrap", "train", "withdrawal_forward",
]
