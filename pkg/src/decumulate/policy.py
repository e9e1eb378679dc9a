"""Feed-forward withdrawal/allocation policies with constraint-encoding outputs.

Two small dense networks map (standardized wealth, time) to controls.  The
withdrawal head is a sigmoid rescaled into the admissible range
[q_min, min(q_max, wealth)] and the allocation head is a 2-way softmax, so
every forward pass produces an admissible control and training can be plain
unconstrained optimization.

Networks are evaluated and differentiated by hand (the models are tiny and
the surrounding rollout needs custom reverse-mode plumbing anyway).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from .market import PathSet
from .scenario import ScenarioConfig

CHECKPOINT_VERSION = 1

# Constant reference strategy used only to produce wealth standardization
# statistics: any reasonable values work, these sit mid-range.
REFERENCE_WITHDRAWAL = 40.0
REFERENCE_STOCK_FRACTION = 0.5


class CheckpointError(ValueError):
    """Raised for unreadable, corrupted or incompatible checkpoints."""


@dataclass(frozen=True)
class NetSpec:
    n_inputs: int = 2
    hidden_layers: int = 2
    nodes_per_layer: int = 10
    n_outputs: int = 1
    biases: bool = True

    def __post_init__(self):
        if self.hidden_layers < 1 or self.nodes_per_layer < 1:
            raise ValueError("hidden_layers and nodes_per_layer must be >= 1")

    def layer_shapes(self) -> list[tuple[int, int]]:
        dims = [self.n_inputs] + [self.nodes_per_layer] * self.hidden_layers + [self.n_outputs]
        return [(dims[k], dims[k + 1]) for k in range(len(dims) - 1)]


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # scipy's expit: overflow-safe logistic in one ufunc call.
    return expit(x)


class Net:
    """Dense network, sigmoid hidden activations, linear output layer."""

    def __init__(self, spec: NetSpec, weights: list[np.ndarray], biases: list[np.ndarray]):
        shapes = spec.layer_shapes()
        if len(weights) != len(shapes) or len(biases) != len(shapes):
            raise ValueError(f"expected {len(shapes)} layers, got {len(weights)}")
        for w, b, shape in zip(weights, biases, shapes):
            if w.shape != shape or b.shape != (shape[1],):
                raise ValueError(f"layer shape mismatch: {w.shape} vs {shape}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError("network parameters must be finite")
        self.spec = spec
        self.weights = weights
        self.biases = biases

    @classmethod
    def init(cls, spec: NetSpec, rng: np.random.Generator) -> "Net":
        """Zero-mean uniform init with per-layer scale 1/sqrt(fan_in)."""
        weights, biases = [], []
        for fan_in, fan_out in spec.layer_shapes():
            scale = 1.0 / math.sqrt(fan_in)
            weights.append(rng.uniform(-scale, scale, size=(fan_in, fan_out)))
            if spec.biases:
                biases.append(rng.uniform(-scale, scale, size=fan_out))
            else:
                biases.append(np.zeros(fan_out))
        return cls(spec, weights, biases)

    def copy(self) -> "Net":
        return Net(self.spec, [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def parameters(self) -> list[np.ndarray]:
        return self.weights + self.biases

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        """Return (output, cache); cache holds the input and hidden activations."""
        a = np.asarray(x, dtype=np.float64)
        cache = [a]
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ w + b
            a = z if k == last else _sigmoid(z)
            if k != last:
                cache.append(a)
        return a, cache

    def backward(self, cache: list[np.ndarray], upstream: np.ndarray
                 ) -> tuple[list[np.ndarray], list[np.ndarray], np.ndarray]:
        """Exact reverse-mode sweep.

        ``upstream`` is dL/d(output); returns (dL/dW per layer, dL/db per
        layer, dL/dinput).
        """
        grads_w = [None] * len(self.weights)
        grads_b = [None] * len(self.weights)
        delta = np.asarray(upstream, dtype=np.float64)
        for k in range(len(self.weights) - 1, -1, -1):
            a_prev = cache[k]
            grads_w[k] = a_prev.T @ delta
            grads_b[k] = delta.sum(axis=0)
            delta = delta @ self.weights[k].T
            if k > 0:
                h = cache[k]           # sigmoid activation of layer k
                delta = delta * h * (1.0 - h)
        return grads_w, grads_b, delta


def net_forward_backward(net: Net, x: np.ndarray, upstream: np.ndarray
                         ) -> tuple[np.ndarray, list[np.ndarray], np.ndarray]:
    """Forward pass plus exact gradients of sum(upstream * output).

    Returns (output, parameter gradients ordered weights-then-biases,
    gradient with respect to the input).
    """
    out, cache = net.forward(x)
    if np.asarray(upstream).shape != out.shape:
        raise ValueError(f"upstream shape {np.asarray(upstream).shape} != output shape {out.shape}")
    gw, gb, gx = net.backward(cache, upstream)
    return out, gw + gb, gx


@dataclass(frozen=True)
class StandardizationStats:
    """Per-rebalance-time wealth mean and standard deviation (length M+1)."""

    mean: np.ndarray
    sd: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        sd = np.asarray(self.sd, dtype=np.float64)
        if mean.shape != sd.shape or mean.ndim != 1:
            raise ValueError("mean and sd must be 1-D arrays of equal length")
        if np.any(sd <= 0):
            raise ValueError("standard deviations must be positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "sd", sd)


def standardize(w, i: int, stats: StandardizationStats):
    """(w - mean_i) / sd_i."""
    if not 0 <= i < len(stats.mean):
        raise IndexError(f"rebalance index {i} outside 0..{len(stats.mean) - 1}")
    return (w - stats.mean[i]) / stats.sd[i]


def reference_stats(paths: PathSet, scenario: ScenarioConfig) -> StandardizationStats:
    """Wealth mean/sd per rebalance time under the constant reference strategy.

    The reference strategy withdraws a fixed amount and rebalances to a fixed
    split every period; statistics are taken on wealth before withdrawal.
    Degenerate deviations are floored so standardization stays well defined.
    """
    if paths.n_paths == 0:
        raise ValueError("paths must be nonempty")
    m = scenario.n_rebalances
    rs, rb = paths.stock, paths.bond
    w = np.full(paths.n_paths, scenario.w0)
    mean = np.empty(m + 1)
    sd = np.empty(m + 1)
    for i in range(m + 1):
        mean[i] = w.mean()
        sd[i] = w.std()
        if i < m:
            w_plus = w - REFERENCE_WITHDRAWAL
            solvent = w_plus > 0
            p = np.where(solvent, REFERENCE_STOCK_FRACTION, 0.0)
            w = w_plus * (p * rs[:, i] + (1.0 - p) * rb[:, i])
    floor = 1e-8 * np.abs(mean) + 1e-8
    return StandardizationStats(mean, np.maximum(sd, floor))


@dataclass
class PolicyPair:
    """The trained object: both networks, input statistics and the tail level W*."""

    q_net: Net
    p_net: Net
    stats: StandardizationStats
    w_star: float
    scenario: ScenarioConfig
    seed: int | None = field(default=None)

    def __post_init__(self):
        if not math.isfinite(self.w_star):
            raise ValueError(f"w_star must be finite, got {self.w_star}")

    def copy(self) -> "PolicyPair":
        return PolicyPair(self.q_net.copy(), self.p_net.copy(), self.stats,
                          self.w_star, self.scenario, self.seed)

    def times(self) -> np.ndarray:
        return self.scenario.rebalance_times()

    # Rollout-facing interface (shared with tabulated and constant policies).
    def withdrawal(self, w_minus: np.ndarray, i: int) -> np.ndarray:
        return withdrawal_forward(self, w_minus, i)

    def allocation(self, w_plus: np.ndarray, i: int) -> np.ndarray:
        return allocation_forward(self, w_plus, i)


def withdrawal_range(w_minus, q_min: float, q_max: float):
    """Width of the admissible withdrawal interval at wealth ``w_minus``."""
    return np.maximum(np.minimum(q_max, w_minus) - q_min, 0.0)


def withdrawal_forward(pair: PolicyPair, w_minus, i: int):
    """Admissible withdrawal amount: q_min + range * sigmoid(net output)."""
    sc = pair.scenario
    w_minus = np.asarray(w_minus, dtype=np.float64)
    if sc.pure_shortfall:
        return np.full(w_minus.shape, sc.q_min)
    x = np.stack([standardize(w_minus, i, pair.stats),
                  np.full(w_minus.shape, i * sc.dt)], axis=-1)
    z, _ = pair.q_net.forward(x.reshape(-1, 2))
    sig = _sigmoid(z[:, 0]).reshape(w_minus.shape)
    return sc.q_min + withdrawal_range(w_minus, sc.q_min, sc.q_max) * sig


def allocation_forward(pair: PolicyPair, w_plus, i: int):
    """Stock fraction in [0, 1] from the 2-way softmax head.

    Valid for i < M; the rollout (not this function) forces p = 0 at the
    final time and on insolvent states.
    """
    sc = pair.scenario
    if i >= sc.n_rebalances:
        raise IndexError(f"no allocation at the final liquidation (i={i})")
    w_plus = np.asarray(w_plus, dtype=np.float64)
    x = np.stack([standardize(w_plus, i, pair.stats),
                  np.full(w_plus.shape, i * sc.dt)], axis=-1)
    logits, _ = pair.p_net.forward(x.reshape(-1, 2))
    # Two-class softmax reduces to a sigmoid of the logit difference.
    p = _sigmoid(logits[:, 0] - logits[:, 1])
    return p.reshape(w_plus.shape)


def cold_start_pair(scenario: ScenarioConfig, stats: StandardizationStats,
                    seed: int, w_star: float = 0.0,
                    spec: NetSpec | None = None) -> PolicyPair:
    """Randomly initialized PolicyPair ('cold start')."""
    spec = spec or NetSpec()
    rng = np.random.Generator(np.random.Philox(key=[np.uint64(seed), np.uint64(0)]))
    q_net = Net.init(replace(spec, n_outputs=1), rng)
    p_net = Net.init(replace(spec, n_outputs=2), rng)
    return PolicyPair(q_net, p_net, stats, float(w_star), scenario, seed=seed)


def _net_to_dict(net: Net) -> dict:
    return {
        "spec": vars(net.spec).copy(),
        "weights": [w.tolist() for w in net.weights],
        "biases": [b.tolist() for b in net.biases],
    }


def _net_from_dict(d: dict) -> Net:
    spec = NetSpec(**d["spec"])
    return Net(spec, [np.array(w, dtype=np.float64) for w in d["weights"]],
               [np.array(b, dtype=np.float64) for b in d["biases"]])


def _payload_digest(payload: dict) -> str:
    canon = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def save_checkpoint(pair: PolicyPair, path) -> None:
    """Versioned JSON checkpoint; floats round-trip bit-exactly via repr."""
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "scenario": pair.scenario.to_dict(),
        "kappa": pair.scenario.to_dict()["kappa"],
        "q_net": _net_to_dict(pair.q_net),
        "p_net": _net_to_dict(pair.p_net),
        "stats": {"mean": pair.stats.mean.tolist(), "sd": pair.stats.sd.tolist()},
        "w_star": pair.w_star,
        "rng_seed": pair.seed,
    }
    payload["sha256"] = _payload_digest({k: v for k, v in payload.items() if k != "sha256"})
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_checkpoint(path) -> PolicyPair:
    try:
        with open(path) as fh:
            payload = json.load(fh)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupted checkpoint ({exc})") from None
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported format_version "
                              f"{payload.get('format_version')}")
    stored = payload.pop("sha256", None)
    if stored != _payload_digest(payload):
        raise CheckpointError(f"{path}: payload digest mismatch")
    stats = StandardizationStats(np.array(payload["stats"]["mean"]),
                                 np.array(payload["stats"]["sd"]))
    return PolicyPair(
        q_net=_net_from_dict(payload["q_net"]),
        p_net=_net_from_dict(payload["p_net"]),
        stats=stats,
        w_star=float(payload["w_star"]),
        scenario=ScenarioConfig.from_dict(payload["scenario"]),
        seed=payload.get("rng_seed"),
    )
