"""Minibatch Adam training of the policy pair on sampled return paths.

The sampled objective is differentiated exactly through the whole wealth
recursion: a control at time i moves wealth at every later time, and those
pathwise effects are carried by hand-rolled reverse-mode sweeps over the
rebalance periods.  The optimizer ascends the objective by descending its
negation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .market import MarketParams, PathSet
from .objective import ConstantPolicy, evaluate_policy, objective_value, rollout, value_at_risk
from .policy import (
    REFERENCE_STOCK_FRACTION,
    REFERENCE_WITHDRAWAL,
    Net,
    PolicyPair,
    _sigmoid,
    cold_start_pair,
    reference_stats,
    save_checkpoint,
    withdrawal_range,
)
from .scenario import ScenarioConfig

ADAM_EPS = 1e-8


class TrainingError(RuntimeError):
    """Raised when training produces non-finite values."""


@dataclass(frozen=True)
class TrainConfig:
    n_iterations: int = 50_000
    batch_size: int = 1_000
    lr_params: float = 0.05
    lr_wstar: float = 0.04
    decay_milestones: tuple[float, ...] = (0.70, 0.97)   # fractions of n_iterations
    decay_factor: float = 0.20
    adam_beta1: float = 0.9
    adam_beta2: float = 0.998
    weight_decay: float = 1e-4
    eval_every: int = 500    # full-dataset objective cadence for best tracking
    seed: int = 0

    def __post_init__(self):
        if min(self.n_iterations, self.batch_size, self.eval_every) <= 0:
            raise ValueError("n_iterations, batch_size and eval_every must be positive")
        if not all(0 < f <= 1 for f in self.decay_milestones):
            raise ValueError("decay milestones must be fractions in (0, 1]")
        if self.lr_params <= 0 or self.lr_wstar <= 0 or self.decay_factor <= 0:
            raise ValueError("learning rates and decay factor must be positive")


class AdamState:
    """First/second moment buffers for a list of parameter arrays."""

    def __init__(self, params: list[np.ndarray], beta1: float, beta2: float):
        self.beta1 = beta1
        self.beta2 = beta2
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]


def adam_step(state: AdamState, params: list[np.ndarray],
              grads: list[np.ndarray], lr: float) -> None:
    """Standard bias-corrected Adam update, in place."""
    state.t += 1
    b1, b2, t = state.beta1, state.beta2, state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * np.square(g)
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        p -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


@dataclass
class TrainState:
    """Mutable bookkeeping for one training run."""

    net_adam: AdamState
    wstar_adam: AdamState
    iteration: int = 0
    best_objective: float = -math.inf
    best_q: Net | None = None
    best_p: Net | None = None
    best_wstar: float = 0.0
    history: list[tuple] = field(default_factory=list)   # (iter, batch_obj, full_obj, lr, w_star)


def _objective_and_grads(pair: PolicyPair, scenario: ScenarioConfig,
                         returns: np.ndarray, spread_growth: float):
    """Sampled objective on one batch plus exact gradients.

    Returns (objective, q-net grads, p-net grads, dJ/dw*); gradients are of
    the objective itself (ascent direction), shaped like net.parameters().
    """
    q_net, p_net, stats = pair.q_net, pair.p_net, pair.stats
    w_star = pair.w_star
    m = scenario.n_rebalances
    b = returns.shape[0]
    dt = scenario.dt
    pure = scenario.pure_shortfall
    rs, rb = returns[:, :, 0], returns[:, :, 1]

    w = np.full(b, scenario.w0)
    q_total = np.zeros(b)
    fwd = []
    for i in range(m + 1):
        step = {"w_minus": w}
        if pure:
            q = np.full(b, scenario.q_min)
        else:
            xq = np.stack([(w - stats.mean[i]) / stats.sd[i], np.full(b, i * dt)], axis=1)
            z, cache_q = q_net.forward(xq)
            sig = _sigmoid(z[:, 0])
            rng_w = withdrawal_range(w, scenario.q_min, scenario.q_max)
            q = scenario.q_min + rng_w * sig
            step.update(cache_q=cache_q, sig=sig, range=rng_w)
        q_total += q
        w_plus = w - q
        if i < m:
            solvent = w_plus > 0
            xp = np.stack([(w_plus - stats.mean[i]) / stats.sd[i], np.full(b, i * dt)], axis=1)
            logits, cache_p = p_net.forward(xp)
            p = _sigmoid(logits[:, 0] - logits[:, 1])
            p_eff = np.where(solvent, p, 0.0)
            growth = np.where(solvent, p_eff * rs[:, i] + (1.0 - p_eff) * rb[:, i],
                              rb[:, i] * spread_growth)
            step.update(w_plus=w_plus, solvent=solvent, cache_p=cache_p, p=p, growth=growth)
            w = w_plus * growth
        else:
            w = w_plus
        fwd.append(step)

    w_t = w
    shortfall = np.minimum(w_t - w_star, 0.0)
    risk = w_star + shortfall.mean() / scenario.alpha
    stab = scenario.epsilon * w_t.mean()
    obj = risk + stab if pure else q_total.mean() + scenario.kappa * risk + stab
    if not np.isfinite(obj):
        raise TrainingError("non-finite batch objective")

    kappa_eff = 1.0 if pure else scenario.kappa
    tail = w_t <= w_star        # ties count as shortfall (left limit)
    # dJ/dW_T and dJ/dw*, per path / aggregated.
    g_w = (kappa_eff / scenario.alpha * (w_t < w_star) + scenario.epsilon) / b
    d_wstar = kappa_eff * np.mean(1.0 - tail / scenario.alpha)

    zeros_q = [np.zeros_like(p) for p in q_net.parameters()]
    zeros_p = [np.zeros_like(p) for p in p_net.parameters()]
    gq, gp = zeros_q, zeros_p
    for i in range(m, -1, -1):
        step = fwd[i]
        if i == m:
            g_plus = g_w
        else:
            g_plus = g_w * step["growth"]
            solvent = step["solvent"]
            d_p = np.where(solvent, g_w * step["w_plus"] * (rs[:, i] - rb[:, i]), 0.0)
            p = step["p"]
            d_logit = d_p * p * (1.0 - p)
            upstream = np.stack([d_logit, -d_logit], axis=1)
            gw_p, gb_p, dx_p = p_net.backward(step["cache_p"], upstream)
            for acc, g in zip(gp, gw_p + gb_p):
                acc += g
            g_plus = g_plus + np.where(solvent, dx_p[:, 0] / pair.stats.sd[i], 0.0)
        if pure:
            g_w = g_plus
        else:
            d_q = 1.0 / b - g_plus
            sig = step["sig"]
            d_z = d_q * step["range"] * sig * (1.0 - sig)
            gw_q, gb_q, dx_q = q_net.backward(step["cache_q"], d_z[:, None])
            for acc, g in zip(gq, gw_q + gb_q):
                acc += g
            w_minus = step["w_minus"]
            on_ramp = (w_minus > scenario.q_min) & (w_minus < scenario.q_max)
            g_w = g_plus + d_q * sig * on_ramp + dx_q[:, 0] / pair.stats.sd[i]
    return obj, gq, gp, d_wstar


def full_objective(pair: PolicyPair, paths: PathSet, scenario: ScenarioConfig,
                   market: MarketParams | None = None) -> float:
    res = rollout(pair, paths, scenario, market)
    return objective_value(res, scenario, pair.w_star)


def initial_w_star(paths: PathSet, scenario: ScenarioConfig,
                   market: MarketParams | None = None) -> float:
    """Cold-start W*: the alpha-level VaR under the constant reference strategy.

    W* candidates live among attainable terminal wealths, so this puts the
    optimizer in the right neighborhood instead of an arbitrary zero.
    """
    ref = ConstantPolicy(REFERENCE_WITHDRAWAL, REFERENCE_STOCK_FRACTION)
    res = rollout(ref, paths, scenario, market)
    return value_at_risk(res.terminal_wealth, scenario.alpha)


def train(pair: PolicyPair, paths: PathSet, scenario: ScenarioConfig,
          config: TrainConfig, market: MarketParams | None = None,
          log_file=None) -> PolicyPair:
    """Run minibatch Adam ascent and return the best-tracked policy.

    Minibatches are drawn without replacement within each epoch and the path
    order is reshuffled every epoch.  Every ``config.eval_every`` iterations
    (and at the end) the full-dataset objective is computed and the running
    best parameters are retained; the returned pair is that best model.
    """
    work = pair.copy()
    work = PolicyPair(work.q_net, work.p_net, work.stats, work.w_star, scenario, work.seed)
    spread_growth = math.exp((market.borrow_spread if market else 0.0) * scenario.dt)
    net_params = work.q_net.parameters() + work.p_net.parameters()
    wstar_box = [np.array(work.w_star)]
    state = TrainState(
        net_adam=AdamState(net_params, config.adam_beta1, config.adam_beta2),
        wstar_adam=AdamState(wstar_box, config.adam_beta1, config.adam_beta2),
    )
    milestones = {int(f * config.n_iterations) for f in config.decay_milestones}
    lr_params, lr_wstar = config.lr_params, config.lr_wstar
    rng = np.random.Generator(np.random.Philox(key=[np.uint64(config.seed), np.uint64(1)]))
    returns = paths.gross_returns
    n = paths.n_paths
    order = rng.permutation(n)
    cursor = 0

    def snapshot(full_obj: float) -> None:
        if full_obj > state.best_objective:
            state.best_objective = full_obj
            state.best_q = work.q_net.copy()
            state.best_p = work.p_net.copy()
            state.best_wstar = float(wstar_box[0])

    for it in range(1, config.n_iterations + 1):
        if cursor + config.batch_size > n:
            order = rng.permutation(n)
            cursor = 0
        batch = order[cursor:cursor + config.batch_size]
        cursor += config.batch_size

        work.w_star = float(wstar_box[0])
        try:
            obj, gq, gp, d_wstar = _objective_and_grads(work, scenario, returns[batch],
                                                        spread_growth)
        except TrainingError as exc:
            raise TrainingError(f"iteration {it}: {exc}") from None
        # Descend the negated objective; l2 weight decay on net parameters only.
        grads = [-g + config.weight_decay * p for g, p in zip(gq + gp, net_params)]
        adam_step(state.net_adam, net_params, grads, lr_params)
        adam_step(state.wstar_adam, wstar_box, [np.array(-d_wstar)], lr_wstar)

        full = math.nan
        if it % config.eval_every == 0 or it == config.n_iterations:
            work.w_star = float(wstar_box[0])
            full = full_objective(work, paths, scenario, market)
            if not math.isfinite(full):
                raise TrainingError(f"iteration {it}: non-finite full-dataset objective")
            snapshot(full)
        state.iteration = it
        state.history.append((it, obj, full, lr_params, float(wstar_box[0])))
        if log_file is not None:
            log_file.write(f"{it},{obj!r},{'' if math.isnan(full) else repr(full)},"
                           f"{lr_params!r},{float(wstar_box[0])!r}\n")
        if it in milestones:
            lr_params *= config.decay_factor
            lr_wstar *= config.decay_factor

    best = PolicyPair(state.best_q, state.best_p, work.stats, state.best_wstar,
                      scenario, seed=config.seed)
    best.last_state = state
    return best


def prepare_cold_pair(paths: PathSet, scenario: ScenarioConfig, seed: int,
                      market: MarketParams | None = None) -> PolicyPair:
    """Reference stats + random nets + VaR-anchored W* for a fresh run."""
    stats = reference_stats(paths, scenario)
    w0_star = initial_w_star(paths, scenario, market)
    return cold_start_pair(scenario, stats, seed, w_star=w0_star)


def frontier_sweep(kappas, paths: PathSet, scenario: ScenarioConfig,
                   config: TrainConfig, market: MarketParams | None = None,
                   eval_paths: PathSet | None = None, checkpoint_dir=None,
                   progress=None):
    """Train the whole frontier, transferring weights up the kappa ladder.

    The smallest kappa starts cold; every later point warm-starts from the
    previous point's best model (W* included).  A training failure at one
    point falls back to a cold start for that point and the sweep continues.
    Returns (frontier points, trained pairs) in kappa order.
    """
    kappas = list(kappas)
    if any(k2 < k1 for k1, k2 in zip(kappas, kappas[1:])):
        raise ValueError("kappas must be ascending for transfer learning")
    points, pairs = [], []
    prev = None
    for k in kappas:
        sc_k = replace(scenario, kappa=k)
        if prev is None:
            start = prepare_cold_pair(paths, sc_k, config.seed, market)
        else:
            start = prev.copy()
        try:
            best = train(start, paths, sc_k, config, market)
        except TrainingError:
            cold = prepare_cold_pair(paths, sc_k, config.seed + 1, market)
            best = train(cold, paths, sc_k, config, market)
        prev = best
        pairs.append(best)
        point = evaluate_policy(best, eval_paths if eval_paths is not None else paths,
                                sc_k, best.w_star, market)
        points.append(point)
        if checkpoint_dir is not None:
            name = "kappa_inf" if math.isinf(k) else f"kappa_{k:g}"
            save_checkpoint(best, f"{checkpoint_dir}/{name}.ckpt")
        if progress is not None:
            progress(point)
    return points, pairs
