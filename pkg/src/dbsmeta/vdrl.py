"""
Value-decomposition policy-gradient training at one realization.

The joint value of the fleet is only ever formed as the sum of the per-DBS
values. Each DBS updates its own value network by descending the squared team
advantage (residual gradient through both value terms) and its own policy by
ascending the individual advantage weighted score.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np
import pandas as pd
from tqdm import tqdm

from .approx import (
    ParamSet,
    forward_policy,
    grad_log_prob_array,
    grad_value_array,
    policy_entropy,
    value_array,
)
from .errors import ConfigError, ContractError, NumericError
from .sim import greedy_rollout, rollout
from .world import TaskDistribution, link_table, sample_realization

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class StepSchedule:
    """Robbins-Monro step size alpha(i) = a / (b + i)^p with p in (0.5, 1]."""

    a: float
    b: float = 1.0
    p: float = 0.6

    def __post_init__(self):
        if not self.a > 0 or not self.b > 0:
            raise ConfigError("step schedule needs a > 0 and b > 0 (got a={}, b={})".format(self.a, self.b))
        if not 0.5 < self.p <= 1.0:
            raise ConfigError("step schedule exponent p must lie in (0.5, 1], got {}".format(self.p))

    def __call__(self, i):
        return self.a / (self.b + i) ** self.p


def validate_schedule(fn, horizon=1000):
    """Accept a custom step-size callable only if it is positive, finite and nonincreasing."""
    values = np.array([fn(i) for i in range(horizon)], dtype=np.float64)
    if not np.all(np.isfinite(values)) or np.any(values <= 0):
        raise ConfigError("step schedule must be positive and finite")
    if np.any(np.diff(values) > 0):
        raise ConfigError("step schedule must be nonincreasing")
    return fn


@dataclass(frozen=True)
class TrainConfig:
    """Settings of one VD-RL run.

    Parameters
    ----------
    max_iterations : int
        Iteration budget I
    discount : float
        Discount factor in (0, 1]
    value_schedule, policy_schedule : callable
        Step sizes alpha_c(i), alpha_a(i)
    convergence_window : int
        Window W of the moving-mean convergence test
    convergence_tol : float
        Absolute tolerance on the change of the windowed mean of G
    stop_on_convergence : bool
        End the loop at the first converged iteration
    scale_team_reward : bool
        Multiply the team reward by N in the team advantage
    semi_gradient : bool
        Detach the bootstrap target in the value update
    checkpoint_interval : int
        Call the checkpoint hook every this many iterations (0 disables it)
    progress : bool
        Show a tqdm bar
    seed : int
        Run seed used by the harness
    """

    max_iterations: int = 2000
    discount: float = 0.95
    value_schedule: Callable[[int], float] = StepSchedule(0.01, 1.0, 0.6)
    policy_schedule: Callable[[int], float] = StepSchedule(0.005, 1.0, 0.6)
    convergence_window: int = 100
    convergence_tol: float = 1.0e-3
    stop_on_convergence: bool = False
    scale_team_reward: bool = True
    semi_gradient: bool = False
    checkpoint_interval: int = 0
    progress: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.max_iterations < 0:
            raise ConfigError("train.max_iterations must be nonnegative")
        if not 0.0 < self.discount <= 1.0:
            raise ConfigError("train.discount must lie in (0, 1]")
        if self.convergence_window < 1:
            raise ConfigError("train.convergence_window must be at least 1")
        for schedule in (self.value_schedule, self.policy_schedule):
            if not isinstance(schedule, StepSchedule):
                validate_schedule(schedule)


@dataclass
class TrainResult:
    params: ParamSet
    metrics: List[dict] = field(default_factory=list)
    converged: bool = False
    converged_at: Optional[int] = None

    def metrics_frame(self):
        return pd.DataFrame(self.metrics)

    @property
    def utilities(self):
        return np.array([row["G"] for row in self.metrics], dtype=np.float64)


def _check_aligned(experiences):
    steps = len(experiences[0])
    for n, exp in enumerate(experiences):
        if len(exp) != steps or exp.features.shape[0] != steps + 1:
            raise ContractError("experience of DBS {} has {} steps, expected {}".format(n, len(exp), steps))
        if not np.array_equal(exp.rewards, experiences[0].rewards):
            raise ContractError("experience of DBS {} carries a different team reward".format(n))
    return steps


def state_values(theta, shape, features):
    """Values at the K+1 states of one experience; the terminal value is 0."""
    values = [value_array(theta, shape, x) for x in features[:-1]]
    values.append(0.0)
    return np.array(values)


def advantages_array(value_thetas, shape, experiences, discount, scale_team_reward=True):
    """Team advantage A (K,) and individual advantages A~ (N, K) on raw parameter arrays."""
    values = np.array([state_values(theta, shape, exp.features) for theta, exp in zip(value_thetas, experiences)])
    rewards = experiences[0].rewards
    team_reward = len(experiences) * rewards if scale_team_reward else rewards
    team = team_reward + discount * values[:, 1:].sum(axis=0) - values[:, :-1].sum(axis=0)
    individual = rewards + discount * values[:, 1:] - values[:, :-1]
    return team, individual


def team_advantage(experiences, value_params, discount, scale_team_reward=True):
    """Team advantage and its per-DBS decomposition.

    Parameters
    ----------
    experiences : sequence of Experience
        One experience per DBS, aligned to K steps
    value_params : sequence of ParamVector
        Individual value networks
    discount : float
        Discount factor
    scale_team_reward : bool, optional
        Multiply the team reward by N in A

    Returns
    -------
    tuple of ndarray
        A with shape (K,) and A~ with shape (N, K). With the N factor the
        individual advantages sum to A.
    """
    if len(experiences) != len(value_params):
        raise ContractError("{} experiences for {} value networks".format(len(experiences), len(value_params)))
    _check_aligned(experiences)
    return advantages_array([p.values for p in value_params], value_params[0].shape, experiences, discount,
                            scale_team_reward)


def value_direction(theta, shape, features, weights, discount, semi_gradient=False):
    """sum_k w_k (gamma grad V(s_{k+1}) - grad V(s_k)); with ``semi_gradient`` only -sum_k w_k grad V(s_k)."""
    steps = len(weights)
    direction = np.zeros_like(theta, dtype=np.result_type(theta, weights))
    grads = [grad_value_array(theta, shape, features[k]) for k in range(steps)]
    for k in range(steps):
        term = -grads[k]
        if not semi_gradient and k + 1 < steps:
            term = term + discount * grads[k + 1]
        direction = direction + weights[k] * term
    return direction


def score_direction(theta, shape, features, actions, masks, weights):
    """sum_k w_k grad log pi(a_k | s_k)."""
    direction = np.zeros_like(theta, dtype=np.result_type(theta, weights))
    for k, (slot, mask) in enumerate(zip(actions, masks)):
        direction = direction + weights[k] * grad_log_prob_array(theta, shape, features[k], slot, mask)
    return direction


def _finite(values, what, iteration):
    if not np.all(np.isfinite(values)):
        raise NumericError("non-finite {} update".format(what), iteration=iteration)
    return values


def value_step(theta_c, experience, team_adv, alpha, discount, semi_gradient=False, iteration=None):
    """Residual-gradient update theta - 2 alpha sum_k A_k (gamma grad V(s_{k+1}) - grad V(s_k))."""
    direction = value_direction(theta_c.values, theta_c.shape, experience.features, np.asarray(team_adv),
                                discount, semi_gradient)
    return theta_c.replace(_finite(theta_c.values - 2.0 * alpha * direction, "value", iteration))


def policy_step(theta_a, experience, indiv_adv, alpha, iteration=None):
    """Policy-gradient ascent theta + alpha sum_k A~_k grad log pi(a_k | s_k)."""
    direction = score_direction(theta_a.values, theta_a.shape, experience.features, experience.actions,
                                experience.masks, np.asarray(indiv_adv))
    return theta_a.replace(_finite(theta_a.values + alpha * direction, "policy", iteration))


def vdrl_step(params, experiences, alpha_c, alpha_a, discount, scale_team_reward=True, semi_gradient=False,
              iteration=None):
    """One VD-RL update of all DBSs from one episode.

    Returns
    -------
    tuple
        (updated ParamSet, A, A~) with the advantages taken before the value update
    """
    team, individual = team_advantage(experiences, params.value, discount, scale_team_reward)
    value = tuple(value_step(params.value[n], exp, team, alpha_c, discount, semi_gradient, iteration)
                  for n, exp in enumerate(experiences))
    policy = tuple(policy_step(params.policy[n], exp, individual[n], alpha_a, iteration)
                   for n, exp in enumerate(experiences))
    return ParamSet(policy, value), team, individual


def mean_entropy(policies, experiences):
    """Mean policy entropy over the decision states each DBS actually visited with a real choice."""
    entropies = []
    for theta, exp in zip(policies, experiences):
        for k in range(len(exp)):
            if exp.masks[k].sum() > 1:
                entropies.append(policy_entropy(forward_policy(theta, exp.features[k], exp.masks[k])))
    return math.fsum(entropies) / len(entropies) if entropies else 0.0


def converged_at(history, window, tol):
    """First iteration count i >= 2W at which the windowed mean of G moved by less than ``tol``."""
    g = np.asarray(history, dtype=np.float64)
    for i in range(2 * window, g.size + 1):
        if abs(g[i - window:i].mean() - g[i - 2 * window:i - window].mean()) < tol:
            return i
    return None


def iterations_to_threshold(history, target, window=20):
    """First iteration at which the trailing mean of G over ``window`` reaches ``target``.

    Returns ``len(history)`` when the target is never reached.
    """
    g = pd.Series(np.asarray(history, dtype=np.float64))
    rolling = g.rolling(window).mean().to_numpy()
    hits = np.flatnonzero(rolling >= target - 1.0e-12)
    return int(hits[0]) if hits.size else int(g.size)


def greedy_trajectory(world, z, params):
    """Most probable joint trajectory of the current policies and its outcome."""
    _, outcome = greedy_rollout(world, z, params.policy)
    return outcome.trajectory, outcome


def _metrics_row(i, outcome, params, experiences, team, entropy):
    """One metrics line; values are those of the updated networks at the visited states."""
    row = {"iteration": i, "G": outcome.utility, "r_sum": math.fsum(outcome.rewards)}
    values = [state_values(theta.values, theta.shape, exp.features)[:-1]
              for theta, exp in zip(params.value, experiences)]
    for n, v in enumerate(values):
        row["value_dbs{}".format(n)] = float(v[0])
    for n, v in enumerate(values):
        for k, value in enumerate(v):
            row["value_dbs{}_step{}".format(n, k)] = float(value)
    row["advantage_l2"] = float(np.linalg.norm(team))
    row["entropy"] = entropy
    return row


def run_training(world, z, init, cfg, rng, step, checkpoint=None, desc="train"):
    """Shared iteration loop: rollout, update via ``step``, record metrics.

    ``step(params, experiences, i)`` returns (new params, advantage vector for the metrics).
    ``z`` is a RequestRealization, or a TaskDistribution redrawn every iteration.
    """
    redraw = isinstance(z, TaskDistribution)
    table = None if redraw else link_table(world, z)
    result = TrainResult(params=init)
    params = init
    history = []
    for i in tqdm(range(cfg.max_iterations), desc=desc, disable=not cfg.progress):
        episode_z = sample_realization(z, world, rng) if redraw else z
        experiences, outcome = rollout(world, episode_z, params.policy, rng, table)
        entropy = mean_entropy(params.policy, experiences)
        params, adv = step(params, experiences, i)
        result.metrics.append(_metrics_row(i, outcome, params, experiences, adv, entropy))
        history.append(outcome.utility)
        if checkpoint is not None and cfg.checkpoint_interval and (i + 1) % cfg.checkpoint_interval == 0:
            checkpoint(i, params)
        window = cfg.convergence_window
        if not result.converged and len(history) >= 2 * window:
            if converged_at(history[-2 * window:], window, cfg.convergence_tol) is not None:
                result.converged, result.converged_at = True, i
                logger.info("%s: G converged at iteration %d (windowed mean %.4f)", desc, i,
                            float(np.mean(history[-cfg.convergence_window:])))
                if cfg.stop_on_convergence:
                    break
    result.params = params
    return result


def train(world, z, init, cfg, rng, checkpoint=None):
    """Run VD-RL from ``init``.

    Parameters
    ----------
    world : WorldConfig
        Scenario
    z : RequestRealization or TaskDistribution
        Fixed realization, or a distribution redrawn every iteration
    init : ParamSet
        Initial parameters
    cfg : TrainConfig
        Settings
    rng : numpy.random.Generator
        Stream for action sampling (and realizations when redrawing)
    checkpoint : callable, optional
        ``checkpoint(i, params)`` hook called every ``cfg.checkpoint_interval`` iterations

    Returns
    -------
    TrainResult
    """

    def step(params, experiences, i):
        new, team, _ = vdrl_step(params, experiences, cfg.value_schedule(i), cfg.policy_schedule(i), cfg.discount,
                                 cfg.scale_team_reward, cfg.semi_gradient, iteration=i)
        return new, team

    return run_training(world, z, init, cfg, rng, step, checkpoint, desc="vdrl")
