"""
Meta-training of VD-RL initializations over a request distribution.

Every meta iteration draws J realizations. For each one the initialization is
adapted by a single VD-RL step, a fresh episode is played with the adapted
policies, and the losses measured on it are differentiated with respect to the
initial parameters, either first-order (adapted parameters detached from the
initialization) or exactly through the inner step.

The exact mode uses complex-step differentiation of the whole inner-step and
loss pipeline with the sampled episodes held fixed; it costs one pipeline
evaluation per parameter and is meant for small networks.
"""

import enum
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import List

import numpy as np
import pandas as pd
from tqdm import tqdm

from .approx import ParamSet, log_prob_array
from .errors import ConfigError, NumericError, OracleCapExceeded
from .sim import enumerate_optimal, rollout
from .vdrl import (
    advantages_array,
    greedy_trajectory,
    iterations_to_threshold,
    score_direction,
    state_values,
    train,
    value_direction,
    vdrl_step,
)
from .world import ORIGIN, link_table, sample_realization

logger = logging.getLogger(__name__)

COMPLEX_STEP = 1.0e-20
TASK_STREAM = 1
HELD_OUT_STREAM = 2
ADAPTATION_STREAM = 3


class GradientMode(enum.Enum):
    FIRST_ORDER = "first_order"
    EXACT = "exact"


@dataclass(frozen=True)
class MetaConfig:
    """Settings of a meta-training run.

    Parameters
    ----------
    meta_iterations : int
        Number of meta iterations I
    tasks_per_iteration : int
        Realizations J drawn per meta iteration
    inner_value_step, inner_policy_step : float
        Fixed inner step sizes alpha_c, alpha_a
    meta_step : float
        Outer step size beta
    mode : GradientMode
        First-order or exact meta-gradient
    discount : float
        Discount factor
    scale_team_reward : bool
        N factor in the inner team advantage
    surrogate_sign : float
        Sign applied to the policy loss (+1 is the printed form)
    workers : int
        Threads running the per-task pipelines
    progress : bool
        Show a tqdm bar
    seed : int
        Seed of the task stream
    """

    meta_iterations: int = 200
    tasks_per_iteration: int = 4
    inner_value_step: float = 0.01
    inner_policy_step: float = 0.005
    meta_step: float = 0.001
    mode: GradientMode = GradientMode.FIRST_ORDER
    discount: float = 0.95
    scale_team_reward: bool = True
    surrogate_sign: float = 1.0
    workers: int = 1
    progress: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.meta_iterations < 0:
            raise ConfigError("meta.meta_iterations must be nonnegative")
        if self.tasks_per_iteration < 1:
            raise ConfigError("meta.tasks_per_iteration must be at least 1")
        if not self.meta_step > 0:
            raise ConfigError("meta.meta_step must be positive")
        if self.inner_value_step < 0 or self.inner_policy_step < 0:
            raise ConfigError("meta inner step sizes must be nonnegative")
        if self.surrogate_sign not in (1.0, -1.0):
            raise ConfigError("meta.surrogate_sign must be +1 or -1")
        if not isinstance(self.mode, GradientMode):
            raise ConfigError("meta.mode must be a GradientMode")


@dataclass
class MetaResult:
    params: ParamSet
    history: List[dict] = field(default_factory=list)

    def history_frame(self):
        return pd.DataFrame(self.history, columns=["meta_iteration", "L_c", "L_a"])


def meta_task_stream(world, dist, seed, iterations, per_iteration):
    """Realizations used by a meta run, one list of J per meta iteration."""
    rng = np.random.default_rng([seed, TASK_STREAM])
    return [[sample_realization(dist, world, rng) for _ in range(per_iteration)] for _ in range(iterations)]


def held_out_tasks(world, dist, seed, count):
    rng = np.random.default_rng([seed, HELD_OUT_STREAM])
    return [sample_realization(dist, world, rng) for _ in range(count)]


def inner_adapt(init, z, rng, world, cfg, table=None):
    """One VD-RL step from ``init`` on realization ``z``.

    Returns
    -------
    tuple
        (adapted ParamSet, adaptation experiences)
    """
    experiences, _ = rollout(world, z, init.policy, rng, table)
    adapted, _, _ = vdrl_step(init, experiences, cfg.inner_value_step, cfg.inner_policy_step, cfg.discount,
                              cfg.scale_team_reward)
    return adapted, experiences


def _losses_array(value_theta, policy_theta, value_shape, policy_shape, exp, discount, sign):
    values = state_values(value_theta, value_shape, exp.features)
    delta = exp.rewards + discount * values[1:] - values[:-1]
    log_probs = np.array([log_prob_array(policy_theta, policy_shape, exp.features[k], slot, exp.masks[k])
                          for k, slot in enumerate(exp.actions)])
    return np.sum(delta * delta), sign * np.sum(delta * log_probs), delta


def meta_losses(adapted, z, rng, world, cfg, table=None):
    """Evaluation losses of adapted parameters on a fresh episode.

    Returns
    -------
    tuple
        (ndarray (N, 2) of per-DBS (L_c, L_a), evaluation experiences)
    """
    experiences, _ = rollout(world, z, adapted.policy, rng, table)
    losses = np.zeros((adapted.num_dbs, 2))
    for n, exp in enumerate(experiences):
        l_c, l_a, _ = _losses_array(adapted.value[n].values, adapted.policy[n].values, adapted.value[n].shape,
                                    adapted.policy[n].shape, exp, cfg.discount, cfg.surrogate_sign)
        losses[n] = (l_c, l_a)
    return losses, experiences


def _first_order_gradient(adapted, eval_exps, cfg):
    grad_c, grad_a = [], []
    for n, exp in enumerate(eval_exps):
        theta_c, theta_a = adapted.value[n], adapted.policy[n]
        _, _, delta = _losses_array(theta_c.values, theta_a.values, theta_c.shape, theta_a.shape, exp,
                                    cfg.discount, cfg.surrogate_sign)
        grad_c.append(2.0 * value_direction(theta_c.values, theta_c.shape, exp.features, delta, cfg.discount))
        grad_a.append(cfg.surrogate_sign * score_direction(theta_a.values, theta_a.shape, exp.features,
                                                           exp.actions, exp.masks, delta))
    return grad_c, grad_a


def _pipeline(value_thetas, policy_thetas, shapes, inner_exps, eval_exps, cfg):
    """Summed (L_c, L_a) after one inner step, on raw (possibly complex) arrays with fixed episodes."""
    value_shape, policy_shape = shapes
    team, individual = advantages_array(value_thetas, value_shape, inner_exps, cfg.discount, cfg.scale_team_reward)
    l_c_total, l_a_total = 0.0, 0.0
    for n, (inner, evaluation) in enumerate(zip(inner_exps, eval_exps)):
        adapted_c = value_thetas[n] - 2.0 * cfg.inner_value_step * value_direction(
            value_thetas[n], value_shape, inner.features, team, cfg.discount)
        adapted_a = policy_thetas[n] + cfg.inner_policy_step * score_direction(
            policy_thetas[n], policy_shape, inner.features, inner.actions, inner.masks, individual[n])
        l_c, l_a, _ = _losses_array(adapted_c, adapted_a, value_shape, policy_shape, evaluation, cfg.discount,
                                    cfg.surrogate_sign)
        l_c_total = l_c_total + l_c
        l_a_total = l_a_total + l_a
    return l_c_total, l_a_total


def pipeline_losses(init, inner_exps, eval_exps, cfg):
    """Summed losses of the fixed-episode pipeline at real parameters."""
    shapes = (init.value[0].shape, init.policy[0].shape)
    l_c, l_a = _pipeline([v.values for v in init.value], [p.values for p in init.policy], shapes, inner_exps,
                         eval_exps, cfg)
    return float(np.real(l_c)), float(np.real(l_a))


def _exact_gradient(init, inner_exps, eval_exps, cfg):
    shapes = (init.value[0].shape, init.policy[0].shape)
    values = [v.values.astype(np.complex128) for v in init.value]
    policies = [p.values.astype(np.complex128) for p in init.policy]
    grad_c = [np.zeros(v.size) for v in values]
    grad_a = [np.zeros(p.size) for p in policies]
    for n in range(init.num_dbs):
        for i in range(values[n].size):
            values[n][i] += 1j * COMPLEX_STEP
            l_c, _ = _pipeline(values, policies, shapes, inner_exps, eval_exps, cfg)
            values[n][i] -= 1j * COMPLEX_STEP
            grad_c[n][i] = np.imag(l_c) / COMPLEX_STEP
        for i in range(policies[n].size):
            policies[n][i] += 1j * COMPLEX_STEP
            _, l_a = _pipeline(values, policies, shapes, inner_exps, eval_exps, cfg)
            policies[n][i] -= 1j * COMPLEX_STEP
            grad_a[n][i] = np.imag(l_a) / COMPLEX_STEP
    return grad_c, grad_a


def task_gradient(init, z, rng, world, cfg):
    """Meta-gradient contribution and losses of one realization.

    Returns
    -------
    tuple
        (list of value gradients, list of policy gradients, summed L_c, summed L_a)
    """
    table = link_table(world, z)
    adapted, inner_exps = inner_adapt(init, z, rng, world, cfg, table)
    losses, eval_exps = meta_losses(adapted, z, rng, world, cfg, table)
    if cfg.mode is GradientMode.EXACT:
        grad_c, grad_a = _exact_gradient(init, inner_exps, eval_exps, cfg)
    else:
        grad_c, grad_a = _first_order_gradient(adapted, eval_exps, cfg)
    return grad_c, grad_a, math.fsum(losses[:, 0]), math.fsum(losses[:, 1])


def meta_step(init, tasks, world, cfg, rng, iteration=None):
    """theta_c -= beta grad sum L_c, theta_a -= beta grad sum L_a over the given tasks.

    Returns
    -------
    tuple
        (new ParamSet, summed L_c, summed L_a)
    """
    seeds = rng.integers(0, 2 ** 63 - 1, size=len(tasks))

    def run(job):
        z, seed = job
        return task_gradient(init, z, np.random.default_rng(int(seed)), world, cfg)

    jobs = list(zip(tasks, seeds))
    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(job) for job in jobs]

    grad_c = [np.zeros(len(v)) for v in init.value]
    grad_a = [np.zeros(len(p)) for p in init.policy]
    for task_c, task_a, _, _ in results:
        for n in range(init.num_dbs):
            grad_c[n] = grad_c[n] + task_c[n]
            grad_a[n] = grad_a[n] + task_a[n]
    value, policy = [], []
    for n in range(init.num_dbs):
        new_c = init.value[n].values - cfg.meta_step * grad_c[n]
        new_a = init.policy[n].values - cfg.meta_step * grad_a[n]
        if not (np.all(np.isfinite(new_c)) and np.all(np.isfinite(new_a))):
            raise NumericError("non-finite meta update of DBS {}".format(n), iteration=iteration)
        value.append(init.value[n].replace(new_c))
        policy.append(init.policy[n].replace(new_a))
    l_c = math.fsum(r[2] for r in results)
    l_a = math.fsum(r[3] for r in results)
    return ParamSet(policy, value), l_c, l_a


def meta_train(world, dist, init, cfg, rng, tasks=None):
    """Meta-train an initialization.

    Parameters
    ----------
    world : WorldConfig
        Scenario
    dist : TaskDistribution
        Request distribution p(Z)
    init : ParamSet
        Random starting initialization
    cfg : MetaConfig
        Settings
    rng : numpy.random.Generator
        Stream for per-task child seeds
    tasks : list of list of RequestRealization, optional
        Task stream, ``meta_task_stream(world, dist, cfg.seed, ...)`` when omitted

    Returns
    -------
    MetaResult
    """
    if tasks is None:
        tasks = meta_task_stream(world, dist, cfg.seed, cfg.meta_iterations, cfg.tasks_per_iteration)
    result = MetaResult(params=init)
    params = init
    for i in tqdm(range(cfg.meta_iterations), desc="meta", disable=not cfg.progress):
        params, l_c, l_a = meta_step(params, tasks[i], world, cfg, rng, iteration=i)
        result.history.append({"meta_iteration": i, "L_c": l_c, "L_a": l_a})
        logger.debug("meta iteration %d: L_c = %.6g, L_a = %.6g", i, l_c, l_a)
    result.params = params
    return result


def _snapshot_rows(task, init, iteration, outcome):
    rows = []
    for n, row in enumerate(outcome.trajectory):
        for k, loc in enumerate(row):
            rows.append({"task": task, "init": init, "iteration": iteration, "dbs": n, "step": k,
                         "cluster": "O" if loc == ORIGIN else str(loc), "G": outcome.utility})
    return rows


def eval_adaptation(world, dist, inits, train_cfg, seed, num_tasks=5, threshold=0.95, window=20,
                    oracle_cap=10 ** 7, snapshot_iterations=()):
    """Adaptation speed of several initializations on held-out realizations.

    Parameters
    ----------
    world : WorldConfig
        Scenario
    dist : TaskDistribution
        Request distribution
    inits : dict
        name -> ParamSet
    train_cfg : TrainConfig
        Settings of the adaptation runs
    seed : int
        Seed of the held-out stream (disjoint from the meta task stream)
    num_tasks : int, optional
        Held-out realizations
    threshold : float, optional
        Fraction of the reference utility to reach
    window : int, optional
        Moving-average window of the threshold test
    oracle_cap : int, optional
        Enumeration cap; above it the best G reached by any init is the reference
    snapshot_iterations : sequence of int, optional
        Adaptation iterations after which the greedy joint trajectory is
        recorded (0 is the initialization itself)

    Returns
    -------
    tuple
        (rows, curves, snapshots): one row per (task, init) with reference,
        iterations and final G, one curve point per (task, init, iteration) and
        one snapshot entry per (task, init, snapshot iteration, dbs, step)
    """
    snapshot_at = sorted({int(s) for s in snapshot_iterations if 0 <= int(s) <= train_cfg.max_iterations})
    cfg = replace(train_cfg, checkpoint_interval=1) if snapshot_at else train_cfg
    rows, curves, snapshots = [], [], []
    for t, z in enumerate(held_out_tasks(world, dist, seed, num_tasks)):
        try:
            reference, _ = enumerate_optimal(world, z, cap=oracle_cap)
            exact = True
        except OracleCapExceeded:
            reference, exact = None, False
        histories = {}
        for name, init in inits.items():
            rng = np.random.default_rng([seed, ADAPTATION_STREAM, t])
            taken = {}
            if 0 in snapshot_at:
                taken[0] = greedy_trajectory(world, z, init)[1]

            def snapshot(i, params, taken=taken):
                if i + 1 in snapshot_at:
                    taken[i + 1] = greedy_trajectory(world, z, params)[1]

            histories[name] = train(world, z, init, cfg, rng, checkpoint=snapshot if snapshot_at else None).utilities
            for iteration, outcome in sorted(taken.items()):
                snapshots.extend(_snapshot_rows(t, name, iteration, outcome))
        if reference is None:
            reference = max(float(h.max()) if h.size else 0.0 for h in histories.values())
        for name, history in histories.items():
            iters = iterations_to_threshold(history, threshold * reference, window)
            rows.append({
                "task": t,
                "init": name,
                "reference_G": reference,
                "oracle": exact,
                "iterations": iters,
                "reached": iters < len(history),
                "final_G": float(history[-window:].mean()) if history.size else 0.0,
            })
            curves.extend({"task": t, "init": name, "iteration": i, "G": float(g)} for i, g in enumerate(history))
        logger.info("held-out task %d: reference G = %.4f", t, reference)
    return rows, curves, snapshots
