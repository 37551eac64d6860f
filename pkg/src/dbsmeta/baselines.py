"""
Comparison algorithms: independent actor-critic with one shared network pair
and individual rewards, and VD-RL pre-trained sequentially on the meta tasks.
"""

import enum
import logging

import numpy as np

from .approx import ParamSet, ParamVector, policy_shape, value_shape
from .errors import NumericError
from .vdrl import run_training, score_direction, state_values, train, value_direction

logger = logging.getLogger(__name__)


class BaselineKind(enum.Enum):
    IAC = "iac"
    PRETRAINED_VDRL = "pretrain"
    RANDOM_INIT_VDRL = "random"


def shared_params(policy, value, num_dbs):
    """ParamSet whose every DBS entry is the same policy and value object."""
    return ParamSet((policy,) * num_dbs, (value,) * num_dbs)


def iac_init(world, rng, hidden=(64, 64), activation="tanh"):
    policy = ParamVector.init(policy_shape(world, hidden, activation), rng)
    value = ParamVector.init(value_shape(world, hidden, activation), rng)
    return shared_params(policy, value, world.num_dbs)


def individual_advantages(value, experiences, discount):
    """A~_{n,k} = mu_{n,k} + gamma V(s_{n,k+1}) - V(s_{n,k}) with the shared value network."""
    rows = []
    for exp in experiences:
        values = state_values(value.values, value.shape, exp.features)
        rows.append(exp.own_rewards + discount * values[1:] - values[:-1])
    return np.array(rows)


def iac_step(params, experiences, alpha_c, alpha_a, discount, semi_gradient=False, iteration=None):
    """Update the shared pair with the per-DBS contributions summed.

    Returns
    -------
    tuple
        (updated ParamSet, individual advantages (N, K))
    """
    value, policy = params.value[0], params.policy[0]
    adv = individual_advantages(value, experiences, discount)
    value_dir = np.zeros(len(value))
    policy_dir = np.zeros(len(policy))
    for exp, a in zip(experiences, adv):
        value_dir += value_direction(value.values, value.shape, exp.features, a, discount, semi_gradient)
        policy_dir += score_direction(policy.values, policy.shape, exp.features, exp.actions, exp.masks, a)
    new_value = value.values - 2.0 * alpha_c * value_dir
    new_policy = policy.values + alpha_a * policy_dir
    if not (np.all(np.isfinite(new_value)) and np.all(np.isfinite(new_policy))):
        raise NumericError("non-finite shared update", iteration=iteration)
    return shared_params(policy.replace(new_policy), value.replace(new_value), params.num_dbs), adv


def iac_train(world, z, init, cfg, rng, checkpoint=None):
    """Independent actor-critic on the same episode machinery as VD-RL.

    Parameters
    ----------
    world : WorldConfig
        Scenario
    z : RequestRealization or TaskDistribution
        Realization (or distribution redrawn per iteration)
    init : ParamSet
        Shared initialization, e.g. from ``iac_init``
    cfg : TrainConfig
        Settings; ``scale_team_reward`` is ignored
    rng : numpy.random.Generator
        Sampling stream

    Returns
    -------
    TrainResult
    """
    init = shared_params(init.policy[0], init.value[0], init.num_dbs)

    def step(params, experiences, i):
        new, adv = iac_step(params, experiences, cfg.value_schedule(i), cfg.policy_schedule(i), cfg.discount,
                            cfg.semi_gradient, iteration=i)
        return new, adv.ravel()

    return run_training(world, z, init, cfg, rng, step, checkpoint, desc="iac")


def pretrain_init(world, tasks, init, cfg, rng):
    """Train VD-RL task after task, each run starting from the previous result."""
    params = init
    for j, z in enumerate(tasks):
        params = train(world, z, params, cfg, rng).params
        logger.debug("pretrain: finished task %d of %d", j + 1, len(tasks))
    return params
