"""
Feed-forward policy and value networks with analytic gradients.

Parameters of one network live in a single flat vector. For every layer the
weight matrix W (out, in) is stored row-major, followed by the bias b (out,).
The ``*_array`` kernels work on raw arrays and accept complex parameters, which
the exact meta-gradient uses for complex-step differentiation; the public
functions wrap them for ``ParamVector`` values and check finiteness.
"""

import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy.special import xlogy

from .errors import ConfigError, DomainError, NumericError
from .world import ORIGIN

ACTIVATIONS = ("tanh", "linear")


@dataclass(frozen=True)
class NetShape:
    """Layer sizes and activation tags of a multilayer perceptron.

    Parameters
    ----------
    sizes : tuple of int
        Input size, hidden sizes and output size
    activations : tuple of str
        One tag per layer (``len(sizes) - 1`` entries)
    """

    sizes: Tuple[int, ...]
    activations: Tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "sizes", tuple(int(s) for s in self.sizes))
        object.__setattr__(self, "activations", tuple(str(a) for a in self.activations))
        if len(self.sizes) < 2 or any(s < 1 for s in self.sizes):
            raise ConfigError("network sizes must hold at least an input and an output size, all positive")
        if len(self.activations) != len(self.sizes) - 1:
            raise ConfigError("network needs one activation per layer")
        for tag in self.activations:
            if tag not in ACTIVATIONS:
                raise ConfigError("unknown activation '{}' (expected one of {})".format(tag, ", ".join(ACTIVATIONS)))

    @property
    def num_params(self):
        return sum((n_in + 1) * n_out for n_in, n_out in zip(self.sizes[:-1], self.sizes[1:]))

    @property
    def input_size(self):
        return self.sizes[0]

    @property
    def output_size(self):
        return self.sizes[-1]


def mlp_shape(input_size, hidden, output_size, activation="tanh"):
    """Shape with the given hidden layers and a linear output layer."""
    hidden = tuple(hidden)
    return NetShape((input_size,) + hidden + (output_size,), (activation,) * len(hidden) + ("linear",))


def policy_shape(world, hidden=(64, 64), activation="tanh"):
    return mlp_shape(world.num_clusters + 2, hidden, world.num_actions, activation)


def value_shape(world, hidden=(64, 64), activation="tanh"):
    return mlp_shape(world.num_clusters + 2, hidden, 1, activation)


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Immutable flat parameter vector of one network."""

    values: np.ndarray
    shape: NetShape

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64).ravel()
        if values.size != self.shape.num_params:
            raise ConfigError("parameter vector has {} entries, shape {} needs {}".format(
                values.size, self.shape.sizes, self.shape.num_params))
        if not np.all(np.isfinite(values)):
            raise NumericError("parameter vector holds non-finite entries")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def init(cls, shape, rng):
        """Uniform initialization in [-1/sqrt(fan_in), 1/sqrt(fan_in)] per layer."""
        chunks = []
        for n_in, n_out in zip(shape.sizes[:-1], shape.sizes[1:]):
            bound = 1.0 / math.sqrt(n_in)
            chunks.append(rng.uniform(-bound, bound, (n_in + 1) * n_out))
        return cls(np.concatenate(chunks), shape)

    @classmethod
    def zeros(cls, shape):
        return cls(np.zeros(shape.num_params), shape)

    def replace(self, values):
        return ParamVector(values, self.shape)

    def __len__(self):
        return self.values.size


@dataclass(frozen=True, eq=False)
class ParamSet:
    """Per-DBS policy and value parameters (theta_a, theta_c)."""

    policy: Tuple[ParamVector, ...]
    value: Tuple[ParamVector, ...]

    def __post_init__(self):
        object.__setattr__(self, "policy", tuple(self.policy))
        object.__setattr__(self, "value", tuple(self.value))
        if len(self.policy) != len(self.value):
            raise ConfigError("parameter set needs as many policy as value networks")

    @classmethod
    def init(cls, world, rng, hidden=(64, 64), activation="tanh"):
        p_shape = policy_shape(world, hidden, activation)
        v_shape = value_shape(world, hidden, activation)
        policy = tuple(ParamVector.init(p_shape, rng) for _ in range(world.num_dbs))
        value = tuple(ParamVector.init(v_shape, rng) for _ in range(world.num_dbs))
        return cls(policy, value)

    @property
    def num_dbs(self):
        return len(self.policy)


def encode_state(state, world):
    """One-hot location over the C+1 slots (slot C is the Origin) followed by tau/T."""
    enc = np.zeros(world.num_clusters + 2)
    enc[action_slot(state.location, world.num_clusters)] = 1.0
    enc[-1] = min(1.0, max(0.0, state.remaining_time_s / world.period))
    return enc


def action_slot(location, num_clusters):
    return num_clusters if location == ORIGIN else int(location)


def slot_location(slot, num_clusters):
    return ORIGIN if slot == num_clusters else int(slot)


def _layers(theta, shape):
    offset = 0
    for n_in, n_out in zip(shape.sizes[:-1], shape.sizes[1:]):
        w = theta[offset:offset + n_in * n_out].reshape(n_out, n_in)
        offset += n_in * n_out
        b = theta[offset:offset + n_out]
        offset += n_out
        yield w, b


def _activate(tag, z):
    if tag == "tanh":
        return np.tanh(z)
    return z


def _forward(theta, shape, x):
    """Return the list of layer inputs plus the network output."""
    a = np.asarray(x)
    acts = [a]
    for (w, b), tag in zip(_layers(theta, shape), shape.activations):
        a = _activate(tag, w @ a + b)
        acts.append(a)
    return acts


def _backward(theta, shape, acts, grad_out):
    """Gradient of <grad_out, output> with respect to the flat parameters."""
    layers = list(_layers(theta, shape))
    pieces = []
    delta_out = grad_out
    for idx in range(len(layers) - 1, -1, -1):
        w, _ = layers[idx]
        out = acts[idx + 1]
        delta = delta_out * (1.0 - out * out) if shape.activations[idx] == "tanh" else delta_out
        pieces.append(delta)
        pieces.append(np.outer(delta, acts[idx]).ravel())
        delta_out = w.T @ delta
    return np.concatenate(pieces[::-1])


def _masked_softmax(logits, mask):
    probs = np.zeros_like(logits)
    shift = np.max(np.real(logits[mask]))
    e = np.exp(logits[mask] - shift)
    probs[mask] = e / np.sum(e)
    return probs


def _check_mask(mask, size):
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (size,):
        raise DomainError("action mask has shape {}, expected ({},)".format(mask.shape, size))
    if not mask.any():
        raise DomainError("action mask is empty")
    return mask


def policy_probs_array(theta, shape, x, mask):
    return _masked_softmax(_forward(theta, shape, x)[-1], mask)


def grad_log_prob_array(theta, shape, x, slot, mask):
    acts = _forward(theta, shape, x)
    probs = _masked_softmax(acts[-1], mask)
    onehot = np.zeros_like(probs)
    onehot[slot] = 1.0
    return _backward(theta, shape, acts, onehot - probs)


def log_prob_array(theta, shape, x, slot, mask):
    logits = _forward(theta, shape, x)[-1]
    shift = np.max(np.real(logits[mask]))
    return logits[slot] - shift - np.log(np.sum(np.exp(logits[mask] - shift)))


def value_array(theta, shape, x):
    return _forward(theta, shape, x)[-1][0]


def grad_value_array(theta, shape, x):
    acts = _forward(theta, shape, x)
    return _backward(theta, shape, acts, np.ones(1, dtype=acts[-1].dtype))


def _checked(params):
    if not np.all(np.isfinite(params.values)):
        raise NumericError("non-finite network parameters")
    return params.values


def forward_policy(params, enc, mask):
    """Masked softmax strategy over the C+1 actions.

    Parameters
    ----------
    params : ParamVector
        Policy network parameters
    enc : ndarray
        State encoding from ``encode_state``
    mask : array_like of bool
        Feasible action slots

    Returns
    -------
    ndarray
        Probabilities, exactly zero outside the mask
    """
    mask = _check_mask(mask, params.shape.output_size)
    return policy_probs_array(_checked(params), params.shape, enc, mask)


def forward_value(params, enc):
    return float(value_array(_checked(params), params.shape, enc))


def grad_log_prob(params, enc, action, mask=None):
    """Gradient of log pi(action | state) over the feasible simplex.

    Parameters
    ----------
    params : ParamVector
        Policy network parameters
    enc : ndarray
        State encoding
    action : int
        Action slot (C for the Origin)
    mask : array_like of bool, optional
        Feasible action slots, all actions when omitted

    Returns
    -------
    ParamVector
    """
    size = params.shape.output_size
    mask = np.ones(size, dtype=bool) if mask is None else _check_mask(mask, size)
    if not 0 <= action < size or not mask[action]:
        raise DomainError("action {} is outside the feasible set".format(action))
    return params.replace(grad_log_prob_array(_checked(params), params.shape, enc, action, mask))


def grad_value(params, enc):
    return params.replace(grad_value_array(_checked(params), params.shape, enc))


def policy_entropy(probs):
    return float(-np.sum(xlogy(probs, probs)))


def finite_diff_check(fn, params, analytic_grad, step=1.0e-6):
    """Compare an analytic gradient against central differences.

    Parameters
    ----------
    fn : callable
        Pure scalar function of a flat parameter array
    params : ParamVector or ndarray
        Evaluation point
    analytic_grad : ParamVector or ndarray
        Gradient to check
    step : float, optional
        Difference step

    Returns
    -------
    float
        max_i |g_i - g_fd_i| / max(max_i |g_fd_i|, tiny)
    """
    x = np.array(getattr(params, "values", params), dtype=np.float64)
    g = np.asarray(getattr(analytic_grad, "values", analytic_grad), dtype=np.float64)
    estimate = np.empty_like(x)
    for i in range(x.size):
        orig = x[i]
        x[i] = orig + step
        f_plus = fn(x.copy())
        x[i] = orig - step
        f_minus = fn(x.copy())
        x[i] = orig
        estimate[i] = (f_plus - f_minus) / (2.0 * step)
    scale = max(float(np.max(np.abs(estimate))) if estimate.size else 0.0, np.finfo(np.float64).tiny)
    return float(np.max(np.abs(g - estimate))) / scale if estimate.size else 0.0
