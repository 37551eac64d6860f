"""
TOML experiment files.

An experiment file holds ``schema_version = 1`` and the sections listed in
``DEFAULTS``. Missing keys take the defaults below, unknown sections or keys
are rejected. ``--override section.key=value`` strings are applied before
validation; values are parsed as TOML and fall back to bare strings.
"""

import copy
import hashlib
import logging
import os
from dataclasses import dataclass
from typing import Any, Dict, List

import numpy as np
import tomli
import tomli_w

from .errors import ConfigError
from .meta import GradientMode, MetaConfig
from .vdrl import StepSchedule, TrainConfig
from .world import ClusterSpec, RadioConfig, ShadowMode, TaskDistribution, WorldConfig, scatter_users

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

ALGORITHMS = ("vdrl", "vdrl-unscaled", "iac", "meta", "pretrain", "oracle")

DEFAULTS = {
    "world": {
        "origin": [0.0, 0.0],
        "num_dbs": 2,
        "speed": 30.0,
        "period": 150.0,
        "max_steps": 3,
        "service_radius": 50.0,
        "altitude_base": 100.0,
        "altitude_step": 20.0,
        "layout_seed": 0,
    },
    "radio": {
        "carrier_hz": 2.0e9,
        "tx_power_dbm": 20.0,
        "noise_psd_dbm_hz": -170.0,
        "rb_bandwidth_hz": 1.0e6,
        "shadow_los": [1.6, 8.41],
        "shadow_nlos": [23.0, 33.78],
        "los_phi": 9.61,
        "los_small_phi": 0.16,
        "shadow_mode": "mean",
        "db_exponent_divisor": 20,
    },
    "tasks": {
        "p_active": 0.8,
        "bits_min": 5.0e7,
        "bits_max": 2.0e8,
        "realization_seed": 0,
    },
    "network": {
        "hidden": [64, 64],
        "activation": "tanh",
    },
    "train": {
        "max_iterations": 2000,
        "discount": 0.95,
        "value_step": [0.01, 1.0, 0.6],
        "policy_step": [0.005, 1.0, 0.6],
        "convergence_window": 100,
        "convergence_tol": 1.0e-3,
        "stop_on_convergence": False,
        "semi_gradient": False,
        "checkpoint_interval": 0,
        "progress": True,
    },
    "meta": {
        "meta_iterations": 200,
        "tasks_per_iteration": 4,
        "inner_value_step": 0.01,
        "inner_policy_step": 0.005,
        "meta_step": 0.001,
        "mode": "first_order",
        "surrogate_sign": 1.0,
        "workers": 1,
    },
    "pretrain": {
        "iterations_per_task": 50,
    },
    "oracle": {
        "cap": 10 ** 7,
        "workers": 1,
    },
    "eval": {
        "num_tasks": 5,
        "threshold": 0.95,
        "window": 20,
        "max_iterations": 2000,
        "algorithms": ["meta", "pretrain", "random"],
        "snapshot_iterations": [100],
    },
    "experiment": {
        "algorithm": "vdrl",
        "seeds": [0],
        "output_dir": "output",
    },
}

# keys without a default value
OPTIONAL_KEYS = {
    "world": {"clusters", "altitudes"},
    "tasks": {"t_max", "hotspot_weights"},
    "experiment": {"world_file"},
}


def _parse_value(text):
    try:
        return tomli.loads("v = {}".format(text))["v"]
    except tomli.TOMLDecodeError:
        return text


def apply_override(dic, item):
    """Apply one ``dotted.path=value`` override in place."""
    if "=" not in item:
        raise ConfigError("override '{}' must look like section.key=value".format(item))
    path, text = item.split("=", 1)
    keys = path.strip().split(".")
    if len(keys) < 2:
        raise ConfigError("override '{}' must name a section and a key".format(item))
    node = dic
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError("override '{}' descends into a non-table value".format(item))
    node[keys[-1]] = _parse_value(text.strip())
    return dic


def read_toml(path):
    if not os.path.exists(path):
        raise ConfigError("file not found: {}".format(path))
    with open(path, "rb") as f:
        try:
            return tomli.load(f)
        except tomli.TOMLDecodeError as e:
            raise ConfigError("cannot parse {}: {}".format(path, e)) from e


def write_toml(dic, path):
    with open(path, "wb") as f:
        tomli_w.dump(dic, f)


def resolve(raw, base_dir="."):
    """Merge a raw experiment dict with the defaults and check its keys."""
    raw = copy.deepcopy(raw)
    version = raw.pop("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError("schema_version {} is not supported (expected {})".format(version, SCHEMA_VERSION))
    world_file = raw.get("experiment", {}).get("world_file")
    if world_file:
        path = world_file if os.path.isabs(world_file) else os.path.join(base_dir, world_file)
        external = read_toml(path)
        if "world" not in external:
            raise ConfigError("world file {} has no [world] table".format(path))
        raw["world"] = {**external["world"], **{k: v for k, v in raw.get("world", {}).items()
                                                  if k != "clusters"}}
        # the merged world stands on its own from here on
        del raw["experiment"]["world_file"]
    resolved = {"schema_version": SCHEMA_VERSION}
    for section, table in raw.items():
        if section not in DEFAULTS:
            raise ConfigError("unknown section [{}]".format(section))
        if not isinstance(table, dict):
            raise ConfigError("[{}] must be a table".format(section))
        allowed = set(DEFAULTS[section]) | OPTIONAL_KEYS.get(section, set())
        unknown = sorted(set(table) - allowed)
        if unknown:
            raise ConfigError("unknown key(s) {} in [{}]".format(", ".join(unknown), section))
    for section, defaults in DEFAULTS.items():
        merged = copy.deepcopy(defaults)
        merged.update(raw.get(section, {}))
        resolved[section] = merged
    if "clusters" not in resolved["world"] or not resolved["world"]["clusters"]:
        raise ConfigError("[world] needs at least one [[world.clusters]] entry")
    return resolved


def spec_hash(resolved):
    return hashlib.sha256(tomli_w.dumps(resolved).encode("utf-8")).hexdigest()


def _pair(value, name):
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        raise ConfigError("{} must be a pair of numbers".format(name))
    return float(value[0]), float(value[1])


def build_radio(section):
    try:
        mode = ShadowMode(section["shadow_mode"])
    except ValueError as e:
        raise ConfigError("radio.shadow_mode must be 'mean' or 'sampled'") from e
    return RadioConfig(
        carrier_hz=float(section["carrier_hz"]),
        tx_power_dbm=float(section["tx_power_dbm"]),
        noise_psd_dbm_hz=float(section["noise_psd_dbm_hz"]),
        rb_bandwidth_hz=float(section["rb_bandwidth_hz"]),
        shadow_los=_pair(section["shadow_los"], "radio.shadow_los"),
        shadow_nlos=_pair(section["shadow_nlos"], "radio.shadow_nlos"),
        los_phi=float(section["los_phi"]),
        los_small_phi=float(section["los_small_phi"]),
        shadow_mode=mode,
        db_exponent_divisor=int(section["db_exponent_divisor"]),
    )


def build_world(section, radio):
    """Build a WorldConfig from a resolved [world] table.

    Clusters either list explicit ``users`` positions or a ``num_users`` count
    placed uniformly in the service disk from ``layout_seed``.
    """
    num_dbs = int(section["num_dbs"])
    if "altitudes" in section:
        altitudes = tuple(float(h) for h in section["altitudes"])
    else:
        altitudes = tuple(float(section["altitude_base"]) + n * float(section["altitude_step"])
                          for n in range(num_dbs))
    rng = np.random.default_rng(int(section["layout_seed"]))
    positions, clusters = [], []
    start = 0
    for c, entry in enumerate(section["clusters"]):
        extra = set(entry) - {"center", "users", "num_users"}
        if extra:
            raise ConfigError("unknown key(s) {} in world.clusters[{}]".format(", ".join(sorted(extra)), c))
        if "center" not in entry:
            raise ConfigError("world.clusters[{}] needs a center".format(c))
        center = _pair(entry["center"], "world.clusters[{}].center".format(c))
        if "users" in entry:
            pts = np.asarray(entry["users"], dtype=np.float64).reshape(-1, 2)
        elif "num_users" in entry:
            pts, _ = scatter_users([center], [int(entry["num_users"])], float(section["service_radius"]), rng)
        else:
            raise ConfigError("world.clusters[{}] needs users or num_users".format(c))
        positions.append(pts)
        clusters.append(ClusterSpec(c, center, tuple(range(start, start + pts.shape[0]))))
        start += pts.shape[0]
    return WorldConfig(
        clusters=tuple(clusters),
        origin=_pair(section["origin"], "world.origin"),
        num_dbs=num_dbs,
        altitudes=altitudes,
        speed=float(section["speed"]),
        period=float(section["period"]),
        max_steps=int(section["max_steps"]),
        service_radius=float(section["service_radius"]),
        radio=radio,
        user_positions=np.vstack(positions),
    )


def world_to_dict(world):
    """Stand-alone [world] table with explicit user positions."""
    section = {
        "origin": [float(x) for x in world.origin],
        "num_dbs": world.num_dbs,
        "altitudes": [float(h) for h in world.altitudes],
        "speed": world.speed,
        "period": world.period,
        "max_steps": world.max_steps,
        "service_radius": world.service_radius,
        "clusters": [
            {"center": [float(x) for x in c.center],
             "users": [[float(x), float(y)] for x, y in world.user_positions[list(c.members)]]}
            for c in world.clusters
        ],
    }
    return {"schema_version": SCHEMA_VERSION, "world": section}


def build_tasks(section):
    hotspot = section.get("hotspot_weights")
    return TaskDistribution(
        p_active=float(section["p_active"]),
        bits_min=float(section["bits_min"]),
        bits_max=float(section["bits_max"]),
        t_max=float(section["t_max"]) if "t_max" in section else None,
        hotspot_weights=tuple(float(w) for w in hotspot) if hotspot is not None else None,
    )


def _schedule(value, name):
    if not isinstance(value, (list, tuple)) or len(value) != 3:
        raise ConfigError("{} must be [a, b, p]".format(name))
    return StepSchedule(*(float(v) for v in value))


def build_train(section, seed=0, scale_team_reward=True, max_iterations=None):
    return TrainConfig(
        max_iterations=int(section["max_iterations"] if max_iterations is None else max_iterations),
        discount=float(section["discount"]),
        value_schedule=_schedule(section["value_step"], "train.value_step"),
        policy_schedule=_schedule(section["policy_step"], "train.policy_step"),
        convergence_window=int(section["convergence_window"]),
        convergence_tol=float(section["convergence_tol"]),
        stop_on_convergence=bool(section["stop_on_convergence"]),
        scale_team_reward=scale_team_reward,
        semi_gradient=bool(section["semi_gradient"]),
        checkpoint_interval=int(section["checkpoint_interval"]),
        progress=bool(section["progress"]),
        seed=seed,
    )


def build_meta(section, discount, seed=0, progress=False):
    try:
        mode = GradientMode(section["mode"])
    except ValueError as e:
        raise ConfigError("meta.mode must be 'first_order' or 'exact'") from e
    return MetaConfig(
        meta_iterations=int(section["meta_iterations"]),
        tasks_per_iteration=int(section["tasks_per_iteration"]),
        inner_value_step=float(section["inner_value_step"]),
        inner_policy_step=float(section["inner_policy_step"]),
        meta_step=float(section["meta_step"]),
        mode=mode,
        discount=discount,
        surrogate_sign=float(section["surrogate_sign"]),
        workers=int(section["workers"]),
        progress=progress,
        seed=seed,
    )


@dataclass
class ExperimentSpec:
    """Resolved experiment: raw tables plus the objects built from them."""

    resolved: Dict[str, Any]
    world: WorldConfig
    tasks: TaskDistribution
    algorithm: str
    seeds: List[int]
    output_dir: str
    spec_hash: str

    @property
    def hidden(self):
        return tuple(int(h) for h in self.resolved["network"]["hidden"])

    @property
    def activation(self):
        return str(self.resolved["network"]["activation"])

    def section(self, name):
        return self.resolved[name]

    def train_config(self, seed, algorithm=None, max_iterations=None):
        algorithm = algorithm or self.algorithm
        return build_train(self.resolved["train"], seed, scale_team_reward=algorithm != "vdrl-unscaled",
                           max_iterations=max_iterations)

    def meta_config(self, seed):
        return build_meta(self.resolved["meta"], float(self.resolved["train"]["discount"]), seed,
                          bool(self.resolved["train"]["progress"]))


def load_spec(path, overrides=(), seed=None, output_dir=None):
    """Read, override, resolve and build an experiment file.

    Parameters
    ----------
    path : str
        TOML experiment file
    overrides : sequence of str
        ``section.key=value`` overrides
    seed : int, optional
        Replaces ``experiment.seeds`` with a single seed
    output_dir : str, optional
        Replaces ``experiment.output_dir``

    Returns
    -------
    ExperimentSpec
    """
    raw = read_toml(path)
    for item in overrides:
        apply_override(raw, item)
    if seed is not None:
        raw.setdefault("experiment", {})["seeds"] = [int(seed)]
    if output_dir is not None:
        raw.setdefault("experiment", {})["output_dir"] = output_dir
    return build_spec(raw, base_dir=os.path.dirname(os.path.abspath(path)))


def build_spec(raw, base_dir="."):
    resolved = resolve(raw, base_dir)
    radio = build_radio(resolved["radio"])
    world = build_world(resolved["world"], radio)
    tasks = build_tasks(resolved["tasks"])
    tasks.validate(world)
    experiment = resolved["experiment"]
    algorithm = str(experiment["algorithm"])
    if algorithm not in ALGORITHMS:
        raise ConfigError("experiment.algorithm must be one of {}".format(", ".join(ALGORITHMS)))
    seeds = [int(s) for s in experiment["seeds"]]
    if not seeds or len(set(seeds)) != len(seeds):
        raise ConfigError("experiment.seeds must be nonempty and distinct")
    # build once so that malformed train/meta tables fail at load time
    build_train(resolved["train"])
    build_meta(resolved["meta"], float(resolved["train"]["discount"]))
    snapshots = resolved["eval"]["snapshot_iterations"]
    if not isinstance(snapshots, list) or any(not isinstance(s, int) or s < 0 for s in snapshots):
        raise ConfigError("eval.snapshot_iterations must be a list of nonnegative integers")
    return ExperimentSpec(
        resolved=resolved,
        world=world,
        tasks=tasks,
        algorithm=algorithm,
        seeds=seeds,
        output_dir=str(experiment["output_dir"]),
        spec_hash=spec_hash(resolved),
    )
