"""
HDF5 parameter checkpoints.

Layout::

    /                 attrs: schema_version, kind, num_dbs, shared
    /policy/<n>/theta attrs: sizes, activations
    /value/<n>/theta  attrs: sizes, activations

Step-size schedules, when given, are stored as root attributes
``schedule_<name> = [a, b, p]``. Shared parameter sets (one network for
every DBS) store only entry 0.
"""

import os

import h5py
import numpy as np

from .approx import NetShape, ParamSet, ParamVector
from .errors import ConfigError

CHECKPOINT_VERSION = 1


def _decode(x):
    return x.decode("utf-8") if isinstance(x, bytes) else str(x)


def save_params(path, params, kind="vdrl", schedules=None):
    """Write a ParamSet to an HDF5 checkpoint.

    Parameters
    ----------
    path : str
        Output file, overwritten
    params : ParamSet
        Parameters to store
    kind : str, optional
        Algorithm that produced the parameters
    schedules : dict, optional
        name -> StepSchedule recorded next to the parameters
    """
    shared = all(p is params.policy[0] for p in params.policy) and \
        all(v is params.value[0] for v in params.value) and params.num_dbs > 1
    with h5py.File(path, "w") as h5:
        h5.attrs["schema_version"] = CHECKPOINT_VERSION
        h5.attrs["kind"] = kind
        h5.attrs["num_dbs"] = params.num_dbs
        h5.attrs["shared"] = shared
        for name, schedule in (schedules or {}).items():
            h5.attrs["schedule_{}".format(name)] = np.array([schedule.a, schedule.b, schedule.p])
        for group_name, vectors in (("policy", params.policy), ("value", params.value)):
            group = h5.create_group(group_name)
            for n, vec in enumerate(vectors[:1] if shared else vectors):
                sub = group.create_group(str(n))
                dset = sub.create_dataset("theta", data=vec.values)
                dset.attrs["sizes"] = np.array(vec.shape.sizes, dtype=np.int64)
                dset.attrs["activations"] = list(vec.shape.activations)


def load_params(path):
    """Read a checkpoint written by ``save_params``.

    Returns
    -------
    tuple
        (ParamSet, dict of root attributes)
    """
    if not os.path.exists(path):
        raise ConfigError("checkpoint {} does not exist".format(path))
    with h5py.File(path, "r") as h5:
        version = int(h5.attrs.get("schema_version", -1))
        if version != CHECKPOINT_VERSION:
            raise ConfigError("checkpoint {} has schema version {}, expected {}".format(
                path, version, CHECKPOINT_VERSION))
        num_dbs = int(h5.attrs["num_dbs"])
        shared = bool(h5.attrs.get("shared", False))
        vectors = {}
        for group_name in ("policy", "value"):
            loaded = []
            for n in range(1 if shared else num_dbs):
                dset = h5["{}/{}/theta".format(group_name, n)]
                shape = NetShape(tuple(int(s) for s in dset.attrs["sizes"]),
                                 tuple(_decode(a) for a in dset.attrs["activations"]))
                loaded.append(ParamVector(dset[()], shape))
            vectors[group_name] = loaded * num_dbs if shared else loaded
        info = {key: h5.attrs[key] for key in h5.attrs.keys()}
    info["kind"] = _decode(info["kind"])
    return ParamSet(vectors["policy"], vectors["value"]), info
