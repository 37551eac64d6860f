import logging
import os
from dataclasses import replace

import numpy as np

from ..approx import ParamSet
from ..checkpoint import save_params
from ..config import SCHEMA_VERSION, read_toml
from ..errors import ConfigError
from ..metrics import csv_header, final_utility, write_csv, write_summary
from ..sim import format_event_log
from ..world import sample_realization

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s: %(message)s"


def attach_log_file(run_dir):
    """Append package log records to ``<run_dir>/log``."""
    handler = logging.FileHandler(os.path.join(run_dir, "log"), mode="a")
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    package_logger = logging.getLogger("dbsmeta")
    if package_logger.level == logging.NOTSET:
        package_logger.setLevel(logging.INFO)
    package_logger.addHandler(handler)
    return handler


def detach_log_file(handler):
    logging.getLogger("dbsmeta").removeHandler(handler)
    handler.close()


def recorded_spec_hash(run_dir):
    """Spec hash of the run already stored in ``run_dir``, or None for a fresh directory."""
    summary = os.path.join(run_dir, "summary.toml")
    if os.path.exists(summary):
        return read_toml(summary).get("spec_hash")
    metrics = os.path.join(run_dir, "metrics.csv")
    if os.path.exists(metrics):
        return csv_header(metrics).get("spec_hash")
    return None


class RunnerBase:
    """Base class of one (algorithm, seed) run writing into its own directory.

    Parameters
    ----------
    spec : ExperimentSpec
        Resolved experiment
    algo : str
        Algorithm name
    seed : int
        Run seed
    run_dir : str
        Output directory of this run
    progress : bool
        Show progress bars

    Attributes
    ----------
    world : WorldConfig
        Scenario of the run
    z : RequestRealization
        Fixed realization drawn from ``tasks.realization_seed``
    """

    def __init__(self, spec, algo, seed, run_dir, progress=True):
        self.spec = spec
        self.algo = algo
        self.seed = int(seed)
        self.run_dir = run_dir
        self.progress = progress
        self.world = spec.world
        self.z = self.realization(spec)

    @staticmethod
    def realization(spec):
        rng = np.random.default_rng(int(spec.section("tasks")["realization_seed"]))
        return sample_realization(spec.tasks, spec.world, rng)

    def _execute(self):
        """Run the algorithm and return the summary entries specific to it.

        This is a placeholder that should be implemented by subclasses.
        """
        raise NotImplementedError("_execute is not implemented.")

    def random_init(self, rng):
        return ParamSet.init(self.world, rng, self.spec.hidden, self.spec.activation)

    def train_config(self, max_iterations=None):
        cfg = self.spec.train_config(self.seed, self.algo, max_iterations)
        if not self.progress and cfg.progress:
            cfg = replace(cfg, progress=False)
        return cfg

    def checkpoint_hook(self, kind):
        def hook(i, params):
            path = os.path.join(self.run_dir, "params_{:06d}.h5".format(i + 1))
            save_params(path, params, kind=kind)
            logger.info("checkpoint %s", path)

        return hook

    def write_metrics(self, frame, name="metrics.csv"):
        frame = frame.copy()
        frame.insert(0, "seed", self.seed)
        frame.insert(0, "algo", self.algo)
        write_csv(frame, os.path.join(self.run_dir, name), self.spec.spec_hash)

    def write_episode(self, outcome):
        with open(os.path.join(self.run_dir, "events.txt"), "w") as f:
            f.write(format_event_log(outcome, self.spec.spec_hash))

    def train_summary(self, result, cfg):
        """Summary entries shared by all runs that end with a training loop."""
        utilities = result.utilities
        summary = {
            "iterations": len(utilities),
            "final_G": final_utility(utilities, cfg.convergence_window),
            "converged": bool(result.converged),
            "iterations_to_converge": int(result.converged_at if result.converged else len(utilities)),
        }
        if result.converged:
            summary["converged_at"] = int(result.converged_at)
        return summary

    def run(self):
        """Execute the run and write ``summary.toml``.

        A directory holding a run of a different spec is never overwritten.

        Returns
        -------
        dict
            The summary written to disk
        """
        previous = recorded_spec_hash(self.run_dir)
        if previous is not None and previous != self.spec.spec_hash:
            raise ConfigError("{} holds a run of spec {}, not {}; choose another --out".format(
                self.run_dir, previous, self.spec.spec_hash))
        os.makedirs(self.run_dir, exist_ok=True)
        handler = attach_log_file(self.run_dir)
        try:
            logger.info("start %s seed %d, spec_hash = %s", self.algo, self.seed, self.spec.spec_hash)
            summary = {
                "schema_version": SCHEMA_VERSION,
                "spec_hash": self.spec.spec_hash,
                "algo": self.algo,
                "seed": self.seed,
                "num_dbs": self.world.num_dbs,
                "num_active": self.z.num_active,
            }
            summary.update(self._execute())
            write_summary(os.path.join(self.run_dir, "summary.toml"), summary)
            logger.info("finish %s seed %d: final G = %.4f", self.algo, self.seed, summary.get("final_G", 0.0))
        finally:
            detach_log_file(handler)
        return summary
